#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uncspan/attack.hpp"
#include "uncspan/data.hpp"
#include "uncspan/nn.hpp"
#include "uncspan/train.hpp"

namespace uncspan {

// Experiment config file: sections of `key = value` lines, values either
// scalars or comma-separated lists. '#' starts a comment. Repeated keys
// are allowed (mixture components). The parsed text is the reproducibility
// manifest: everything a run needs flows from here plus the master seed.

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

struct RawConfig {
  // (section, key) -> values in file order.
  std::map<std::string, std::vector<std::string>> entries;
  std::string text;  // raw file contents, hashed into the manifest

  static RawConfig parse(std::istream& in, std::string text) {
    RawConfig raw;
    raw.text = std::move(text);
    std::string line, section;
    long line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ParseError("unterminated section header", line_no);
        section = detail::trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ParseError("empty section name", line_no);
        continue;
      }
      std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) throw ParseError("empty key", line_no);
      if (section.empty()) throw ParseError("key outside any [section]", line_no);
      raw.entries[section + "." + key].push_back(value);
    }
    return raw;
  }

  static RawConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    std::istringstream stream(buf.str());
    return parse(stream, buf.str());
  }

  bool has(const std::string& key) const { return entries.count(key) > 0; }

  const std::string& get(const std::string& key) const {
    auto it = entries.find(key);
    if (it == entries.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second.back();
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = entries.find(key);
    return it == entries.end() ? fallback : it->second.back();
  }

  const std::vector<std::string>& get_all(const std::string& key) const {
    auto it = entries.find(key);
    if (it == entries.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    try {
      return parse_double(get(key), key.c_str(), 0);
    } catch (const ParseError&) {
      throw ConfigError("config key '" + key + "' is not a number");
    }
  }

  double get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  long get_long(const std::string& key) const {
    try {
      return parse_long(get(key), key.c_str(), 0);
    } catch (const ParseError&) {
      throw ConfigError("config key '" + key + "' is not an integer");
    }
  }

  long get_long_or(const std::string& key, long fallback) const {
    return has(key) ? get_long(key) : fallback;
  }

  bool get_bool_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "' must be true or false");
  }

  std::vector<double> get_list(const std::string& key) const {
    return split_list(get(key), key);
  }

  static std::vector<double> split_list(const std::string& value, const std::string& key) {
    std::vector<double> out;
    std::string item;
    std::istringstream stream(value);
    while (std::getline(stream, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) throw ConfigError("config key '" + key + "' has an empty list item");
      try {
        out.push_back(parse_double(item, key.c_str(), 0));
      } catch (const ParseError&) {
        throw ConfigError("config key '" + key + "' has a non-numeric item '" + item + "'");
      }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is an empty list");
    return out;
  }
};

enum class AttackGoal { prediction, overconfidence, underconfidence, msp_selective };

inline AttackGoal attack_goal_from_name(const std::string& s) {
  if (s == "prediction") return AttackGoal::prediction;
  if (s == "overconfidence") return AttackGoal::overconfidence;
  if (s == "underconfidence") return AttackGoal::underconfidence;
  if (s == "msp_selective") return AttackGoal::msp_selective;
  throw ConfigError("unknown attack goal '" + s + "'");
}

inline const char* attack_goal_name(AttackGoal g) {
  switch (g) {
    case AttackGoal::prediction: return "prediction";
    case AttackGoal::overconfidence: return "overconfidence";
    case AttackGoal::underconfidence: return "underconfidence";
    case AttackGoal::msp_selective: return "msp_selective";
  }
  return "?";
}

/// Everything a pipeline run needs, validated up front. All randomness is
/// derived from master_seed through named streams.
struct ExperimentConfig {
  MixtureSpec data_spec;
  long train_n = 50000;
  long test_n = 2000;

  std::vector<int> hidden = {32, 32};
  Activation activation = Activation::relu;

  TrainConfig train_cfg;

  AttackConfig attack_base;           // steps / start / box; epsilon set per use
  std::vector<double> epsilon_sweep;  // ascending, warm-started
  double eval_epsilon = 0.0;          // single-budget commands
  AttackGoal goal = AttackGoal::prediction;

  int buckets = 15;

  VectorXd osr_offset;
  double ood_scale = 10.0;
  long n_out = 800;

  std::uint64_t master_seed = 1;
  std::string out_dir = "out";
  std::uint64_t config_hash = 0;

  static ExperimentConfig from_file(const std::string& path) {
    return from_raw(RawConfig::load(path));
  }

  static ExperimentConfig from_raw(const RawConfig& raw) {
    ExperimentConfig cfg;
    cfg.config_hash = fnv1a64(raw.text);

    // [data]
    cfg.data_spec.feature_dim = static_cast<int>(raw.get_long("data.feature_dim"));
    for (const std::string& line : raw.get_all("data.component")) {
      std::vector<double> v = RawConfig::split_list(line, "data.component");
      if (static_cast<int>(v.size()) != cfg.data_spec.feature_dim + 3)
        throw ConfigError("data.component needs label, " +
                          std::to_string(cfg.data_spec.feature_dim) +
                          " mean values, sigma, weight");
      MixtureComponent comp;
      comp.label = static_cast<int>(v[0]);
      if (comp.label < 0 || v[0] != comp.label)
        throw ConfigError("data.component label must be a nonnegative integer");
      comp.mean.resize(cfg.data_spec.feature_dim);
      for (int j = 0; j < cfg.data_spec.feature_dim; ++j) comp.mean(j) = v[1 + j];
      comp.sigma = v[cfg.data_spec.feature_dim + 1];
      comp.weight = v[cfg.data_spec.feature_dim + 2];
      if (!(comp.sigma > 0.0)) throw ConfigError("data.component sigma must be > 0");
      cfg.data_spec.components.push_back(std::move(comp));
    }
    cfg.data_spec.validate();
    cfg.train_n = raw.get_long_or("data.train_n", 50000);
    cfg.test_n = raw.get_long_or("data.test_n", 2000);
    if (cfg.train_n < 1 || cfg.test_n < 1)
      throw ConfigError("data.train_n and data.test_n must be >= 1");

    // [model]
    cfg.hidden.clear();
    for (double h : RawConfig::split_list(raw.get_or("model.hidden", "32, 32"), "model.hidden")) {
      if (h < 1 || h != std::floor(h)) throw ConfigError("model.hidden must be positive integers");
      cfg.hidden.push_back(static_cast<int>(h));
    }
    cfg.activation = activation_from_name(raw.get_or("model.activation", "relu"));

    // [train]
    cfg.train_cfg.epochs = static_cast<int>(raw.get_long_or("train.epochs", 200));
    cfg.train_cfg.batch_size = static_cast<int>(raw.get_long_or("train.batch_size", 128));
    cfg.train_cfg.learning_rate = raw.get_double_or("train.learning_rate", 0.05);
    cfg.train_cfg.momentum = raw.get_double_or("train.momentum", 0.9);
    std::string mode = raw.get_or("train.mode", "standard");
    if (mode == "standard") {
      cfg.train_cfg.mode = TrainMode::standard;
    } else if (mode == "adversarial") {
      cfg.train_cfg.mode = TrainMode::adversarial;
    } else {
      throw ConfigError("train.mode must be standard or adversarial");
    }
    if (cfg.train_cfg.mode == TrainMode::adversarial) {
      AttackConfig inner;
      inner.epsilon = raw.get_double("train.inner_epsilon");
      inner.steps = static_cast<int>(raw.get_long_or("train.inner_steps", 10));
      inner.random_start = false;
      cfg.train_cfg.inner_attack = inner;
    }

    // [attack]
    cfg.attack_base.steps = static_cast<int>(raw.get_long_or("attack.steps", 150));
    cfg.attack_base.random_start = raw.get_bool_or("attack.random_start", false);
    cfg.attack_base.keep_best = raw.get_bool_or("attack.keep_best", true);
    if (raw.has("attack.box_lo") != raw.has("attack.box_hi"))
      throw ConfigError("attack.box_lo and attack.box_hi must be given together");
    if (raw.has("attack.box_lo"))
      cfg.attack_base.box =
          std::make_pair(raw.get_double("attack.box_lo"), raw.get_double("attack.box_hi"));
    cfg.epsilon_sweep = raw.get_list("attack.epsilon_sweep");
    for (std::size_t i = 0; i < cfg.epsilon_sweep.size(); ++i) {
      if (cfg.epsilon_sweep[i] < 0.0)
        throw ConfigError("attack.epsilon_sweep values must be >= 0");
      if (i > 0 && !(cfg.epsilon_sweep[i] > cfg.epsilon_sweep[i - 1]))
        throw ConfigError("attack.epsilon_sweep must be strictly ascending");
    }
    cfg.eval_epsilon = raw.get_double_or("attack.epsilon", cfg.epsilon_sweep.back());
    if (cfg.eval_epsilon < 0.0) throw ConfigError("attack.epsilon must be >= 0");
    cfg.goal = attack_goal_from_name(raw.get_or("attack.goal", "prediction"));

    // [metrics]
    cfg.buckets = static_cast<int>(raw.get_long_or("metrics.buckets", 15));
    if (cfg.buckets < 1) throw ConfigError("metrics.buckets must be >= 1");

    // [outliers]
    if (raw.has("outliers.osr_offset")) {
      std::vector<double> off = raw.get_list("outliers.osr_offset");
      if (static_cast<int>(off.size()) != cfg.data_spec.feature_dim)
        throw ConfigError("outliers.osr_offset must have feature_dim entries");
      cfg.osr_offset.resize(cfg.data_spec.feature_dim);
      for (int j = 0; j < cfg.data_spec.feature_dim; ++j) cfg.osr_offset(j) = off[j];
    } else {
      cfg.osr_offset = VectorXd::Zero(cfg.data_spec.feature_dim);
    }
    cfg.ood_scale = raw.get_double_or("outliers.ood_scale", 10.0);
    cfg.n_out = raw.get_long_or("outliers.n_out", 800);
    if (cfg.n_out < 1) throw ConfigError("outliers.n_out must be >= 1");

    // [experiment]
    long seed = raw.get_long_or("experiment.master_seed", 1);
    if (seed < 0) throw ConfigError("experiment.master_seed must be >= 0");
    cfg.master_seed = static_cast<std::uint64_t>(seed);
    cfg.out_dir = raw.get_or("experiment.out_dir", "out");

    cfg.train_cfg.seed = derive_seed(cfg.master_seed, "train");
    cfg.train_cfg.validate();
    cfg.attack_base.validate();
    return cfg;
  }

  AttackConfig attack_at(double epsilon, std::string_view stream) const {
    AttackConfig a = attack_base;
    a.epsilon = epsilon;
    a.seed = derive_seed(master_seed, stream);
    return a;
  }

  ModelParams initial_model() const {
    return make_mlp(data_spec.feature_dim, hidden, data_spec.num_classes(), activation,
                    derive_seed(master_seed, "model.init"));
  }
};

}  // namespace uncspan
