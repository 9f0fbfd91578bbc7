#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "uncspan/checkpoint.hpp"
#include "uncspan/config.hpp"
#include "uncspan/json17.hpp"
#include "uncspan/metrics.hpp"
#include "uncspan/theory.hpp"
#include "uncspan/train.hpp"

namespace uncspan {

namespace fs = std::filesystem;

/// One experiment run: a parsed config, its output directory, and the
/// worker budget. Every command is a pure function of (config, input
/// files), so reruns produce byte-identical artifacts at any thread count.
struct Pipeline {
  ExperimentConfig cfg;
  fs::path out;
  int threads = 1;

  fs::path file(const std::string& name) const { return out / name; }

  fs::path require(const std::string& name, const std::string& producer) const {
    fs::path p = file(name);
    if (!fs::exists(p))
      throw IoError("missing input file '" + p.string() + "' (run '" + producer + "' first)");
    return p;
  }
};

inline Pipeline make_pipeline(const ExperimentConfig& cfg, const std::string& out_override = "",
                              int threads = 1) {
  Pipeline p;
  p.cfg = cfg;
  p.out = out_override.empty() ? fs::path(cfg.out_dir) : fs::path(out_override);
  p.threads = threads < 1 ? 1 : threads;
  return p;
}

namespace detail {

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Short decimal form for file names; exact values live in the JSON
// summaries.
inline std::string eps_tag(double eps) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", eps);
  return buf;
}

inline nlohmann::json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Population standard deviation.
inline double std_of(const std::vector<double>& v) {
  double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline std::vector<double> entropies_of(const ModelParams& params, const MatrixXd& features) {
  MatrixXd probs = predict_probs(params, features);
  std::vector<double> h(static_cast<std::size_t>(probs.rows()));
  for (long i = 0; i < probs.rows(); ++i) h[i] = entropy(probs.row(i).transpose());
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

inline void cmd_generate(const Pipeline& p) {
  fs::create_directories(p.out);
  const ExperimentConfig& cfg = p.cfg;

  const std::uint64_t train_seed = derive_seed(cfg.master_seed, "data.train");
  const std::uint64_t test_seed = derive_seed(cfg.master_seed, "data.test");
  const std::uint64_t outlier_seed = derive_seed(cfg.master_seed, "data.outliers");

  LabeledDataset train_ds = sample(cfg.data_spec, cfg.train_n, train_seed);
  LabeledDataset test_ds = sample(cfg.data_spec, cfg.test_n, test_seed);
  auto [osr, ood] =
      make_osr_and_ood_sets(cfg.data_spec, cfg.osr_offset, cfg.ood_scale, cfg.n_out, outlier_seed);

  save_csv(train_ds, p.file("train.csv").string());
  save_csv(test_ds, p.file("test.csv").string());
  save_csv(osr, p.file("osr.csv").string());
  save_csv(ood, p.file("ood.csv").string());

  nlohmann::json manifest;
  manifest["format"] = "uncspan-manifest-v1";
  manifest["config_hash"] = detail::hex64(cfg.config_hash);
  manifest["master_seed"] = detail::hex64(cfg.master_seed);
  manifest["seeds"] = {{"train_data", detail::hex64(train_seed)},
                       {"test_data", detail::hex64(test_seed)},
                       {"outlier_data", detail::hex64(outlier_seed)},
                       {"model_init", detail::hex64(derive_seed(cfg.master_seed, "model.init"))},
                       {"train", detail::hex64(derive_seed(cfg.master_seed, "train"))}};
  manifest["files"] = {"train.csv", "test.csv", "osr.csv", "ood.csv"};
  manifest["feature_dim"] = cfg.data_spec.feature_dim;
  manifest["classes"] = cfg.data_spec.num_classes();
  manifest["counts"] = {{"train_n", cfg.train_n}, {"test_n", cfg.test_n}, {"n_out", cfg.n_out}};
  detail::write_text(p.file("manifest.json"), dump_json17(manifest));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline void cmd_train(const Pipeline& p) {
  fs::create_directories(p.out);
  LabeledDataset train_ds = load_csv(p.require("train.csv", "generate").string());
  TrainResult res = train(p.cfg.initial_model(), train_ds, p.cfg.train_cfg);
  save_model(res.params, p.file("model.txt").string());

  std::ofstream log = detail::open_out(p.file("train_log.csv"));
  log << "epoch,mean_loss,clean_acc\n";
  for (std::size_t e = 0; e < res.log.size(); ++e)
    log << e << ',' << fmt17(res.log[e].mean_loss) << ',' << fmt17(res.log[e].clean_acc) << "\n";
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

inline AdapterFactory adapter_factory_for(AttackGoal goal) {
  switch (goal) {
    case AttackGoal::prediction:
      return [](const ModelParams&, const VectorXd&, int label, int) {
        return adapter_prediction(label);
      };
    case AttackGoal::overconfidence:
      return [](const ModelParams& m, const VectorXd& x, int, int) {
        return adapter_overconfidence(m, x);
      };
    case AttackGoal::underconfidence:
      return [](const ModelParams& m, const VectorXd&, int, int) {
        return adapter_underconfidence(m.num_classes());
      };
    case AttackGoal::msp_selective:
      return [](const ModelParams& m, const VectorXd& x, int label, int) {
        bool correct = argmax_class(forward(m, x)) == label;
        return adapter_msp_selective(m, x, correct);
      };
  }
  throw ConfigError("unknown attack goal");
}

inline void cmd_attack(const Pipeline& p) {
  fs::create_directories(p.out);
  ModelParams params = load_model(p.require("model.txt", "train").string());
  LabeledDataset test_ds = load_csv(p.require("test.csv", "generate").string());

  AdapterFactory factory = adapter_factory_for(p.cfg.goal);
  AttackConfig atk = p.cfg.attack_at(p.cfg.eval_epsilon, "attack.attack");
  DatasetAttackResult res = attack_dataset(params, test_ds, factory, atk, p.threads);

  MatrixXd clean_probs = predict_probs(params, test_ds.features);
  MatrixXd adv_probs = predict_probs(params, res.perturbed.features);

  std::ofstream out = detail::open_out(p.file("attack.csv"));
  out << "row_id,label,pred_clean,pred_adv,clean_loss,adv_loss,linf_delta,flag\n";
  for (long i = 0; i < test_ds.size(); ++i) {
    const AttackOutcome& o = res.records[i].outcome;
    LossAdapter adapter =
        factory(params, test_ds.features.row(i).transpose(), test_ds.labels(i),
                test_ds.row_ids(i));
    double clean_loss = detail::adapter_loss_probs(adapter, clean_probs.row(i).transpose());
    out << test_ds.row_ids(i) << ',' << test_ds.labels(i) << ','
        << argmax_class(clean_probs.row(i).transpose()) << ','
        << argmax_class(adv_probs.row(i).transpose()) << ',' << fmt17(clean_loss) << ','
        << fmt17(o.achieved_loss) << ',' << fmt17(linf_norm(o.delta)) << ','
        << (o.failed ? 1 : 0) << "\n";
  }
  save_csv(res.perturbed, p.file("adv_test.csv").string());
}

// ---------------------------------------------------------------------------
// span
// ---------------------------------------------------------------------------

inline void cmd_span(const Pipeline& p) {
  fs::create_directories(p.out);
  ModelParams params = load_model(p.require("model.txt", "train").string());
  LabeledDataset test_ds = load_csv(p.require("test.csv", "generate").string());

  AttackConfig base = p.cfg.attack_at(0.0, "attack.span");
  auto per_eps = span_sweep(params, test_ds, base, p.cfg.epsilon_sweep, p.threads);

  nlohmann::json summary;
  summary["format"] = "uncspan-span-summary-v1";
  summary["epsilons"] = p.cfg.epsilon_sweep;
  summary["n"] = test_ds.size();
  summary["per_epsilon"] = nlohmann::json::array();
  for (std::size_t e = 0; e < p.cfg.epsilon_sweep.size(); ++e) {
    const std::string name = "span_eps" + detail::eps_tag(p.cfg.epsilon_sweep[e]) + ".csv";
    std::ofstream out = detail::open_out(p.file(name));
    out << "row_id,clean_entropy,u_low,u_high\n";
    std::vector<double> widths, sq_widths;
    widths.reserve(per_eps[e].size());
    for (const SpanRecord& r : per_eps[e]) {
      out << r.row_id << ',' << fmt17(r.clean_entropy) << ',' << fmt17(r.u_low) << ','
          << fmt17(r.u_high) << "\n";
      widths.push_back(r.width());
      sq_widths.push_back(r.width() * r.width());
    }
    nlohmann::json row;
    row["epsilon"] = p.cfg.epsilon_sweep[e];
    row["file"] = name;
    row["mus"] = mus(per_eps[e]);
    row["msus"] = msus(per_eps[e]);
    row["mus_std"] = detail::std_of(widths);
    row["msus_std"] = detail::std_of(sq_widths);
    summary["per_epsilon"].push_back(row);
  }
  detail::write_text(p.file("span_summary.json"), dump_json17(summary));
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

namespace detail {

inline void write_reliability(const fs::path& path, const CalibrationBins& bins) {
  std::ofstream out = open_out(path);
  out << "bucket,lo,hi,mass,expected,observed\n";
  for (int s = 0; s < bins.buckets; ++s) {
    out << s << ',' << fmt17(static_cast<double>(s) / bins.buckets) << ','
        << fmt17(static_cast<double>(s + 1) / bins.buckets) << ',' << bins.mass[s] << ','
        << fmt17(bins.expected(s)) << ',' << fmt17(bins.observed(s)) << "\n";
  }
}

inline nlohmann::json calibration_entry(const ModelParams& params, const MatrixXd& features,
                                        const VectorXi& labels, int buckets,
                                        const fs::path& reliability_path) {
  MatrixXd probs = predict_probs(params, features);
  std::vector<double> conf(static_cast<std::size_t>(probs.rows()));
  std::vector<char> correct(static_cast<std::size_t>(probs.rows()));
  double acc = 0.0, mean_conf = 0.0;
  for (long i = 0; i < probs.rows(); ++i) {
    int pred = argmax_class(probs.row(i).transpose());
    conf[i] = probs.row(i).maxCoeff();
    correct[i] = pred == labels(i);
    acc += correct[i];
    mean_conf += conf[i];
  }
  acc /= static_cast<double>(probs.rows());
  mean_conf /= static_cast<double>(probs.rows());

  CalibrationBins bins = calibration_bins(conf, correct, buckets);
  write_reliability(reliability_path, bins);
  nlohmann::json entry;
  entry["ece"] = ece(bins);
  entry["s_ece"] = signed_ece(bins);
  entry["accuracy"] = acc;
  entry["mean_confidence"] = mean_conf;
  return entry;
}

}  // namespace detail

inline void cmd_calibrate(const Pipeline& p) {
  fs::create_directories(p.out);
  ModelParams params = load_model(p.require("model.txt", "train").string());
  LabeledDataset test_ds = load_csv(p.require("test.csv", "generate").string());
  const double eps = p.cfg.eval_epsilon;

  AttackConfig over_cfg = p.cfg.attack_at(eps, "attack.calibrate.over");
  AttackConfig under_cfg = p.cfg.attack_at(eps, "attack.calibrate.under");
  DatasetAttackResult over = attack_dataset(
      params, test_ds, adapter_factory_for(AttackGoal::overconfidence), over_cfg, p.threads);
  DatasetAttackResult under = attack_dataset(
      params, test_ds, adapter_factory_for(AttackGoal::underconfidence), under_cfg, p.threads);

  nlohmann::json summary;
  summary["format"] = "uncspan-calibration-summary-v1";
  summary["epsilon"] = eps;
  summary["buckets"] = p.cfg.buckets;
  summary["clean"] = detail::calibration_entry(params, test_ds.features, test_ds.labels,
                                               p.cfg.buckets, p.file("reliability_clean.csv"));
  summary["over"] =
      detail::calibration_entry(params, over.perturbed.features, test_ds.labels, p.cfg.buckets,
                                p.file("reliability_over.csv"));
  summary["under"] =
      detail::calibration_entry(params, under.perturbed.features, test_ds.labels, p.cfg.buckets,
                                p.file("reliability_under.csv"));
  detail::write_text(p.file("calibration_summary.json"), dump_json17(summary));
}

// ---------------------------------------------------------------------------
// ood-eval
// ---------------------------------------------------------------------------

inline void cmd_ood_eval(const Pipeline& p) {
  fs::create_directories(p.out);
  ModelParams params = load_model(p.require("model.txt", "train").string());
  LabeledDataset test_ds = load_csv(p.require("test.csv", "generate").string());
  const std::string model_name = "model";

  std::vector<double> scores_in = detail::entropies_of(params, test_ds.features);

  std::ofstream out = detail::open_out(p.file("detection.csv"));
  out << "model,scenario,epsilon,auroc,aupr_in,aupr_out,fpr95tpr\n";

  for (const std::string scenario : {"osr", "ood"}) {
    LabeledDataset outliers = load_csv(p.require(scenario + ".csv", "generate").string());
    // Camouflage: over-confidence attack on the outlier rows only, warm
    // started across the budget sweep; candidates ranked by entropy so the
    // outlier scores are pointwise non-increasing in epsilon.
    AttackConfig base = p.cfg.attack_at(0.0, "attack.ood." + scenario);
    auto sweep = attack_sweep(params, outliers, adapter_factory_for(AttackGoal::overconfidence),
                              base, p.cfg.epsilon_sweep, p.threads,
                              detail::entropy_score(+1.0));
    for (std::size_t e = 0; e < p.cfg.epsilon_sweep.size(); ++e) {
      std::vector<double> scores_out =
          detail::entropies_of(params, sweep[e].perturbed.features);
      DetectionMetrics m = detection_metrics(scores_in, scores_out);
      out << model_name << ',' << scenario << ',' << fmt17(p.cfg.epsilon_sweep[e]) << ','
          << fmt17(m.auroc) << ',' << fmt17(m.aupr_in) << ',' << fmt17(m.aupr_out) << ','
          << fmt17(m.fpr_at_95_tpr) << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// verify-theory
// ---------------------------------------------------------------------------

/// Returns true when every tolerance holds (exit code 4 otherwise).
inline bool cmd_verify_theory(const Pipeline& p) {
  fs::create_directories(p.out);
  std::vector<double> zs, betas;
  for (int i = 0; i < 50; ++i) zs.push_back(0.01 + 0.02 * i);
  for (int i = 0; i < 20; ++i) betas.push_back(0.025 * i);
  const long grid_n = 1000000;

  std::vector<EquilibriumPoint> pts = equilibrium_lattice(zs, betas, grid_n, p.threads);

  std::ofstream lat = detail::open_out(p.file("theory_lattice.csv"));
  lat << "z,beta,alpha_closed,alpha_oracle,entropy_std,entropy_robust,gap\n";
  double max_scaled_dev = 0.0;  // |closed - oracle| relative to its bound
  double min_gap = std::numeric_limits<double>::infinity();
  bool strict_ok = true;
  for (const auto& pt : pts) {
    lat << fmt17(pt.z) << ',' << fmt17(pt.beta) << ',' << fmt17(pt.alpha_closed) << ','
        << fmt17(pt.alpha_oracle) << ',' << fmt17(pt.entropy_standard) << ','
        << fmt17(pt.entropy_robust) << ',' << fmt17(pt.gap()) << "\n";
    const double bound = 2.0 * (1.0 - 2.0 * pt.beta) / static_cast<double>(grid_n);
    max_scaled_dev = std::max(max_scaled_dev, std::abs(pt.alpha_closed - pt.alpha_oracle) / bound);
    min_gap = std::min(min_gap, pt.gap());
    if (pt.beta > 0.0 && std::abs(pt.z - 0.5) > 1e-12 && !(pt.gap() > 0.0)) strict_ok = false;
  }
  const bool oracle_ok = max_scaled_dev <= 1.0;
  const bool gap_ok = min_gap >= -1e-12;

  nlohmann::json summary;
  summary["format"] = "uncspan-theory-summary-v1";
  summary["lattice"] = {{"grid_n", grid_n},
                        {"points", pts.size()},
                        {"max_dev_over_bound", max_scaled_dev},
                        {"closed_form_matches_oracle", oracle_ok},
                        {"min_entropy_gap", min_gap},
                        {"gap_nonnegative", gap_ok},
                        {"gap_strictly_positive_off_center", strict_ok}};

  bool pass = oracle_ok && gap_ok && strict_ok;

  if (fs::exists(p.file("model.txt"))) {
    ModelParams params = load_model(p.file("model.txt").string());
    ProbeGrid grid = make_probe_grid(p.cfg.data_spec, 2001);
    TrainMode mode = p.cfg.train_cfg.mode;

    double beta_raw = 0.0, beta_used = 0.0;
    if (mode == TrainMode::adversarial) {
      AttackConfig atk = *p.cfg.train_cfg.inner_attack;
      atk.seed = derive_seed(p.cfg.master_seed, "attack.beta");
      beta_raw = estimate_beta_mean(params, grid.features, atk, p.threads);
      beta_used = std::min(beta_raw, 0.499);
    }
    ConvergenceReport rep = convergence_check(params, p.cfg.data_spec, grid, mode, beta_used);

    const std::string name =
        mode == TrainMode::standard ? "convergence_standard.csv" : "convergence_adversarial.csv";
    std::ofstream conv = detail::open_out(p.file(name));
    conv << "x,z,alpha_model,target,abs_dev\n";
    for (const auto& row : rep.rows)
      conv << fmt17(row.t) << ',' << fmt17(row.z) << ',' << fmt17(row.alpha_model) << ','
           << fmt17(row.target) << ',' << fmt17(row.abs_dev) << "\n";

    nlohmann::json convergence;
    convergence["mode"] = mode == TrainMode::standard ? "standard" : "adversarial";
    convergence["file"] = name;
    convergence["mean_abs_dev"] = rep.mean_abs_dev;
    convergence["max_abs_dev"] = rep.max_abs_dev;
    if (mode == TrainMode::standard) {
      // Population-optimum tolerance for a converged standard model.
      bool conv_ok = rep.mean_abs_dev <= 0.05;
      convergence["tolerance"] = 0.05;
      convergence["within_tolerance"] = conv_ok;
      pass = pass && conv_ok;
    } else {
      convergence["beta_estimate"] = beta_raw;
      convergence["beta_used"] = beta_used;
    }
    summary["convergence"] = convergence;
  }

  summary["pass"] = pass;
  detail::write_text(p.file("theory_summary.json"), dump_json17(summary));
  return pass;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline void cmd_report(const Pipeline& p) {
  const std::vector<std::string> required = {"manifest.json",      "train_log.csv",
                                             "span_summary.json",  "calibration_summary.json",
                                             "detection.csv",      "theory_summary.json"};
  std::string missing;
  for (const std::string& name : required)
    if (!fs::exists(p.file(name))) missing += missing.empty() ? name : (", " + name);
  if (!missing.empty()) throw IoError("report: missing inputs: " + missing);

  nlohmann::json report;
  report["format"] = "uncspan-report-v1";
  report["config_hash"] = detail::hex64(p.cfg.config_hash);
  report["manifest"] = detail::load_json(p.file("manifest.json"));
  report["span"] = detail::load_json(p.file("span_summary.json"));
  report["calibration"] = detail::load_json(p.file("calibration_summary.json"));
  report["theory"] = detail::load_json(p.file("theory_summary.json"));

  // Training log tail.
  {
    std::ifstream log(p.file("train_log.csv"));
    std::string line, last;
    std::getline(log, line);  // header
    long rows = 0;
    while (std::getline(log, line)) {
      if (line.empty()) continue;
      last = line;
      ++rows;
    }
    nlohmann::json training;
    training["epochs"] = rows;
    if (rows > 0) {
      std::istringstream cells(last);
      std::string epoch, loss, acc;
      std::getline(cells, epoch, ',');
      std::getline(cells, loss, ',');
      std::getline(cells, acc, ',');
      training["final_mean_loss"] = parse_double(loss, "mean_loss", rows);
      training["final_clean_acc"] = parse_double(acc, "clean_acc", rows);
    }
    report["training"] = training;
  }

  // Detection rows.
  {
    std::ifstream det(p.file("detection.csv"));
    std::string line;
    std::getline(det, line);  // header
    nlohmann::json rows = nlohmann::json::array();
    long line_no = 1;
    while (std::getline(det, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream cells(line);
      std::string model, scenario, eps, auroc, aupr_in, aupr_out, fpr;
      std::getline(cells, model, ',');
      std::getline(cells, scenario, ',');
      std::getline(cells, eps, ',');
      std::getline(cells, auroc, ',');
      std::getline(cells, aupr_in, ',');
      std::getline(cells, aupr_out, ',');
      std::getline(cells, fpr, ',');
      nlohmann::json row;
      row["model"] = model;
      row["scenario"] = scenario;
      row["epsilon"] = parse_double(eps, "epsilon", line_no);
      row["auroc"] = parse_double(auroc, "auroc", line_no);
      row["aupr_in"] = parse_double(aupr_in, "aupr_in", line_no);
      row["aupr_out"] = parse_double(aupr_out, "aupr_out", line_no);
      row["fpr95tpr"] = parse_double(fpr, "fpr95tpr", line_no);
      rows.push_back(row);
    }
    report["detection"] = rows;
  }

  detail::write_text(p.file("report.json"), dump_json17(report));
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Runs one subcommand; returns the process exit code.
/// 0 success, 2 missing/invalid input, 3 numerical failure, 4 tolerance
/// failure in verify-theory.
inline int run_command(const std::string& name, const Pipeline& p) {
  try {
    if (name == "generate") {
      cmd_generate(p);
    } else if (name == "train") {
      cmd_train(p);
    } else if (name == "attack") {
      cmd_attack(p);
    } else if (name == "span") {
      cmd_span(p);
    } else if (name == "calibrate") {
      cmd_calibrate(p);
    } else if (name == "ood-eval") {
      cmd_ood_eval(p);
    } else if (name == "verify-theory") {
      if (!cmd_verify_theory(p)) return 4;
    } else if (name == "report") {
      cmd_report(p);
    } else {
      throw ConfigError("unknown command '" + name + "'");
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

}  // namespace uncspan
