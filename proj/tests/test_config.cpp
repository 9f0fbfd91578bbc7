#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "uncspan/config.hpp"

using namespace uncspan;

namespace {

RawConfig parse_text(const std::string& text) {
  std::istringstream in(text);
  return RawConfig::parse(in, text);
}

const char* kBaseConfig = R"(
# synthetic two-blob experiment
[data]
feature_dim = 2
component = 0, -1, 0, 1, 0.5
component = 1, 1, 0, 1, 0.5   # class 1
train_n = 500
test_n = 100

[model]
hidden = 16, 8
activation = tanh

[train]
mode = adversarial
epochs = 4
batch_size = 32
learning_rate = 0.1
momentum = 0.8
inner_epsilon = 0.25
inner_steps = 10

[attack]
epsilon_sweep = 0, 0.1, 0.25
epsilon = 0.25
steps = 20
random_start = true
goal = overconfidence

[metrics]
buckets = 12

[outliers]
osr_offset = 0, 3
ood_scale = 8
n_out = 50

[experiment]
master_seed = 7
out_dir = scratch
)";

}  // namespace

TEST_CASE("config: full round trip of a valid file") {
  ExperimentConfig cfg = ExperimentConfig::from_raw(parse_text(kBaseConfig));
  REQUIRE(cfg.data_spec.feature_dim == 2);
  REQUIRE(cfg.data_spec.components.size() == 2);
  REQUIRE(cfg.data_spec.components[1].mean(0) == 1.0);
  REQUIRE(cfg.train_n == 500);
  REQUIRE(cfg.hidden == std::vector<int>{16, 8});
  REQUIRE(cfg.activation == Activation::tanh);
  REQUIRE(cfg.train_cfg.mode == TrainMode::adversarial);
  REQUIRE(cfg.train_cfg.inner_attack->epsilon == 0.25);
  REQUIRE(cfg.train_cfg.inner_attack->steps == 10);
  REQUIRE(cfg.epsilon_sweep == std::vector<double>{0.0, 0.1, 0.25});
  REQUIRE(cfg.eval_epsilon == 0.25);
  REQUIRE(cfg.attack_base.steps == 20);
  REQUIRE(cfg.attack_base.random_start);
  REQUIRE(cfg.goal == AttackGoal::overconfidence);
  REQUIRE(cfg.buckets == 12);
  REQUIRE(cfg.osr_offset(1) == 3.0);
  REQUIRE(cfg.ood_scale == 8.0);
  REQUIRE(cfg.master_seed == 7);
  REQUIRE(cfg.out_dir == "scratch");
  REQUIRE(cfg.initial_model().num_classes() == 2);
}

TEST_CASE("config: defaults fill optional keys") {
  const char* minimal = R"(
[data]
feature_dim = 1
component = 0, -1, 1, 0.5
component = 1, 1, 1, 0.5

[attack]
epsilon_sweep = 0, 0.25
)";
  ExperimentConfig cfg = ExperimentConfig::from_raw(parse_text(minimal));
  REQUIRE(cfg.train_cfg.epochs == 200);
  REQUIRE(cfg.train_cfg.batch_size == 128);
  REQUIRE(cfg.hidden == std::vector<int>{32, 32});
  REQUIRE(cfg.buckets == 15);
  REQUIRE(cfg.eval_epsilon == 0.25);  // max of the sweep
  REQUIRE(cfg.goal == AttackGoal::prediction);
}

TEST_CASE("config: errors name the offending field") {
  std::string bad_sigma = kBaseConfig;
  bad_sigma.replace(bad_sigma.find("component = 0, -1, 0, 1, 0.5"),
                    std::string("component = 0, -1, 0, 1, 0.5").size(),
                    "component = 0, -1, 0, -1, 0.5");
  REQUIRE_THROWS_WITH(ExperimentConfig::from_raw(parse_text(bad_sigma)),
                      Catch::Matchers::ContainsSubstring("sigma"));

  std::string bad_sweep = kBaseConfig;
  bad_sweep.replace(bad_sweep.find("epsilon_sweep = 0, 0.1, 0.25"),
                    std::string("epsilon_sweep = 0, 0.1, 0.25").size(),
                    "epsilon_sweep = 0.25, 0.1");
  REQUIRE_THROWS_WITH(ExperimentConfig::from_raw(parse_text(bad_sweep)),
                      Catch::Matchers::ContainsSubstring("ascending"));

  std::string bad_mode = kBaseConfig;
  bad_mode.replace(bad_mode.find("mode = adversarial"), std::string("mode = adversarial").size(),
                   "mode = turbo");
  REQUIRE_THROWS_WITH(ExperimentConfig::from_raw(parse_text(bad_mode)),
                      Catch::Matchers::ContainsSubstring("train.mode"));

  REQUIRE_THROWS_WITH(ExperimentConfig::from_raw(parse_text("[data]\nfeature_dim = 2\n")),
                      Catch::Matchers::ContainsSubstring("data.component"));
}

TEST_CASE("config: adversarial mode requires inner_epsilon") {
  std::string no_eps = kBaseConfig;
  no_eps.replace(no_eps.find("inner_epsilon = 0.25"), std::string("inner_epsilon = 0.25").size(),
                 "");
  REQUIRE_THROWS_WITH(ExperimentConfig::from_raw(parse_text(no_eps)),
                      Catch::Matchers::ContainsSubstring("inner_epsilon"));
}

TEST_CASE("config: parse errors carry line numbers") {
  REQUIRE_THROWS_AS(parse_text("[data\n"), ParseError);
  REQUIRE_THROWS_AS(parse_text("[data]\njust a line\n"), ParseError);
  REQUIRE_THROWS_AS(parse_text("key = before any section\n"), ParseError);
}

TEST_CASE("config: box bounds must come together") {
  std::string half_box = kBaseConfig;
  half_box.replace(half_box.find("steps = 20"), std::string("steps = 20").size(),
                   "steps = 20\nbox_lo = 0");
  REQUIRE_THROWS_WITH(ExperimentConfig::from_raw(parse_text(half_box)),
                      Catch::Matchers::ContainsSubstring("box"));
}

TEST_CASE("config: seed derivation is stable and stream-separated") {
  std::uint64_t a = derive_seed(1, "data.train");
  std::uint64_t b = derive_seed(1, "data.test");
  std::uint64_t c = derive_seed(2, "data.train");
  REQUIRE(a != b);
  REQUIRE(a != c);
  REQUIRE(a == derive_seed(1, "data.train"));
}
