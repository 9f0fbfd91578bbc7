#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "uncspan/attack.hpp"
#include "uncspan/metrics.hpp"

using namespace uncspan;

namespace {

AttackConfig cfg_with(double eps, int steps = 20) {
  AttackConfig cfg;
  cfg.epsilon = eps;
  cfg.steps = steps;
  return cfg;
}

LabeledDataset random_dataset(std::mt19937_64& eng, long n, int d, int c) {
  LabeledDataset ds;
  ds.features.resize(n, d);
  ds.labels.resize(n);
  for (long i = 0; i < n; ++i) {
    ds.features.row(i) = oracles::random_vector(eng, d).transpose();
    ds.labels(i) = static_cast<int>(eng() % c);
  }
  ds.row_ids = iota_ids(n);
  ds.num_classes = c;
  return ds;
}

}  // namespace

TEST_CASE("attack config: step size bound and box sanity") {
  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.step_size = 0.3;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.step_size = 0.0;
  cfg.validate();
  REQUIRE(cfg.effective_step() == Catch::Approx(2.5 * 0.1 / 150).margin(1e-15));
  cfg.steps = 1;
  REQUIRE(cfg.effective_step() == Catch::Approx(0.2).margin(1e-15));  // capped at 2*eps
}

TEST_CASE("pgd: epsilon 0 returns the clean point") {
  std::mt19937_64 eng(3);
  ModelParams m = oracles::random_model(eng, 3, 2, Activation::relu);
  VectorXd x = oracles::random_vector(eng, 3);
  LossAdapter a = cross_entropy_to_class(1);
  AttackOutcome out = pgd(m, x, a, cfg_with(0.0));
  REQUIRE(out.delta.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(out.achieved_loss == loss_value(m, x, a));
  REQUIRE(out.evaluations == 1);
}

TEST_CASE("pgd: linear model reaches the closed-form worst case") {
  std::mt19937_64 eng(5);
  for (int trial = 0; trial < 10; ++trial) {
    ModelParams m;
    Layer l;
    l.weight.resize(2, 3);
    for (int r = 0; r < 2; ++r) l.weight.row(r) = oracles::random_vector(eng, 3).transpose();
    l.bias = oracles::random_vector(eng, 2);
    m.layers.push_back(l);
    VectorXd x = oracles::random_vector(eng, 3);
    const double eps = 0.2;

    // Ascent on the class-0 cross entropy: the optimum saturates the box
    // corner that maximizes the logit gap z1 - z0.
    VectorXd dw = (m.layers[0].weight.row(1) - m.layers[0].weight.row(0)).transpose();
    if (dw.cwiseAbs().minCoeff() < 1e-3) continue;  // keep the corner unique
    VectorXd delta_star = eps * dw.array().sign().matrix();
    double want = loss_value(m, x + delta_star, adapter_prediction(0));

    AttackOutcome out = pgd(m, x, adapter_prediction(0), cfg_with(eps, 3));
    REQUIRE(out.achieved_loss == Catch::Approx(want).margin(1e-9));
    REQUIRE(linf_norm(out.delta) <= eps + 1e-12);
  }
}

TEST_CASE("pgd: keep_best never loses to the clean point") {
  std::mt19937_64 eng(7);
  for (int trial = 0; trial < 40; ++trial) {
    ModelParams m = oracles::random_model(eng, 3, 3, Activation::relu);
    VectorXd x = oracles::random_vector(eng, 3);
    LossAdapter a = oracles::random_adapter(eng, 3);
    AttackConfig cfg = cfg_with(0.15, 10);
    cfg.random_start = (trial % 2) == 1;
    cfg.seed = trial;
    AttackOutcome out = pgd(m, x, a, cfg);
    REQUIRE(out.achieved_loss <= loss_value(m, x, a));
    REQUIRE(linf_norm(out.delta) <= cfg.epsilon + 1e-12);
    // achieved_loss is the minimum of the evaluated candidates.
    double min_trace = *std::min_element(out.loss_trace.begin(), out.loss_trace.end());
    REQUIRE(out.achieved_loss == min_trace);
  }
}

TEST_CASE("pgd: best-so-far trace is non-increasing") {
  std::mt19937_64 eng(9);
  ModelParams m = oracles::random_model(eng, 2, 2, Activation::tanh);
  VectorXd x = oracles::random_vector(eng, 2);
  AttackOutcome out = pgd(m, x, adapter_underconfidence(2), cfg_with(0.3, 25));
  double best = out.loss_trace.front();
  for (double v : out.loss_trace) {
    best = std::min(best, v);
    REQUIRE(best <= out.loss_trace.front());
  }
  REQUIRE(out.achieved_loss == best);
}

TEST_CASE("pgd: box constraint is exact") {
  std::mt19937_64 eng(11);
  ModelParams m = oracles::random_model(eng, 3, 2, Activation::relu);
  VectorXd x = oracles::random_vector(eng, 3, 0.2, 0.8);
  AttackConfig cfg = cfg_with(0.3, 15);
  cfg.box = std::make_pair(0.0, 1.0);
  AttackOutcome out = pgd(m, x, adapter_prediction(0), cfg);
  REQUIRE(linf_norm(out.delta) <= cfg.epsilon + 1e-12);
  REQUIRE((x + out.delta).minCoeff() >= 0.0);
  REQUIRE((x + out.delta).maxCoeff() <= 1.0);

  VectorXd outside = VectorXd::Constant(3, 1.5);
  REQUIRE_THROWS_AS(pgd(m, outside, adapter_prediction(0), cfg), ConfigError);
}

TEST_CASE("adapter_overconfidence: targets the predicted class, ties to the lowest index") {
  std::mt19937_64 eng(13);
  ModelParams m = oracles::random_model(eng, 2, 3, Activation::relu);
  VectorXd x = oracles::random_vector(eng, 2);
  LossAdapter a = adapter_overconfidence(m, x);
  REQUIRE(a.target_class == argmax_class(forward(m, x)));

  // Exactly tied logits: the lowest class index wins.
  ModelParams zero;
  Layer l;
  l.weight = MatrixXd::Zero(3, 2);
  l.bias = VectorXd::Zero(3);
  zero.layers.push_back(l);
  REQUIRE(adapter_overconfidence(zero, x).target_class == 0);
  // Uniform output: initial adapter loss is ln c for the one-hot target.
  REQUIRE(loss_value(zero, x, adapter_overconfidence(zero, x)) ==
          Catch::Approx(std::log(3.0)).margin(1e-12));
}

TEST_CASE("adapter_overconfidence: saturated model stays at zero entropy") {
  ModelParams m;
  Layer l;
  l.weight = MatrixXd::Zero(2, 1);
  l.weight(1, 0) = 100.0;
  l.bias = VectorXd::Zero(2);
  m.layers.push_back(l);
  VectorXd x = VectorXd::Constant(1, 1.0);  // logit gap 100: output is one-hot
  LossAdapter a = adapter_overconfidence(m, x);
  AttackOutcome out = pgd(m, x, a, cfg_with(0.05, 10));
  REQUIRE(out.achieved_loss == 0.0);
  REQUIRE(entropy(forward(m, x + out.delta)) <= 1e-12);
}

TEST_CASE("adapter_underconfidence: loss values") {
  // Uniform output: global minimum ln c.
  ModelParams zero;
  Layer l;
  l.weight = MatrixXd::Zero(2, 1);
  l.bias = VectorXd::Zero(2);
  zero.layers.push_back(l);
  VectorXd x = VectorXd::Zero(1);
  REQUIRE(loss_value(zero, x, adapter_underconfidence(2)) ==
          Catch::Approx(std::log(2.0)).margin(1e-15));

  // Saturated one-hot output: the probability floor keeps the loss finite
  // at (1/2) * 12 ln 10.
  ModelParams sat;
  Layer ls;
  ls.weight = MatrixXd::Zero(2, 1);
  ls.weight(1, 0) = 100.0;
  ls.bias = VectorXd::Zero(2);
  sat.layers.push_back(ls);
  VectorXd xs = VectorXd::Constant(1, 1.0);
  REQUIRE(loss_value(sat, xs, adapter_underconfidence(2)) ==
          Catch::Approx(6.0 * std::log(10.0)).margin(1e-9));

  // Direct evaluation at [0.9, 0.1].
  ModelParams m;
  Layer lm;
  lm.weight = MatrixXd::Zero(2, 1);
  lm.weight(1, 0) = 1.0;
  lm.bias = VectorXd::Zero(2);
  m.layers.push_back(lm);
  VectorXd xm = VectorXd::Constant(1, std::log(1.0 / 9.0));
  REQUIRE(loss_value(m, xm, adapter_underconfidence(2)) ==
          Catch::Approx(-0.5 * (std::log(0.9) + std::log(0.1))).margin(1e-12));
}

TEST_CASE("adapter_prediction: flips a near-boundary sample, epsilon 0 never flips") {
  // Calibrated 1-D logistic model with boundary at 0.
  ModelParams m;
  Layer l;
  l.weight = MatrixXd::Zero(2, 1);
  l.weight(1, 0) = 2.0;
  l.bias = VectorXd::Zero(2);
  m.layers.push_back(l);

  VectorXd x = VectorXd::Constant(1, 0.3);
  REQUIRE(argmax_class(forward(m, x)) == 1);
  AttackOutcome strong = pgd(m, x, adapter_prediction(1), cfg_with(0.5, 10));
  REQUIRE(argmax_class(forward(m, x + strong.delta)) == 0);
  AttackOutcome none = pgd(m, x, adapter_prediction(1), cfg_with(0.0));
  REQUIRE(argmax_class(forward(m, x + none.delta)) == 1);

  // Already misclassified: the ascent only lowers the true-class
  // probability further.
  AttackOutcome worse = pgd(m, VectorXd::Constant(1, -0.2), adapter_prediction(1),
                            cfg_with(0.1, 10));
  REQUIRE(argmax_class(forward(m, VectorXd::Constant(1, -0.2) + worse.delta)) == 0);
}

TEST_CASE("adapter_msp_selective: constraint and bounds") {
  // Correct sample at the uniform output: MSP is already at its minimum.
  ModelParams zero;
  Layer l;
  l.weight = MatrixXd::Zero(2, 2);
  l.bias = VectorXd::Zero(2);
  zero.layers.push_back(l);
  VectorXd x0 = VectorXd::Zero(2);
  LossAdapter a0 = adapter_msp_selective(zero, x0, /*correct=*/true);
  AttackOutcome o0 = pgd(zero, x0, a0, cfg_with(0.2, 10));
  REQUIRE(o0.achieved_loss == Catch::Approx(0.5).margin(1e-12));

  std::mt19937_64 eng(17);
  for (int trial = 0; trial < 30; ++trial) {
    ModelParams m = oracles::random_model(eng, 3, 3, Activation::relu);
    VectorXd x = oracles::random_vector(eng, 3);
    bool correct = (trial % 2) == 0;
    LossAdapter a = adapter_msp_selective(m, x, correct);
    AttackOutcome out = pgd(m, x, a, cfg_with(0.25, 15));
    ProbVector attacked = forward(m, x + out.delta);
    // The returned iterate always preserves the prediction.
    REQUIRE(argmax_class(attacked) == a.target_class);
    double clean_msp = forward(m, x).maxCoeff();
    if (correct) {
      REQUIRE(attacked(a.target_class) <= clean_msp + 1e-12);
    } else {
      REQUIRE(attacked(a.target_class) >= clean_msp - 1e-12);
    }
  }
}

TEST_CASE("attack_dataset: epsilon 0 is the identity") {
  std::mt19937_64 eng(19);
  ModelParams m = oracles::random_model(eng, 3, 2, Activation::relu);
  LabeledDataset ds = random_dataset(eng, 40, 3, 2);
  AdapterFactory factory = [](const ModelParams&, const VectorXd&, int label, int) {
    return adapter_prediction(label);
  };
  DatasetAttackResult res = attack_dataset(m, ds, factory, cfg_with(0.0), 2);
  REQUIRE((res.perturbed.features - ds.features).cwiseAbs().maxCoeff() == 0.0);
  for (const auto& rec : res.records) REQUIRE(!rec.outcome.failed);
}

TEST_CASE("attack_dataset: permuting rows commutes with attacking") {
  std::mt19937_64 eng(23);
  ModelParams m = oracles::random_model(eng, 3, 3, Activation::relu);
  LabeledDataset ds = random_dataset(eng, 300, 3, 3);  // spans multiple blocks
  AdapterFactory factory = [](const ModelParams& p, const VectorXd& x, int, int) {
    return adapter_overconfidence(p, x);
  };
  AttackConfig cfg = cfg_with(0.2, 8);
  cfg.random_start = true;
  cfg.seed = 99;

  DatasetAttackResult base = attack_dataset(m, ds, factory, cfg, 1);

  std::vector<long> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), eng);
  LabeledDataset shuffled;
  shuffled.features.resize(ds.size(), ds.dim());
  shuffled.labels.resize(ds.size());
  shuffled.row_ids.resize(ds.size());
  shuffled.num_classes = ds.num_classes;
  for (long i = 0; i < ds.size(); ++i) {
    shuffled.features.row(i) = ds.features.row(perm[i]);
    shuffled.labels(i) = ds.labels(perm[i]);
    shuffled.row_ids(i) = ds.row_ids(perm[i]);
  }
  DatasetAttackResult moved = attack_dataset(m, shuffled, factory, cfg, 4);
  for (long i = 0; i < ds.size(); ++i) {
    REQUIRE((moved.perturbed.features.row(i) - base.perturbed.features.row(perm[i]))
                .cwiseAbs()
                .maxCoeff() == 0.0);
    REQUIRE(moved.records[i].outcome.achieved_loss ==
            base.records[perm[i]].outcome.achieved_loss);
  }
}

TEST_CASE("attack_dataset: a numerically failing sample is flagged and frozen") {
  std::mt19937_64 eng(29);
  ModelParams m = oracles::random_model(eng, 2, 2, Activation::relu);
  LabeledDataset ds = random_dataset(eng, 5, 2, 2);
  // Sample 3 gets an adapter with a poisoned sign, which makes its
  // gradient non-finite on the first step.
  AdapterFactory factory = [](const ModelParams&, const VectorXd&, int label, int row_id) {
    LossAdapter a = adapter_prediction(label);
    if (row_id == 3) a.sign = std::numeric_limits<double>::quiet_NaN();
    return a;
  };
  DatasetAttackResult res = attack_dataset(m, ds, factory, cfg_with(0.2, 5), 1);
  for (long i = 0; i < ds.size(); ++i) {
    if (i == 3) {
      REQUIRE(res.records[i].outcome.failed);
      REQUIRE(res.records[i].outcome.delta.cwiseAbs().maxCoeff() == 0.0);
      REQUIRE((res.perturbed.features.row(i) - ds.features.row(i)).cwiseAbs().maxCoeff() == 0.0);
    } else {
      REQUIRE(!res.records[i].outcome.failed);
    }
  }
}

TEST_CASE("span_sweep: chain and warm-start monotonicity hold exactly") {
  std::mt19937_64 eng(31);
  for (int c : {2, 3}) {
    ModelParams m = oracles::random_model(eng, 3, c, Activation::relu);
    LabeledDataset ds = random_dataset(eng, 60, 3, c);
    AttackConfig cfg = cfg_with(0.0, 12);
    std::vector<double> eps = {0.0, 0.05, 0.1, 0.25};
    auto per_eps = span_sweep(m, ds, cfg, eps, 2);
    REQUIRE(per_eps.size() == eps.size());

    for (long i = 0; i < ds.size(); ++i) {
      REQUIRE(per_eps[0][i].u_low == per_eps[0][i].clean_entropy);
      REQUIRE(per_eps[0][i].u_high == per_eps[0][i].clean_entropy);
      for (std::size_t e = 0; e < eps.size(); ++e) {
        REQUIRE(per_eps[e][i].u_low <= per_eps[e][i].clean_entropy);
        REQUIRE(per_eps[e][i].u_high >= per_eps[e][i].clean_entropy);
        if (e > 0) {
          REQUIRE(per_eps[e][i].u_low <= per_eps[e - 1][i].u_low);
          REQUIRE(per_eps[e][i].u_high >= per_eps[e - 1][i].u_high);
        }
      }
    }
  }
}

TEST_CASE("uncertainty_span: zero budget and constant models have zero width") {
  std::mt19937_64 eng(37);
  ModelParams m = oracles::random_model(eng, 2, 2, Activation::tanh);
  VectorXd x = oracles::random_vector(eng, 2);
  SpanRecord rec = uncertainty_span(m, x, cfg_with(0.0));
  REQUIRE(rec.u_low == rec.clean_entropy);
  REQUIRE(rec.u_high == rec.clean_entropy);

  ModelParams constant;
  Layer l;
  l.weight = MatrixXd::Zero(2, 2);
  l.bias = VectorXd::Zero(2);
  constant.layers.push_back(l);
  SpanRecord flat = uncertainty_span(constant, x, cfg_with(0.4, 15));
  REQUIRE(flat.width() == 0.0);
  REQUIRE(flat.clean_entropy == Catch::Approx(std::log(2.0)).margin(1e-15));
}

TEST_CASE("ood camouflage: outliers end up more certain than clean data") {
  // Undefended model on the overlap spec; over-confidence attacks on the
  // far outlier set push its mean entropy below the in-distribution mean.
  MixtureSpec spec;
  spec.feature_dim = 2;
  MixtureComponent a, b;
  a.label = 0;
  a.mean = (VectorXd(2) << -1.0, 0.0).finished();
  a.sigma = 1.0;
  a.weight = 0.5;
  b.label = 1;
  b.mean = (VectorXd(2) << 1.0, 0.0).finished();
  b.sigma = 1.0;
  b.weight = 0.5;
  spec.components = {a, b};

  LabeledDataset train_ds = sample(spec, 8000, 301);
  LabeledDataset test_ds = sample(spec, 500, 302);
  auto [osr, ood] = make_osr_and_ood_sets(spec, VectorXd::Zero(2), 10.0, 300, 303);

  TrainConfig tc;
  tc.epochs = 60;
  tc.batch_size = 128;
  tc.learning_rate = 0.05;
  tc.momentum = 0.9;
  tc.seed = 304;
  ModelParams model = train(make_mlp(2, {32, 32}, 2, Activation::relu, 305), train_ds, tc).params;

  AdapterFactory over = [](const ModelParams& p, const VectorXd& x, int, int) {
    return adapter_overconfidence(p, x);
  };
  AttackConfig atk = cfg_with(0.25, 150);
  DatasetAttackResult res = attack_dataset(model, ood, over, atk, 2, false,
                                           detail::entropy_score(+1.0));

  auto mean_entropy = [&](const MatrixXd& feats) {
    MatrixXd probs = predict_probs(model, feats);
    double s = 0.0;
    for (long i = 0; i < probs.rows(); ++i) s += entropy(probs.row(i).transpose());
    return s / static_cast<double>(probs.rows());
  };
  REQUIRE(mean_entropy(res.perturbed.features) < mean_entropy(test_ds.features));
}

TEST_CASE("attack_sweep: rejects an unsorted epsilon list") {
  std::mt19937_64 eng(41);
  ModelParams m = oracles::random_model(eng, 2, 2, Activation::relu);
  LabeledDataset ds = random_dataset(eng, 10, 2, 2);
  AdapterFactory factory = [](const ModelParams&, const VectorXd&, int label, int) {
    return adapter_prediction(label);
  };
  REQUIRE_THROWS_AS(attack_sweep(m, ds, factory, cfg_with(0.0), {0.1, 0.05}, 1), ConfigError);
}
