#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "uncspan/data.hpp"
#include "uncspan/nn.hpp"
#include "uncspan/parallel.hpp"
#include "uncspan/rng.hpp"

namespace uncspan {

/// L-infinity PGD budget and schedule.
struct AttackConfig {
  double epsilon = 0.0;
  int steps = 150;
  double step_size = 0.0;  // <= 0: use 2.5 * epsilon / steps, capped at 2 * epsilon
  bool random_start = false;
  std::optional<std::pair<double, double>> box;  // per-feature clamp (lo, hi)
  std::uint64_t seed = 0;
  bool keep_best = true;

  void validate() const {
    if (epsilon < 0.0) throw ConfigError("attack: epsilon must be >= 0");
    if (steps < 0) throw ConfigError("attack: steps must be >= 0");
    if (epsilon > 0.0 && step_size > 2.0 * epsilon)
      throw ConfigError("attack: step_size must be <= 2*epsilon");
    if (box && box->first >= box->second) throw ConfigError("attack: empty box");
  }

  double effective_step() const {
    if (step_size > 0.0) return step_size;
    if (steps < 1) return 0.0;
    return std::min(2.5 * epsilon / steps, 2.0 * epsilon);
  }
};

struct AttackOutcome {
  VectorXd delta;
  double achieved_loss = 0.0;
  std::vector<double> loss_trace;  // loss of every evaluated candidate, in order
  int evaluations = 0;
  bool failed = false;  // numerical failure; delta is frozen at 0
};

// Over-confidence attack (STAB): cross-entropy to the one-hot encoding of
// the model's own prediction, -log f_yhat(x + delta). Minimizing it drives
// the output toward one-hot and the entropy toward zero.
inline LossAdapter adapter_overconfidence(const ModelParams& params, const VectorXd& x) {
  LossAdapter a;
  a.kind = LossKind::negative_class_logprob;
  a.target_class = argmax_class(forward(params, x));
  return a;
}

// Under-confidence attack: cross-entropy to the uniform vector,
// -(1/c) sum_k log f_k(x + delta), minimized by the uniform output.
inline LossAdapter adapter_underconfidence(int num_classes) {
  if (num_classes < 2) throw ConfigError("adapter_underconfidence: need >= 2 classes");
  LossAdapter a;
  a.kind = LossKind::mean_negative_logprob;
  return a;
}

// Prediction (evasion) attack: untargeted ascent on the true-class
// cross-entropy, expressed as minimizing +log f_y(x + delta).
inline LossAdapter adapter_prediction(int true_label) {
  LossAdapter a;
  a.kind = LossKind::negative_class_logprob;
  a.target_class = true_label;
  a.sign = -1.0;
  return a;
}

// MSP-selective miscalibration: gamma * f_yhat(x + delta) with gamma = +1
// for correctly classified samples (push confidence down) and -1 otherwise
// (push it up), under the constraint that the prediction must not change.
// The PGD driver enforces the constraint for this adapter kind.
inline LossAdapter adapter_msp_selective(const ModelParams& params, const VectorXd& x,
                                         bool correct) {
  LossAdapter a;
  a.kind = LossKind::signed_msp;
  a.target_class = argmax_class(forward(params, x));
  a.sign = correct ? 1.0 : -1.0;
  return a;
}

/// Candidate ranking used by keep_best; lower is better. Defaults to the
/// adapter loss. Callers may rank by another functional of the output
/// (e.g. entropy for span bounds, misclassification for robust accuracy).
using ScoreFn = std::function<double(const VectorXd& probs, double adapter_loss, int col)>;

namespace detail {

struct BatchAttackState {
  MatrixXd delta;
  MatrixXd best_delta;
  std::vector<double> best_score;
  std::vector<double> best_loss;
  std::vector<char> failed;
  std::vector<std::vector<double>> traces;
  int evaluations = 0;
};

inline void project_inplace(MatrixXd& delta, const MatrixXd& x, const AttackConfig& cfg) {
  delta = delta.cwiseMax(-cfg.epsilon).cwiseMin(cfg.epsilon);
  if (cfg.box) {
    MatrixXd xadv = (x + delta).cwiseMax(cfg.box->first).cwiseMin(cfg.box->second);
    delta = xadv - x;
  }
}

/// Core batched PGD over the columns of x. Every column is an independent
/// attack; delta = 0 is always evaluated first, then the start point, then
/// one candidate per sign-gradient step. Columns that hit a non-finite
/// gradient are frozen at delta = 0 and flagged (or the whole call throws
/// when throw_on_error is set).
inline BatchAttackState pgd_batch(const ModelParams& params, const MatrixXd& x,
                                  const std::vector<LossAdapter>& adapters,
                                  const AttackConfig& cfg,
                                  const std::vector<std::uint64_t>& seeds,
                                  const MatrixXd* warm_delta, const ScoreFn& score_fn,
                                  bool record_traces, bool throw_on_error) {
  cfg.validate();
  for (const auto& a : adapters) a.validate(params.num_classes());
  const int B = static_cast<int>(x.cols());
  const int d = static_cast<int>(x.rows());
  if (cfg.box) {
    if (x.minCoeff() < cfg.box->first || x.maxCoeff() > cfg.box->second)
      throw ConfigError("attack: input lies outside the box constraint");
  }

  BatchAttackState st;
  st.delta = MatrixXd::Zero(d, B);
  st.best_delta = MatrixXd::Zero(d, B);
  st.best_score.assign(B, std::numeric_limits<double>::infinity());
  st.best_loss.assign(B, std::numeric_limits<double>::infinity());
  st.failed.assign(B, 0);
  if (record_traces) st.traces.resize(B);

  std::vector<char> skip_step(B, 0);

  auto feasible = [&](int j, const VectorXd& probs) {
    if (adapters[j].kind != LossKind::signed_msp) return true;
    return argmax_class(probs) == adapters[j].target_class;
  };

  // Evaluates the current deltas as candidates; reverts infeasible
  // columns (signed_msp constraint) to their best feasible iterate.
  auto record = [&](const MatrixXd& probs) {
    ++st.evaluations;
    for (int j = 0; j < B; ++j) {
      if (st.failed[j]) continue;
      double loss = adapter_loss_probs(adapters[j], probs.col(j));
      if (record_traces) st.traces[j].push_back(loss);
      if (!feasible(j, probs.col(j))) {
        st.delta.col(j) = st.best_delta.col(j);
        skip_step[j] = 1;
        continue;
      }
      double score = score_fn ? score_fn(probs.col(j), loss, j) : loss;
      // Without keep_best the most recent feasible iterate wins.
      if (!cfg.keep_best || score < st.best_score[j]) {
        st.best_score[j] = score;
        st.best_loss[j] = loss;
        st.best_delta.col(j) = st.delta.col(j);
      }
    }
  };

  // delta = 0 is a candidate for every column.
  {
    MatrixXd probs0 = forward_batch(params, x);
    record(probs0);
  }
  if (cfg.epsilon == 0.0) {
    st.delta = st.best_delta;
    return st;
  }

  bool started_off_zero = false;
  if (warm_delta) {
    st.delta = *warm_delta;
    project_inplace(st.delta, x, cfg);
    started_off_zero = true;
  } else if (cfg.random_start) {
    for (int j = 0; j < B; ++j) {
      std::mt19937_64 eng = make_engine(seeds[j]);
      std::uniform_real_distribution<double> dist(-cfg.epsilon, cfg.epsilon);
      for (int i = 0; i < d; ++i) st.delta(i, j) = dist(eng);
    }
    project_inplace(st.delta, x, cfg);
    started_off_zero = true;
  }

  if (cfg.steps == 0) {
    if (started_off_zero) record(forward_batch(params, x + st.delta));
    st.delta = st.best_delta;
    return st;
  }

  const double step = cfg.effective_step();
  for (int t = 0; t < cfg.steps; ++t) {
    ForwardTrace trace;
    MatrixXd probs;
    try {
      probs = forward_batch(params, x + st.delta, &trace);
    } catch (const NumericalError&) {
      if (throw_on_error) throw NumericalError("attack failed at iteration " + std::to_string(t));
      for (int j = 0; j < B; ++j) st.failed[j] = 1;
      break;
    }
    if (t > 0 || started_off_zero) record(probs);

    MatrixXd grad;
    backward_batch(params, x + st.delta, adapters, trace, probs, &grad, nullptr);
    for (int j = 0; j < B; ++j) {
      if (st.failed[j]) continue;
      if (!grad.col(j).allFinite()) {
        if (throw_on_error)
          throw NumericalError("non-finite gradient at iteration " + std::to_string(t));
        st.failed[j] = 1;
        st.delta.col(j).setZero();
        continue;
      }
      if (skip_step[j]) {
        skip_step[j] = 0;  // discarded iterate: hold at the reverted point this step
        continue;
      }
      st.delta.col(j) -= step * grad.col(j).array().sign().matrix();
    }
    project_inplace(st.delta, x, cfg);
    for (int j = 0; j < B; ++j)
      if (st.failed[j]) st.delta.col(j).setZero();
  }

  // Final iterate is the last candidate.
  {
    MatrixXd probs = forward_batch(params, x + st.delta);
    record(probs);
  }

  for (int j = 0; j < B; ++j) {
    if (st.failed[j]) {
      st.best_delta.col(j).setZero();
      st.best_loss[j] = adapter_loss_probs(adapters[j], forward(params, x.col(j)));
    }
  }
  st.delta = st.best_delta;
  return st;
}

}  // namespace detail

/// Runs PGD on one sample and returns the selected perturbation. With
/// keep_best (default) the returned iterate minimizes the adapter loss
/// over every evaluated candidate, delta = 0 included.
inline AttackOutcome pgd(const ModelParams& params, const VectorXd& x,
                         const LossAdapter& adapter, const AttackConfig& cfg,
                         const VectorXd* warm_delta = nullptr,
                         const ScoreFn& score_fn = nullptr) {
  MatrixXd xm = x;
  MatrixXd warm;
  if (warm_delta) warm = *warm_delta;
  detail::BatchAttackState st = detail::pgd_batch(
      params, xm, {adapter}, cfg, {derive_seed(cfg.seed, 0)},
      warm_delta ? &warm : nullptr, score_fn, /*record_traces=*/true,
      /*throw_on_error=*/true);
  AttackOutcome out;
  out.delta = st.best_delta.col(0);
  out.achieved_loss = st.best_loss[0];
  out.loss_trace = std::move(st.traces[0]);
  out.evaluations = st.evaluations;
  return out;
}

/// Builds the per-sample loss adapter for a dataset attack. Receives the
/// clean sample, so prediction-dependent targets are fixed up front.
using AdapterFactory =
    std::function<LossAdapter(const ModelParams&, const VectorXd& x, int label, int row_id)>;

struct SampleAttackRecord {
  int row_id = 0;
  AttackOutcome outcome;
};

struct DatasetAttackResult {
  LabeledDataset perturbed;
  std::vector<SampleAttackRecord> records;  // in dataset row order
};

inline constexpr int kAttackBlock = 256;

/// Attacks every row of a dataset. Rows are processed in blocks padded to
/// a fixed width (per-column floating point results depend on the batch
/// width, not its contents), and per-row seeds derive from (cfg.seed,
/// row_id), so the result is a pure function of each row: independent of
/// row order, block boundaries and thread count. A row that fails
/// numerically keeps delta = 0 and is flagged rather than aborting the
/// run.
inline DatasetAttackResult attack_dataset(const ModelParams& params,
                                          const LabeledDataset& data,
                                          const AdapterFactory& factory,
                                          const AttackConfig& cfg, int threads = 1,
                                          bool record_traces = false,
                                          const ScoreFn& score_fn = nullptr,
                                          const MatrixXd* warm_deltas = nullptr) {
  data.validate();
  if (data.size() == 0) throw ConfigError("attack_dataset: empty dataset");
  const long n = data.size();
  const int d = data.dim();

  DatasetAttackResult result;
  result.perturbed = data;
  result.records.resize(n);

  MatrixXd xt = data.features.transpose();  // d x n, columns are samples
  const long num_blocks = (n + kAttackBlock - 1) / kAttackBlock;

  parallel_for(static_cast<std::size_t>(num_blocks), threads, [&](std::size_t b) {
    const long lo = static_cast<long>(b) * kAttackBlock;
    const long hi = std::min(n, lo + kAttackBlock);
    const int m = static_cast<int>(hi - lo);

    MatrixXd xblk(d, kAttackBlock);
    std::vector<LossAdapter> adapters;
    std::vector<std::uint64_t> seeds;
    adapters.reserve(kAttackBlock);
    seeds.reserve(kAttackBlock);
    for (int j = 0; j < kAttackBlock; ++j) {
      const long i = lo + (j % m);  // trailing columns replicate the block
      xblk.col(j) = xt.col(i);
      if (j < m) {
        adapters.push_back(factory(params, xt.col(i), data.labels(i), data.row_ids(i)));
        seeds.push_back(derive_seed(cfg.seed, static_cast<std::uint64_t>(data.row_ids(i))));
      } else {
        adapters.push_back(adapters[j % m]);
        seeds.push_back(seeds[j % m]);
      }
    }
    MatrixXd warm;
    if (warm_deltas) {
      warm.resize(d, kAttackBlock);
      for (int j = 0; j < kAttackBlock; ++j) warm.col(j) = warm_deltas->col(lo + (j % m));
    }

    ScoreFn block_score;
    if (score_fn) {
      block_score = [&, lo, m](const VectorXd& probs, double loss, int col) {
        return score_fn(probs, loss, static_cast<int>(lo) + (col % m));
      };
    }
    detail::BatchAttackState st = detail::pgd_batch(
        params, xblk, adapters, cfg, seeds, warm_deltas ? &warm : nullptr, block_score,
        record_traces, /*throw_on_error=*/false);

    for (int j = 0; j < m; ++j) {
      const long i = lo + j;
      SampleAttackRecord& rec = result.records[i];
      rec.row_id = data.row_ids(i);
      rec.outcome.delta = st.best_delta.col(j);
      rec.outcome.achieved_loss = st.best_loss[j];
      rec.outcome.failed = st.failed[j] != 0;
      rec.outcome.evaluations = st.evaluations;
      if (record_traces) rec.outcome.loss_trace = std::move(st.traces[j]);
      result.perturbed.features.row(i) =
          (xt.col(i) + rec.outcome.delta).transpose();
    }
  });
  return result;
}

/// Warm-started budget sweep: the perturbation found at each epsilon seeds
/// the next (larger) one and stays in the candidate set, which makes the
/// achieved loss non-increasing in epsilon for every sample.
inline std::vector<DatasetAttackResult> attack_sweep(
    const ModelParams& params, const LabeledDataset& data, const AdapterFactory& factory,
    AttackConfig base_cfg, const std::vector<double>& epsilons, int threads = 1,
    const ScoreFn& score_fn = nullptr) {
  if (epsilons.empty()) throw ConfigError("attack_sweep: empty epsilon list");
  for (std::size_t i = 1; i < epsilons.size(); ++i)
    if (!(epsilons[i] > epsilons[i - 1]))
      throw ConfigError("attack_sweep: epsilon list must be strictly ascending");

  std::vector<DatasetAttackResult> out;
  MatrixXd warm;
  bool have_warm = false;
  for (double eps : epsilons) {
    AttackConfig cfg = base_cfg;
    cfg.epsilon = eps;
    DatasetAttackResult res =
        attack_dataset(params, data, factory, cfg, threads, /*record_traces=*/false,
                       score_fn, have_warm ? &warm : nullptr);
    warm = (res.perturbed.features - data.features).transpose();
    have_warm = true;
    out.push_back(std::move(res));
  }
  return out;
}

inline double linf_norm(const VectorXd& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

}  // namespace uncspan
