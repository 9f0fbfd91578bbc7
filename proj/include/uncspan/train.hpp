#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "uncspan/attack.hpp"
#include "uncspan/data.hpp"
#include "uncspan/nn.hpp"
#include "uncspan/rng.hpp"

namespace uncspan {

enum class TrainMode { standard, adversarial };

/// Minibatch SGD with momentum; adversarial mode perturbs each batch with
/// an inner PGD attack (cross-entropy ascent on the true labels) before
/// the gradient step.
struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::standard;
  std::optional<AttackConfig> inner_attack;

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (learning_rate < 0.0) throw ConfigError("train: learning_rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0,1)");
    if (mode == TrainMode::adversarial && !inner_attack)
      throw ConfigError("train: adversarial mode requires inner_attack");
    if (inner_attack) inner_attack->validate();
  }
};

struct EpochStat {
  double mean_loss = 0.0;
  double clean_acc = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStat> log;
};

/// Softmax probabilities for every row of a feature matrix, [n x c].
inline MatrixXd predict_probs(const ModelParams& params, const Eigen::MatrixXd& features) {
  return forward_batch(params, features.transpose()).transpose();
}

/// Fraction of rows whose argmax prediction (ties toward the lowest class
/// index) equals the label.
inline double accuracy(const ModelParams& params, const LabeledDataset& data) {
  if (data.size() == 0) throw ConfigError("accuracy: empty dataset");
  MatrixXd probs = predict_probs(params, data.features);
  long correct = 0;
  for (long i = 0; i < data.size(); ++i)
    if (argmax_class(probs.row(i).transpose()) == data.labels(i)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Accuracy under a per-sample PGD evasion attack. The attack prefers any
/// misclassifying iterate (delta = 0 included), so robust accuracy can
/// never exceed clean accuracy.
inline double robust_accuracy(const ModelParams& params, const LabeledDataset& data,
                              const AttackConfig& atk, int threads = 1) {
  if (data.size() == 0) throw ConfigError("robust_accuracy: empty dataset");
  AdapterFactory factory = [](const ModelParams&, const VectorXd&, int label, int) {
    return adapter_prediction(label);
  };
  ScoreFn score = [&data](const VectorXd& probs, double loss, int col) {
    bool wrong = argmax_class(probs) != data.labels(col);
    return (wrong ? -1e100 : 0.0) + loss;
  };
  DatasetAttackResult res = attack_dataset(params, data, factory, atk, threads,
                                           /*record_traces=*/false, score);
  MatrixXd probs = predict_probs(params, res.perturbed.features);
  long correct = 0;
  for (long i = 0; i < data.size(); ++i)
    if (argmax_class(probs.row(i).transpose()) == data.labels(i)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {

// One fused forward/backward over a batch: mean loss plus the mean
// parameter gradient.
inline double batch_loss_and_grad(const ModelParams& params, const MatrixXd& x,
                                  const std::vector<LossAdapter>& adapters, ParamGrad& grad) {
  ForwardTrace trace;
  MatrixXd probs = forward_batch(params, x, &trace);
  backward_batch(params, x, adapters, trace, probs, nullptr, &grad);
  const double inv = 1.0 / static_cast<double>(x.cols());
  for (auto& w : grad.weight) w *= inv;
  for (auto& b : grad.bias) b *= inv;
  double total = 0.0;
  for (int j = 0; j < x.cols(); ++j) total += adapter_loss_probs(adapters[j], probs.col(j));
  return total * inv;
}

}  // namespace detail

/// Trains from `init` and returns the final parameters with one log row
/// per epoch. Batch order comes from a per-epoch permutation derived from
/// cfg.seed, so a fixed seed reproduces the run bit for bit. Adversarial
/// mode with epsilon = 0 consumes no extra randomness and follows the
/// standard trajectory exactly.
inline TrainResult train(const ModelParams& init, const LabeledDataset& data,
                         const TrainConfig& cfg) {
  cfg.validate();
  init.validate();
  data.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  if (data.dim() != init.input_dim()) throw ConfigError("train: data dim != model dim");
  for (long i = 0; i < data.size(); ++i)
    if (data.labels(i) >= init.num_classes())
      throw ConfigError("train: label out of model range at row " + std::to_string(i));

  TrainResult result;
  result.params = init;
  const long n = data.size();
  MatrixXd xt = data.features.transpose();  // d x n

  std::vector<MatrixXd> vel_w;
  std::vector<VectorXd> vel_b;
  for (const Layer& l : result.params.layers) {
    vel_w.push_back(MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    vel_b.push_back(VectorXd::Zero(l.bias.size()));
  }

  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 eng =
        make_engine(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), eng);

    double loss_sum = 0.0;
    long batches = 0;
    try {
    for (long start = 0; start < n; start += cfg.batch_size) {
      const int m = static_cast<int>(std::min<long>(cfg.batch_size, n - start));
      MatrixXd xb(xt.rows(), m);
      std::vector<LossAdapter> ce_adapters;
      ce_adapters.reserve(m);
      for (int j = 0; j < m; ++j) {
        long i = order[start + j];
        xb.col(j) = xt.col(i);
        ce_adapters.push_back(cross_entropy_to_class(data.labels(i)));
      }

      if (cfg.mode == TrainMode::adversarial && cfg.inner_attack->epsilon > 0.0) {
        std::vector<LossAdapter> atk_adapters;
        atk_adapters.reserve(m);
        for (int j = 0; j < m; ++j) {
          long i = order[start + j];
          atk_adapters.push_back(adapter_prediction(data.labels(i)));
        }
        std::vector<std::uint64_t> seeds(m, 0);
        if (cfg.inner_attack->random_start)
          for (int j = 0; j < m; ++j)
            seeds[j] = derive_seed(cfg.inner_attack->seed, "inner",
                                   static_cast<std::uint64_t>(data.row_ids(order[start + j])));
        detail::BatchAttackState st =
            detail::pgd_batch(result.params, xb, atk_adapters, *cfg.inner_attack, seeds,
                              nullptr, nullptr, false, /*throw_on_error=*/true);
        xb += st.best_delta;
      }

      ParamGrad grad;
      loss_sum += detail::batch_loss_and_grad(result.params, xb, ce_adapters, grad);
      ++batches;

      for (std::size_t k = 0; k < result.params.layers.size(); ++k) {
        vel_w[k] = cfg.momentum * vel_w[k] - cfg.learning_rate * grad.weight[k];
        vel_b[k] = cfg.momentum * vel_b[k] - cfg.learning_rate * grad.bias[k];
        result.params.layers[k].weight += vel_w[k];
        result.params.layers[k].bias += vel_b[k];
      }
    }
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (" +
                           e.what() + ")");
    }

    EpochStat stat;
    stat.mean_loss = loss_sum / static_cast<double>(batches);
    if (!std::isfinite(stat.mean_loss))
      throw NumericalError("training diverged at epoch " + std::to_string(epoch));
    stat.clean_acc = accuracy(result.params, data);
    result.log.push_back(stat);
  }
  return result;
}

}  // namespace uncspan
