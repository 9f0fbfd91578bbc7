#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uncspan/common.hpp"
#include "uncspan/rng.hpp"

namespace uncspan {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Probability floor applied before every log in a loss, so losses stay
/// finite when the model output saturates to a one-hot vector.
inline constexpr double kProbFloor = 1e-12;

enum class Activation { relu, tanh, identity };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

struct Layer {
  MatrixXd weight;  // [out x in]
  VectorXd bias;    // [out]
  Activation act = Activation::identity;
};

/// Parameters of a feed-forward softmax classifier. The last layer's
/// activation is ignored: its outputs are the logits.
struct ModelParams {
  std::vector<Layer> layers;

  int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int num_classes() const { return static_cast<int>(layers.back().weight.rows()); }

  void validate() const {
    if (layers.empty()) throw ConfigError("model has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const Layer& l = layers[k];
      if (l.weight.rows() != l.bias.size())
        throw ConfigError("layer " + std::to_string(k) + ": bias/weight row mismatch");
      if (k > 0 && layers[k - 1].weight.rows() != l.weight.cols())
        throw ConfigError("layer " + std::to_string(k) + ": input dim does not chain");
      if (!l.weight.allFinite() || !l.bias.allFinite())
        throw NumericalError("layer " + std::to_string(k) + ": non-finite parameter");
    }
    if (num_classes() < 2) throw ConfigError("model must have at least 2 classes");
  }
};

/// Glorot-style uniform init in [-a, a], a = sqrt(6 / (fan_in + fan_out)),
/// for weights and biases alike; fully determined by the seed.
inline ModelParams make_mlp(int input_dim, const std::vector<int>& hidden,
                            int num_classes, Activation hidden_act,
                            std::uint64_t seed) {
  if (input_dim < 1) throw ConfigError("input_dim must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  std::vector<int> dims;
  dims.push_back(input_dim);
  for (int h : hidden) {
    if (h < 1) throw ConfigError("hidden width must be positive");
    dims.push_back(h);
  }
  dims.push_back(num_classes);

  std::mt19937_64 eng = make_engine(seed);
  ModelParams params;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    int in = dims[k], out = dims[k + 1];
    double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    Layer layer;
    layer.weight.resize(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) layer.weight(r, c) = dist(eng);
    layer.bias.resize(out);
    for (int r = 0; r < out; ++r) layer.bias(r) = dist(eng);
    layer.act = (k + 2 < dims.size()) ? hidden_act : Activation::identity;
    params.layers.push_back(std::move(layer));
  }
  return params;
}

/// Softmax output of the model: entries in [0,1], summing to 1.
using ProbVector = VectorXd;

inline bool is_prob_vector(const VectorXd& p, double tol = 1e-9) {
  if (!p.allFinite()) return false;
  if (p.minCoeff() < -tol || p.maxCoeff() > 1.0 + tol) return false;
  return std::abs(p.sum() - 1.0) <= tol;
}

/// Argmax with ties broken toward the lowest class index.
inline int argmax_class(const VectorXd& p) {
  int best = 0;
  for (int c = 1; c < p.size(); ++c)
    if (p(c) > p(best)) best = c;
  return best;
}

namespace detail {

inline void apply_activation(Activation act, MatrixXd& z) {
  switch (act) {
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::tanh: z = z.array().tanh().matrix(); break;
    case Activation::identity: break;
  }
}

// Derivative as a function of the pre-activation z.
inline MatrixXd activation_deriv(Activation act, const MatrixXd& z) {
  switch (act) {
    case Activation::relu:
      return (z.array() > 0.0).cast<double>().matrix();
    case Activation::tanh:
      return (1.0 - z.array().tanh().square()).matrix();
    case Activation::identity:
      return MatrixXd::Ones(z.rows(), z.cols());
  }
  return MatrixXd();
}

}  // namespace detail

/// Per-layer pre-activations kept around for backprop.
struct ForwardTrace {
  std::vector<MatrixXd> pre_act;     // z_k, one per layer
  std::vector<MatrixXd> activation;  // a_k = act(z_k); activation.back() is the logits
};

/// Forward pass over a batch (columns = samples). Returns the [c x B]
/// softmax probabilities; logits get a max-subtraction before exp.
inline MatrixXd forward_batch(const ModelParams& params, const MatrixXd& x,
                              ForwardTrace* trace = nullptr) {
  if (x.rows() != params.input_dim())
    throw ConfigError("input dim " + std::to_string(x.rows()) + " does not match model dim " +
                      std::to_string(params.input_dim()));
  if (!x.allFinite()) throw NumericalError("non-finite input to forward");

  MatrixXd a = x;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const Layer& l = params.layers[k];
    MatrixXd z = (l.weight * a).colwise() + l.bias;
    if (trace) trace->pre_act.push_back(z);
    if (k + 1 < params.layers.size()) detail::apply_activation(l.act, z);
    if (trace) trace->activation.push_back(z);
    a = std::move(z);
  }
  if (!a.allFinite()) throw NumericalError("non-finite logits in forward");

  MatrixXd probs(a.rows(), a.cols());
  for (int j = 0; j < a.cols(); ++j) {
    VectorXd col = a.col(j);
    double m = col.maxCoeff();
    VectorXd e = (col.array() - m).exp();
    probs.col(j) = e / e.sum();
  }
  return probs;
}

inline ProbVector forward(const ModelParams& params, const VectorXd& x) {
  return forward_batch(params, x);
}

enum class LossKind {
  cross_entropy_target,
  negative_class_logprob,
  mean_negative_logprob,
  signed_msp,
};

/// Scalar objective evaluated on the softmax output. `sign` scales the
/// base value, so the same kind serves both ascent and descent goals.
struct LossAdapter {
  LossKind kind = LossKind::cross_entropy_target;
  VectorXd target_dist;    // cross_entropy_target
  int target_class = -1;   // negative_class_logprob, signed_msp, or a one-hot CE target
  double sign = 1.0;

  void validate(int num_classes) const {
    switch (kind) {
      case LossKind::cross_entropy_target:
        if (target_class >= 0) {
          if (target_class >= num_classes)
            throw ConfigError("cross_entropy_target: class index out of range");
        } else {
          if (target_dist.size() != num_classes)
            throw ConfigError("cross_entropy_target: target length does not match class count");
          if (!is_prob_vector(target_dist))
            throw ConfigError("cross_entropy_target: target is not a probability vector");
        }
        break;
      case LossKind::negative_class_logprob:
      case LossKind::signed_msp:
        if (target_class < 0 || target_class >= num_classes)
          throw ConfigError("loss adapter: class index out of range");
        break;
      case LossKind::mean_negative_logprob:
        break;
    }
  }
};

inline LossAdapter cross_entropy_to_class(int label) {
  LossAdapter a;
  a.kind = LossKind::cross_entropy_target;
  a.target_class = label;
  return a;
}

inline LossAdapter cross_entropy_to_dist(VectorXd target) {
  LossAdapter a;
  a.kind = LossKind::cross_entropy_target;
  a.target_dist = std::move(target);
  return a;
}

namespace detail {

inline double floored(double p) { return p < kProbFloor ? kProbFloor : p; }

inline double adapter_loss_probs(const LossAdapter& adapter, const VectorXd& p) {
  const int c = static_cast<int>(p.size());
  double base = 0.0;
  switch (adapter.kind) {
    case LossKind::cross_entropy_target:
      if (adapter.target_class >= 0) {
        base = -std::log(floored(p(adapter.target_class)));
      } else {
        for (int k = 0; k < c; ++k)
          if (adapter.target_dist(k) != 0.0)
            base -= adapter.target_dist(k) * std::log(floored(p(k)));
      }
      break;
    case LossKind::negative_class_logprob:
      base = -std::log(floored(p(adapter.target_class)));
      break;
    case LossKind::mean_negative_logprob:
      for (int k = 0; k < c; ++k) base -= std::log(floored(p(k)));
      base /= c;
      break;
    case LossKind::signed_msp:
      base = p(adapter.target_class);
      break;
  }
  return adapter.sign * base;
}

// dL/dp. Where the floor clamps, the clamped coordinate carries no
// gradient, matching finite differences of the clamped loss.
inline VectorXd adapter_grad_probs(const LossAdapter& adapter, const VectorXd& p) {
  const int c = static_cast<int>(p.size());
  VectorXd g = VectorXd::Zero(c);
  switch (adapter.kind) {
    case LossKind::cross_entropy_target:
      if (adapter.target_class >= 0) {
        if (p(adapter.target_class) >= kProbFloor)
          g(adapter.target_class) = -1.0 / p(adapter.target_class);
      } else {
        for (int k = 0; k < c; ++k)
          if (adapter.target_dist(k) != 0.0 && p(k) >= kProbFloor)
            g(k) = -adapter.target_dist(k) / p(k);
      }
      break;
    case LossKind::negative_class_logprob:
      if (p(adapter.target_class) >= kProbFloor)
        g(adapter.target_class) = -1.0 / p(adapter.target_class);
      break;
    case LossKind::mean_negative_logprob:
      for (int k = 0; k < c; ++k)
        if (p(k) >= kProbFloor) g(k) = -1.0 / (c * p(k));
      break;
    case LossKind::signed_msp:
      g(adapter.target_class) = 1.0;
      break;
  }
  return adapter.sign * g;
}

}  // namespace detail

inline double loss_value(const ModelParams& params, const VectorXd& x,
                         const LossAdapter& adapter) {
  adapter.validate(params.num_classes());
  return detail::adapter_loss_probs(adapter, forward(params, x));
}

/// Gradient of the mean per-sample adapter loss, same shapes as the model.
struct ParamGrad {
  std::vector<MatrixXd> weight;
  std::vector<VectorXd> bias;
};

namespace detail {

// Shared reverse pass. Fills dx (d x B) if grad_x, accumulates parameter
// gradients (summed over the batch) if grad_p.
inline void backward_batch(const ModelParams& params, const MatrixXd& x,
                           const std::vector<LossAdapter>& adapters,
                           const ForwardTrace& trace, const MatrixXd& probs,
                           MatrixXd* dx, ParamGrad* grad_p) {
  const int batch = static_cast<int>(x.cols());
  const std::size_t L = params.layers.size();

  // dL/dlogits via the softmax Jacobian: p .* (g - <g, p>).
  MatrixXd delta(probs.rows(), batch);
  for (int j = 0; j < batch; ++j) {
    VectorXd g = adapter_grad_probs(adapters[j], probs.col(j));
    double dot = g.dot(probs.col(j));
    delta.col(j) = (probs.col(j).array() * (g.array() - dot)).matrix();
  }

  if (grad_p) {
    grad_p->weight.resize(L);
    grad_p->bias.resize(L);
  }
  for (std::size_t k = L; k-- > 0;) {
    const MatrixXd& input = (k == 0) ? x : trace.activation[k - 1];
    if (grad_p) {
      grad_p->weight[k] = delta * input.transpose();
      grad_p->bias[k] = delta.rowwise().sum();
    }
    if (k == 0) {
      if (dx) *dx = params.layers[0].weight.transpose() * delta;
    } else {
      MatrixXd back = params.layers[k].weight.transpose() * delta;
      delta = back.cwiseProduct(activation_deriv(params.layers[k - 1].act, trace.pre_act[k - 1]));
    }
  }
}

}  // namespace detail

/// d(adapter loss)/dx for a batch; columns are samples.
inline MatrixXd grad_input_batch(const ModelParams& params, const MatrixXd& x,
                                 const std::vector<LossAdapter>& adapters) {
  if (static_cast<int>(adapters.size()) != x.cols())
    throw ConfigError("grad_input_batch: one adapter per sample required");
  for (const auto& a : adapters) a.validate(params.num_classes());
  ForwardTrace trace;
  MatrixXd probs = forward_batch(params, x, &trace);
  MatrixXd dx;
  detail::backward_batch(params, x, adapters, trace, probs, &dx, nullptr);
  return dx;
}

inline VectorXd grad_input(const ModelParams& params, const VectorXd& x,
                           const LossAdapter& adapter) {
  return grad_input_batch(params, x, std::vector<LossAdapter>{adapter});
}

/// Gradient of the mean per-sample loss over the batch.
inline ParamGrad grad_params(const ModelParams& params, const MatrixXd& x,
                             const std::vector<LossAdapter>& adapters) {
  if (x.cols() == 0) throw ConfigError("grad_params: empty batch");
  if (static_cast<int>(adapters.size()) != x.cols())
    throw ConfigError("grad_params: one adapter per sample required");
  for (const auto& a : adapters) a.validate(params.num_classes());
  ForwardTrace trace;
  MatrixXd probs = forward_batch(params, x, &trace);
  ParamGrad g;
  detail::backward_batch(params, x, adapters, trace, probs, nullptr, &g);
  const double inv = 1.0 / static_cast<double>(x.cols());
  for (auto& w : g.weight) w *= inv;
  for (auto& b : g.bias) b *= inv;
  return g;
}

/// Mean adapter loss over a batch (no gradients).
inline double batch_mean_loss(const ModelParams& params, const MatrixXd& x,
                              const std::vector<LossAdapter>& adapters) {
  MatrixXd probs = forward_batch(params, x);
  double total = 0.0;
  for (int j = 0; j < x.cols(); ++j)
    total += detail::adapter_loss_probs(adapters[j], probs.col(j));
  return total / static_cast<double>(x.cols());
}

}  // namespace uncspan
