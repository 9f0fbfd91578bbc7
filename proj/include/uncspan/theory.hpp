#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "uncspan/attack.hpp"
#include "uncspan/data.hpp"
#include "uncspan/metrics.hpp"
#include "uncspan/nn.hpp"
#include "uncspan/parallel.hpp"

namespace uncspan {

/// The population cross-entropy optimum without an attacker: a standard-
/// trained classifier converges to the true posterior itself.
inline double optimal_alpha_clean(double z) {
  if (!(z >= 0.0 && z <= 1.0)) throw ConfigError("optimal_alpha_clean: z must be in [0,1]");
  return z;
}

/// The equilibrium of adversarial training against an attacker that can
/// shift the predicted probability by beta: alpha = z - beta * (2z - 1).
/// The adversarial loss requires alpha - beta > 0 and 1 - alpha - beta > 0,
/// which caps beta below 0.5.
inline double optimal_alpha_adv(double z, double beta) {
  if (!(z >= 0.0 && z <= 1.0)) throw ConfigError("optimal_alpha_adv: z must be in [0,1]");
  if (!(beta >= 0.0 && beta < 0.5))
    throw ConfigError("optimal_alpha_adv: beta must be in [0, 0.5)");
  return z - beta * (2.0 * z - 1.0);
}

/// Independent oracle for the adversarial optimum: argmin of
/// -z*log(alpha - beta) - (1-z)*log(1 - alpha - beta) over a uniform grid
/// of alpha in (beta, 1 - beta), endpoints excluded by a half-step inset.
/// Accurate to within one grid step of the true optimum.
inline double grid_oracle_alpha(double z, double beta, long grid_n) {
  if (grid_n < 3) throw ConfigError("grid_oracle_alpha: grid_n must be >= 3");
  if (!(z >= 0.0 && z <= 1.0)) throw ConfigError("grid_oracle_alpha: z must be in [0,1]");
  if (!(beta >= 0.0 && beta < 0.5))
    throw ConfigError("grid_oracle_alpha: beta must be in [0, 0.5)");
  const double width = 1.0 - 2.0 * beta;
  const double h = width / static_cast<double>(grid_n);
  double best_loss = std::numeric_limits<double>::infinity();
  long best_i = 0;
  for (long i = 0; i < grid_n; ++i) {
    const double a_off = (i + 0.5) * h;    // alpha - beta
    const double b_off = width - a_off;    // 1 - alpha - beta
    const double l1 = std::log(a_off);
    const double l2 = std::log(b_off);
    const double loss = -z * l1 - (1.0 - z) * l2;
    if (loss < best_loss) {
      best_loss = loss;
      best_i = i;
    }
  }
  return beta + (best_i + 0.5) * h;
}

/// Entropy excess of the adversarial-training optimum over the clean one;
/// nonnegative for every z and admissible beta.
inline double entropy_gap(double z, double beta) {
  const double alpha_r = optimal_alpha_adv(z, beta);
  return binary_entropy(alpha_r) - binary_entropy(z);
}

/// Attack strength for one class: |f_c(x) - f_c(x + delta)| / sqrt(2).
inline double estimate_beta(const ModelParams& params, const VectorXd& x,
                            const VectorXd& delta, int class_index) {
  if (class_index < 0 || class_index >= params.num_classes())
    throw ConfigError("estimate_beta: class index out of range");
  ProbVector before = forward(params, x);
  ProbVector after = forward(params, x + delta);
  return std::abs(before(class_index) - after(class_index)) / std::sqrt(2.0);
}

/// Worst-case attack strength over all classes.
inline double estimate_beta_worst(const ModelParams& params, const VectorXd& x,
                                  const VectorXd& delta) {
  double beta = 0.0;
  for (int c = 0; c < params.num_classes(); ++c)
    beta = std::max(beta, estimate_beta(params, x, delta, c));
  return beta;
}

/// Empirical attack strength of a model: for each class c, PGD minimizes
/// f_c directly, and the worst per-class probability shift (scaled by
/// 1/sqrt(2)) is averaged over the probe set.
inline double estimate_beta_mean(const ModelParams& params, const Eigen::MatrixXd& probes,
                                 const AttackConfig& atk, int threads = 1) {
  const long n = probes.rows();
  if (n == 0) throw ConfigError("estimate_beta_mean: empty probe set");
  LabeledDataset probe_ds;
  probe_ds.features = probes;
  probe_ds.labels = VectorXi::Zero(n);
  probe_ds.row_ids = iota_ids(n);
  probe_ds.num_classes = params.num_classes();

  MatrixXd clean = predict_probs(params, probes);
  std::vector<double> worst(n, 0.0);
  for (int c = 0; c < params.num_classes(); ++c) {
    // Minimize f_c: descend on +log f_c.
    AdapterFactory factory = [c](const ModelParams&, const VectorXd&, int, int) {
      LossAdapter a;
      a.kind = LossKind::negative_class_logprob;
      a.target_class = c;
      a.sign = -1.0;
      return a;
    };
    DatasetAttackResult res = attack_dataset(params, probe_ds, factory, atk, threads);
    MatrixXd attacked = predict_probs(params, res.perturbed.features);
    for (long i = 0; i < n; ++i)
      worst[i] = std::max(worst[i], std::abs(clean(i, c) - attacked(i, c)) / std::sqrt(2.0));
  }
  double s = 0.0;
  for (double w : worst) s += w;
  return s / static_cast<double>(n);
}

struct EquilibriumPoint {
  double z = 0.0;
  double beta = 0.0;
  double alpha_closed = 0.0;
  double alpha_oracle = 0.0;
  double entropy_standard = 0.0;
  double entropy_robust = 0.0;

  double gap() const { return entropy_robust - entropy_standard; }
};

/// Full (z, beta) lattice comparing the closed-form optimum to the grid
/// oracle. The per-beta log tables are shared across z values; the scan
/// uses the same expression as grid_oracle_alpha, so results match it bit
/// for bit.
inline std::vector<EquilibriumPoint> equilibrium_lattice(const std::vector<double>& z_values,
                                                   const std::vector<double>& beta_values,
                                                   long grid_n, int threads = 1) {
  if (grid_n < 3) throw ConfigError("equilibrium_lattice: grid_n must be >= 3");
  std::vector<EquilibriumPoint> points(z_values.size() * beta_values.size());

  for (std::size_t bi = 0; bi < beta_values.size(); ++bi) {
    const double beta = beta_values[bi];
    if (!(beta >= 0.0 && beta < 0.5))
      throw ConfigError("equilibrium_lattice: beta must be in [0, 0.5)");
    const double width = 1.0 - 2.0 * beta;
    const double h = width / static_cast<double>(grid_n);
    std::vector<double> l1(grid_n), l2(grid_n);
    for (long i = 0; i < grid_n; ++i) {
      const double a_off = (i + 0.5) * h;
      const double b_off = width - a_off;
      l1[i] = std::log(a_off);
      l2[i] = std::log(b_off);
    }

    parallel_for(z_values.size(), threads, [&](std::size_t zi) {
      const double z = z_values[zi];
      double best_loss = std::numeric_limits<double>::infinity();
      long best_i = 0;
      for (long i = 0; i < grid_n; ++i) {
        const double loss = -z * l1[i] - (1.0 - z) * l2[i];
        if (loss < best_loss) {
          best_loss = loss;
          best_i = i;
        }
      }
      EquilibriumPoint& pt = points[bi * z_values.size() + zi];
      pt.z = z;
      pt.beta = beta;
      pt.alpha_closed = optimal_alpha_adv(z, beta);
      pt.alpha_oracle = beta + (best_i + 0.5) * h;
      pt.entropy_standard = binary_entropy(z);
      pt.entropy_robust = binary_entropy(pt.alpha_closed);
    });
  }
  return points;
}

/// Probe points along the axis through the two class-mean centroids,
/// spanning 4 sigma beyond the extreme means; t is the signed coordinate
/// along that axis, measured from the overall centroid.
struct ProbeGrid {
  Eigen::MatrixXd features;  // [n x d]
  VectorXd t;                // [n]
};

inline ProbeGrid make_probe_grid(const MixtureSpec& spec, long count = 2001,
                                 double margin_sigmas = 4.0) {
  spec.validate();
  if (spec.num_classes() != 2)
    throw ConfigError("make_probe_grid: binary specs only");
  if (count < 2) throw ConfigError("make_probe_grid: count must be >= 2");

  VectorXd mean0 = VectorXd::Zero(spec.feature_dim), mean1 = VectorXd::Zero(spec.feature_dim);
  double w0 = 0.0, w1 = 0.0, sigma_max = 0.0;
  for (const auto& comp : spec.components) {
    if (comp.label == 0) {
      mean0 += comp.weight * comp.mean;
      w0 += comp.weight;
    } else {
      mean1 += comp.weight * comp.mean;
      w1 += comp.weight;
    }
    sigma_max = std::max(sigma_max, comp.sigma);
  }
  mean0 /= w0;
  mean1 /= w1;
  VectorXd axis = mean1 - mean0;
  if (axis.norm() < 1e-12) throw ConfigError("make_probe_grid: coincident class means");
  axis.normalize();
  VectorXd center = 0.5 * (mean0 + mean1);

  double t0 = (mean0 - center).dot(axis) - margin_sigmas * sigma_max;
  double t1 = (mean1 - center).dot(axis) + margin_sigmas * sigma_max;

  ProbeGrid grid;
  grid.features.resize(count, spec.feature_dim);
  grid.t.resize(count);
  for (long i = 0; i < count; ++i) {
    double t = t0 + (t1 - t0) * static_cast<double>(i) / static_cast<double>(count - 1);
    grid.t(i) = t;
    grid.features.row(i) = (center + t * axis).transpose();
  }
  return grid;
}

struct ConvergenceRow {
  double t = 0.0;            // coordinate along the probe axis
  double z = 0.0;            // true posterior of class 1
  double alpha_model = 0.0;  // model probability of class 1
  double target = 0.0;       // z (standard) or z - beta*(2z-1) (adversarial)
  double abs_dev = 0.0;
};

struct ConvergenceReport {
  double mean_abs_dev = 0.0;
  double max_abs_dev = 0.0;
  std::vector<ConvergenceRow> rows;
};

/// Compares the trained model's class-1 probability on each probe point
/// against the predicted training-mode optimum.
inline ConvergenceReport convergence_check(const ModelParams& params, const MixtureSpec& spec,
                                           const ProbeGrid& grid, TrainMode mode,
                                           double beta_estimate = 0.0) {
  if (spec.num_classes() != 2 || params.num_classes() != 2)
    throw ConfigError("convergence_check: binary problems only");
  if (mode == TrainMode::adversarial && !(beta_estimate >= 0.0 && beta_estimate < 0.5))
    throw ConfigError("convergence_check: beta estimate must be in [0, 0.5)");

  MatrixXd probs = predict_probs(params, grid.features);
  ConvergenceReport report;
  report.rows.resize(grid.features.rows());
  double sum = 0.0;
  for (long i = 0; i < grid.features.rows(); ++i) {
    ConvergenceRow& row = report.rows[i];
    row.t = grid.t(i);
    row.z = true_posterior(spec, grid.features.row(i).transpose())(1);
    row.alpha_model = probs(i, 1);
    row.target = (mode == TrainMode::standard) ? row.z
                                               : optimal_alpha_adv(row.z, beta_estimate);
    row.abs_dev = std::abs(row.alpha_model - row.target);
    sum += row.abs_dev;
    report.max_abs_dev = std::max(report.max_abs_dev, row.abs_dev);
  }
  report.mean_abs_dev = sum / static_cast<double>(report.rows.size());
  return report;
}

}  // namespace uncspan
