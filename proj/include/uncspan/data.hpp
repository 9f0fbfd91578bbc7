#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uncspan/common.hpp"
#include "uncspan/nn.hpp"
#include "uncspan/rng.hpp"

namespace uncspan {

using Eigen::VectorXi;

struct MixtureComponent {
  int label = 0;
  VectorXd mean;
  double sigma = 1.0;   // isotropic stddev
  double weight = 1.0;
};

/// Gaussian mixture with class labels; the Bayes posterior p(y|x) is
/// available in closed form, which is what the convergence checks need.
struct MixtureSpec {
  std::vector<MixtureComponent> components;
  int feature_dim = 0;

  int num_classes() const {
    int c = 0;
    for (const auto& comp : components) c = std::max(c, comp.label + 1);
    return c;
  }

  void validate() const {
    if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
    if (components.empty()) throw ConfigError("mixture needs at least one component");
    double wsum = 0.0;
    for (std::size_t i = 0; i < components.size(); ++i) {
      const auto& comp = components[i];
      if (comp.mean.size() != feature_dim)
        throw ConfigError("component " + std::to_string(i) + ": mean dim != feature_dim");
      if (!(comp.sigma > 0.0))
        throw ConfigError("component " + std::to_string(i) + ": sigma must be > 0");
      if (!(comp.weight > 0.0))
        throw ConfigError("component " + std::to_string(i) + ": weight must be > 0");
      if (comp.label < 0)
        throw ConfigError("component " + std::to_string(i) + ": negative label");
      wsum += comp.weight;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
      throw ConfigError("mixture weights must sum to 1");
    std::vector<bool> seen(num_classes(), false);
    for (const auto& comp : components) seen[comp.label] = true;
    int distinct = std::accumulate(seen.begin(), seen.end(), 0);
    if (distinct < 2) throw ConfigError("mixture needs at least 2 distinct class labels");
  }
};

/// Feature rows with integer labels. `num_classes` counts in-distribution
/// classes; rows may carry the sentinel label == num_classes, which marks
/// an outlier ("OUT") for the detection metrics. row_ids key per-sample
/// attack seeds, so shuffling rows does not change per-row results.
struct LabeledDataset {
  Eigen::MatrixXd features;  // [n x d]
  VectorXi labels;           // [n], in [0, num_classes]
  VectorXi row_ids;          // [n]
  int num_classes = 0;

  long size() const { return features.rows(); }
  int dim() const { return static_cast<int>(features.cols()); }

  void validate() const {
    if (features.rows() != labels.size() || features.rows() != row_ids.size())
      throw ConfigError("dataset: row count mismatch");
    if (!features.allFinite()) throw NumericalError("dataset: non-finite feature");
    for (long i = 0; i < labels.size(); ++i)
      if (labels(i) < 0 || labels(i) > num_classes)
        throw ConfigError("dataset: label out of range at row " + std::to_string(i));
  }
};

inline VectorXi iota_ids(long n) {
  VectorXi ids(n);
  for (long i = 0; i < n; ++i) ids(i) = static_cast<int>(i);
  return ids;
}

/// Draws n i.i.d. pairs; row i depends only on (seed, i), so datasets are
/// reproducible and order-stable.
inline LabeledDataset sample(const MixtureSpec& spec, long n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw ConfigError("sample: n must be >= 1");
  LabeledDataset ds;
  ds.features.resize(n, spec.feature_dim);
  ds.labels.resize(n);
  ds.row_ids = iota_ids(n);
  ds.num_classes = spec.num_classes();

  std::vector<double> cum(spec.components.size());
  double acc = 0.0;
  for (std::size_t c = 0; c < spec.components.size(); ++c) {
    acc += spec.components[c].weight;
    cum[c] = acc;
  }
  cum.back() = 1.0;

  for (long i = 0; i < n; ++i) {
    std::mt19937_64 eng = make_engine(derive_seed(seed, static_cast<std::uint64_t>(i)));
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(eng);
    std::size_t c = 0;
    while (c + 1 < cum.size() && u >= cum[c]) ++c;
    const MixtureComponent& comp = spec.components[c];
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int j = 0; j < spec.feature_dim; ++j)
      ds.features(i, j) = comp.mean(j) + comp.sigma * normal(eng);
    ds.labels(i) = comp.label;
  }
  return ds;
}

/// Exact Bayes posterior p(y|x) from the mixture densities, computed in
/// log space.
inline ProbVector true_posterior(const MixtureSpec& spec, const VectorXd& x) {
  if (x.size() != spec.feature_dim) throw ConfigError("true_posterior: dim mismatch");
  if (!x.allFinite()) throw NumericalError("true_posterior: non-finite input");
  const int c = spec.num_classes();
  const double kNegInf = -std::numeric_limits<double>::infinity();
  VectorXd class_log = VectorXd::Constant(c, kNegInf);
  for (const auto& comp : spec.components) {
    double log_dens = std::log(comp.weight) -
                      0.5 * spec.feature_dim * std::log(2.0 * M_PI * comp.sigma * comp.sigma) -
                      (x - comp.mean).squaredNorm() / (2.0 * comp.sigma * comp.sigma);
    double& slot = class_log(comp.label);
    if (slot == kNegInf) {
      slot = log_dens;
    } else {
      double m = std::max(slot, log_dens);
      slot = m + std::log(std::exp(slot - m) + std::exp(log_dens - m));
    }
  }
  double m = class_log.maxCoeff();
  VectorXd p = (class_log.array() - m).exp();
  // Classes with no component keep probability zero.
  for (int k = 0; k < c; ++k)
    if (class_log(k) == kNegInf) p(k) = 0.0;
  return p / p.sum();
}

namespace detail {

// Unit direction orthogonal to the affine span of the component means,
// chosen deterministically (highest-index basis vector first). Along such
// a direction the class posterior does not change, so samples displaced
// there are far from the data yet carry no class information. Returns
// false when the means span the full space.
inline bool uninformative_direction(const MixtureSpec& spec, VectorXd& dir,
                                    std::vector<VectorXd>* span_out = nullptr) {
  const int d = spec.feature_dim;
  VectorXd centroid = VectorXd::Zero(d);
  for (const auto& comp : spec.components) centroid += comp.mean;
  centroid /= static_cast<double>(spec.components.size());

  std::vector<VectorXd> span;
  for (const auto& comp : spec.components) {
    VectorXd v = comp.mean - centroid;
    for (const auto& b : span) v -= v.dot(b) * b;
    if (v.norm() > 1e-9) span.push_back(v.normalized());
  }
  if (span_out) *span_out = span;
  for (int j = d - 1; j >= 0; --j) {
    VectorXd v = VectorXd::Unit(d, j);
    for (const auto& b : span) v -= v.dot(b) * b;
    if (v.norm() > 1e-6) {
      dir = v.normalized();
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Builds the outlier evaluation sets. Both carry the sentinel label c.
///
/// OSR: the base mixture's components with every mean displaced by osr_offset
/// (near-distribution novel classes).
///
/// OOD: a Gaussian centered ood_scale * sigma_max away from the mean
/// centroid along a direction orthogonal to the span of the means, with
/// component-scale noise restricted to that uninformative subspace. For
/// equal-sigma specs the true posterior on this set equals the class
/// priors exactly. If the means span the whole feature space, the set
/// falls back to an isotropic cloud displaced along the first basis axis.
inline std::pair<LabeledDataset, LabeledDataset> make_osr_and_ood_sets(
    const MixtureSpec& spec, const VectorXd& osr_offset, double ood_scale,
    long n_out, std::uint64_t seed) {
  spec.validate();
  if (n_out < 1) throw ConfigError("make_osr_and_ood_sets: n_out must be >= 1");
  if (osr_offset.size() != spec.feature_dim)
    throw ConfigError("make_osr_and_ood_sets: osr_offset dim mismatch");
  const int d = spec.feature_dim;
  const int sentinel = spec.num_classes();

  MixtureSpec osr_spec = spec;
  for (auto& comp : osr_spec.components) comp.mean += osr_offset;
  LabeledDataset osr = sample(osr_spec, n_out, derive_seed(seed, "osr"));
  osr.labels.setConstant(sentinel);
  osr.num_classes = spec.num_classes();

  VectorXd centroid = VectorXd::Zero(d);
  double sigma_max = 0.0, sigma_mean = 0.0;
  for (const auto& comp : spec.components) {
    centroid += comp.mean;
    sigma_max = std::max(sigma_max, comp.sigma);
    sigma_mean += comp.weight * comp.sigma;
  }
  centroid /= static_cast<double>(spec.components.size());

  std::vector<VectorXd> span;
  VectorXd dir;
  bool has_orth = detail::uninformative_direction(spec, dir, &span);
  if (!has_orth) dir = VectorXd::Unit(d, 0);
  VectorXd center = centroid + ood_scale * sigma_max * dir;

  LabeledDataset ood;
  ood.features.resize(n_out, d);
  ood.labels = VectorXi::Constant(n_out, sentinel);
  ood.row_ids = iota_ids(n_out);
  ood.num_classes = spec.num_classes();
  const std::uint64_t ood_seed = derive_seed(seed, "ood");
  for (long i = 0; i < n_out; ++i) {
    std::mt19937_64 eng = make_engine(derive_seed(ood_seed, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    VectorXd noise(d);
    for (int j = 0; j < d; ++j) noise(j) = sigma_mean * normal(eng);
    if (has_orth)
      for (const auto& b : span) noise -= noise.dot(b) * b;
    ood.features.row(i) = (center + noise).transpose();
  }
  return {std::move(osr), std::move(ood)};
}

// Dataset CSV: header "d=<int>,c=<int>", then one row per sample,
// "x_1,...,x_d,label". Doubles use 17 significant digits (bit-exact
// round trip); the label may equal c (outlier sentinel).

inline void save_csv(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "d=" << ds.dim() << ",c=" << ds.num_classes << "\n";
  for (long i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < ds.dim(); ++j) out << fmt17(ds.features(i, j)) << ',';
    out << ds.labels(i) << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw ParseError("missing header", 1);
  int d = 0, c = 0;
  if (std::sscanf(line.c_str(), "d=%d,c=%d", &d, &c) != 2)
    throw ParseError("bad header '" + line + "' (want d=<int>,c=<int>)", 1);
  if (d < 1 || c < 2) throw ParseError("header dims out of range", 1);

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (static_cast<int>(cells.size()) != d + 1)
      throw ParseError("expected " + std::to_string(d + 1) + " cells, got " +
                       std::to_string(cells.size()), line_no);
    std::vector<double> row(d);
    for (int j = 0; j < d; ++j) row[j] = parse_double(cells[j], "feature", line_no);
    long label = parse_long(cells[d], "label", line_no);
    if (label < 0 || label > c)
      throw ParseError("label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(c) + "]", line_no);
    rows.push_back(std::move(row));
    labels.push_back(static_cast<int>(label));
  }
  if (rows.empty()) throw ParseError("no data rows", line_no);

  LabeledDataset ds;
  ds.features.resize(static_cast<long>(rows.size()), d);
  ds.labels.resize(static_cast<long>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < d; ++j) ds.features(static_cast<long>(i), j) = rows[i][j];
    ds.labels(static_cast<long>(i)) = labels[i];
  }
  ds.row_ids = iota_ids(ds.size());
  ds.num_classes = c;
  ds.validate();
  return ds;
}

}  // namespace uncspan
