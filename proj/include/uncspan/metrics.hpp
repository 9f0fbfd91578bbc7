#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "uncspan/attack.hpp"
#include "uncspan/data.hpp"
#include "uncspan/nn.hpp"
#include "uncspan/train.hpp"

namespace uncspan {

/// Predictive entropy in nats, with 0 * ln 0 := 0.
inline double entropy(const VectorXd& p) {
  double h = 0.0;
  for (int i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  return h;
}

inline double binary_entropy(double p) {
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log(1.0 - p);
  return h;
}

/// Per-sample uncertainty span: the entropies reachable inside the
/// epsilon ball, bounded below by the over-confidence attack and above by
/// the under-confidence attack.
struct SpanRecord {
  int row_id = 0;
  double clean_entropy = 0.0;
  double u_low = 0.0;
  double u_high = 0.0;
  bool failed = false;

  double width() const { return u_high - u_low; }
};

namespace detail {

inline ScoreFn entropy_score(double direction) {
  return [direction](const VectorXd& probs, double /*loss*/, int /*col*/) {
    return direction * entropy(probs);
  };
}

}  // namespace detail

/// Runs the over- and under-confidence attacks with a shared config and
/// fills a SpanRecord. Candidates are ranked by the entropy itself (the
/// cross-entropy adapters only steer the gradient steps), and delta = 0 is
/// always in the candidate set, so u_low <= clean_entropy <= u_high holds
/// exactly.
inline SpanRecord uncertainty_span(const ModelParams& params, const VectorXd& x,
                                   const AttackConfig& cfg) {
  SpanRecord rec;
  rec.clean_entropy = entropy(forward(params, x));
  AttackOutcome over =
      pgd(params, x, adapter_overconfidence(params, x), cfg, nullptr, detail::entropy_score(+1.0));
  rec.u_low = entropy(forward(params, x + over.delta));
  AttackOutcome under = pgd(params, x, adapter_underconfidence(params.num_classes()), cfg,
                            nullptr, detail::entropy_score(-1.0));
  rec.u_high = entropy(forward(params, x + under.delta));
  rec.failed = over.failed || under.failed;
  return rec;
}

/// Span records for a whole dataset over a warm-started ascending epsilon
/// sweep. Warm starting makes u_low non-increasing and u_high
/// non-decreasing in epsilon for every sample.
inline std::vector<std::vector<SpanRecord>> span_sweep(const ModelParams& params,
                                                       const LabeledDataset& data,
                                                       AttackConfig base_cfg,
                                                       const std::vector<double>& epsilons,
                                                       int threads = 1) {
  data.validate();
  AdapterFactory over_factory = [](const ModelParams& p, const VectorXd& x, int, int) {
    return adapter_overconfidence(p, x);
  };
  AdapterFactory under_factory = [](const ModelParams& p, const VectorXd&, int, int) {
    return adapter_underconfidence(p.num_classes());
  };
  std::vector<DatasetAttackResult> over = attack_sweep(params, data, over_factory, base_cfg,
                                                       epsilons, threads,
                                                       detail::entropy_score(+1.0));
  std::vector<DatasetAttackResult> under = attack_sweep(params, data, under_factory, base_cfg,
                                                        epsilons, threads,
                                                        detail::entropy_score(-1.0));

  MatrixXd clean_probs = predict_probs(params, data.features);
  std::vector<std::vector<SpanRecord>> out(epsilons.size());
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    MatrixXd over_probs = predict_probs(params, over[e].perturbed.features);
    MatrixXd under_probs = predict_probs(params, under[e].perturbed.features);
    out[e].resize(data.size());
    for (long i = 0; i < data.size(); ++i) {
      SpanRecord& rec = out[e][i];
      rec.row_id = data.row_ids(i);
      rec.clean_entropy = entropy(clean_probs.row(i).transpose());
      rec.u_low = entropy(over_probs.row(i).transpose());
      rec.u_high = entropy(under_probs.row(i).transpose());
      rec.failed = over[e].records[i].outcome.failed || under[e].records[i].outcome.failed;
    }
  }
  return out;
}

/// Mean of the uncertainty spans.
inline double mus(const std::vector<SpanRecord>& records) {
  if (records.empty()) throw ConfigError("mus: empty record sequence");
  double s = 0.0;
  for (const auto& r : records) s += r.width();
  return s / static_cast<double>(records.size());
}

/// Mean of the squared uncertainty spans.
inline double msus(const std::vector<SpanRecord>& records) {
  if (records.empty()) throw ConfigError("msus: empty record sequence");
  double s = 0.0;
  for (const auto& r : records) s += r.width() * r.width();
  return s / static_cast<double>(records.size());
}

/// Equal-width confidence buckets. Bucket s covers [s/S, (s+1)/S), with
/// the last bucket closed at 1. The expected probability is the interval
/// midpoint (2s+1)/(2S); the observed one is the bucket accuracy.
struct CalibrationBins {
  int buckets = 0;
  std::vector<long> mass;
  std::vector<long> correct;

  long total() const {
    long t = 0;
    for (long m : mass) t += m;
    return t;
  }
  double expected(int s) const { return (2.0 * s + 1.0) / (2.0 * buckets); }
  double observed(int s) const {
    return mass[s] == 0 ? 0.0 : static_cast<double>(correct[s]) / static_cast<double>(mass[s]);
  }
};

inline CalibrationBins calibration_bins(const std::vector<double>& confidences,
                                        const std::vector<char>& is_correct, int buckets) {
  if (confidences.size() != is_correct.size() || confidences.empty())
    throw ConfigError("calibration_bins: sequences must be nonempty and equally long");
  if (buckets < 1) throw ConfigError("calibration_bins: buckets must be >= 1");
  CalibrationBins bins;
  bins.buckets = buckets;
  bins.mass.assign(buckets, 0);
  bins.correct.assign(buckets, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0))
      throw ConfigError("calibration_bins: confidence out of [0,1]");
    int s = std::min(buckets - 1, static_cast<int>(c * buckets));
    ++bins.mass[s];
    if (is_correct[i]) ++bins.correct[s];
  }
  return bins;
}

/// Expected calibration error: mass-weighted |observed - expected|.
inline double ece(const CalibrationBins& bins) {
  const double n = static_cast<double>(bins.total());
  double e = 0.0;
  for (int s = 0; s < bins.buckets; ++s) {
    if (bins.mass[s] == 0) continue;
    e += bins.mass[s] / n * std::abs(bins.observed(s) - bins.expected(s));
  }
  return e;
}

/// Signed ECE: mass-weighted (observed - expected), so an over-confident
/// model (confidence above accuracy) scores negative and an
/// under-confident one positive.
inline double signed_ece(const CalibrationBins& bins) {
  const double n = static_cast<double>(bins.total());
  double e = 0.0;
  for (int s = 0; s < bins.buckets; ++s) {
    if (bins.mass[s] == 0) continue;
    e += bins.mass[s] / n * (bins.observed(s) - bins.expected(s));
  }
  return e;
}

struct DetectionMetrics {
  double auroc = 0.0;
  double aupr_in = 0.0;
  double aupr_out = 0.0;
  double fpr_at_95_tpr = 0.0;
};

namespace detail {

// AUROC via midranks; ties count one half.
inline double auroc_rank(const std::vector<double>& scores_in,
                         const std::vector<double>& scores_out) {
  struct Item {
    double score;
    bool out;
  };
  std::vector<Item> items;
  items.reserve(scores_in.size() + scores_out.size());
  for (double s : scores_in) items.push_back({s, false});
  for (double s : scores_out) items.push_back({s, true});
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score < b.score; });

  double rank_sum_out = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (items[k].out) rank_sum_out += midrank;
    i = j;
  }
  const double n_out = static_cast<double>(scores_out.size());
  const double n_in = static_cast<double>(scores_in.size());
  return (rank_sum_out - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out);
}

// Average precision by step integration of precision over recall, with a
// threshold at every distinct score; a higher score predicts positive.
inline double average_precision(const std::vector<double>& pos, const std::vector<double>& neg) {
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(pos.size() + neg.size());
  for (double s : pos) items.push_back({s, true});
  for (double s : neg) items.push_back({s, false});
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score > b.score; });

  const double total_pos = static_cast<double>(pos.size());
  long tp = 0, fp = 0;
  double ap = 0.0, prev_recall = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    long dtp = 0, dfp = 0;
    while (j < items.size() && items[j].score == items[i].score) {
      if (items[j].positive) ++dtp;
      else ++dfp;
      ++j;
    }
    tp += dtp;
    fp += dfp;
    double recall = tp / total_pos;
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

}  // namespace detail

/// Outlier-detection metrics over entropy-like scores; a higher score
/// means "more outlier-like", and OUT is the positive class for AUROC and
/// AUPR-OUT (AUPR-IN treats low scores as positive). FPR95TPR is the
/// in-distribution false-positive rate at the largest threshold whose
/// outlier true-positive rate reaches 0.95.
inline DetectionMetrics detection_metrics(const std::vector<double>& scores_in,
                                          const std::vector<double>& scores_out) {
  if (scores_in.empty() || scores_out.empty())
    throw ConfigError("detection_metrics: both score sequences must be nonempty");
  DetectionMetrics m;
  m.auroc = detail::auroc_rank(scores_in, scores_out);
  m.aupr_out = detail::average_precision(scores_out, scores_in);
  std::vector<double> neg_in(scores_in), neg_out(scores_out);
  for (double& s : neg_in) s = -s;
  for (double& s : neg_out) s = -s;
  m.aupr_in = detail::average_precision(neg_in, neg_out);

  std::vector<double> out_sorted(scores_out);
  std::sort(out_sorted.begin(), out_sorted.end(), std::greater<double>());
  const long n_out = static_cast<long>(out_sorted.size());
  long k = static_cast<long>(std::ceil(0.95 * static_cast<double>(n_out)));
  k = std::max<long>(1, std::min(n_out, k));
  const double threshold = out_sorted[k - 1];
  long false_pos = 0;
  for (double s : scores_in)
    if (s >= threshold) ++false_pos;
  m.fpr_at_95_tpr = static_cast<double>(false_pos) / static_cast<double>(scores_in.size());
  return m;
}

}  // namespace uncspan
