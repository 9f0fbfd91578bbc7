#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "uncspan/metrics.hpp"

using namespace uncspan;

TEST_CASE("entropy: one-hot, uniform, and a direct value") {
  VectorXd onehot = (VectorXd(3) << 0.0, 1.0, 0.0).finished();
  REQUIRE(entropy(onehot) == 0.0);
  VectorXd uniform = VectorXd::Constant(5, 0.2);
  REQUIRE(entropy(uniform) == Catch::Approx(std::log(5.0)).margin(1e-15));
  VectorXd p = (VectorXd(2) << 0.75, 0.25).finished();
  double want = -0.75 * std::log(0.75) - 0.25 * std::log(0.25);
  REQUIRE(entropy(p) == Catch::Approx(want).margin(1e-15));
}

TEST_CASE("entropy: bounded by [0, ln c] on random probability vectors") {
  std::mt19937_64 eng(5);
  for (int trial = 0; trial < 200; ++trial) {
    int c = 2 + static_cast<int>(eng() % 5);
    VectorXd p = oracles::random_vector(eng, c, 0.0, 1.0);
    p = p.cwiseAbs();
    p /= p.sum();
    double h = entropy(p);
    REQUIRE(h >= 0.0);
    REQUIRE(h <= std::log(static_cast<double>(c)) + 1e-12);
  }
}

TEST_CASE("mus/msus: arithmetic and the empty-input contract") {
  auto rec = [](double lo, double hi) {
    SpanRecord r;
    r.u_low = lo;
    r.u_high = hi;
    return r;
  };
  std::vector<SpanRecord> zero = {rec(0.3, 0.3), rec(0.1, 0.1)};
  REQUIRE(mus(zero) == 0.0);
  REQUIRE(msus(zero) == 0.0);
  std::vector<SpanRecord> single = {rec(0.2, 0.45)};
  REQUIRE(mus(single) == Catch::Approx(0.25).margin(1e-15));
  REQUIRE(msus(single) == Catch::Approx(0.0625).margin(1e-15));
  std::vector<SpanRecord> two = {rec(0.0, 0.1), rec(0.0, 0.3)};
  REQUIRE(mus(two) == Catch::Approx(0.2).margin(1e-15));
  REQUIRE(msus(two) == Catch::Approx(0.05).margin(1e-15));
  REQUIRE_THROWS_AS(mus({}), ConfigError);
  REQUIRE_THROWS_AS(msus({}), ConfigError);
}

TEST_CASE("mus/msus: Jensen inequality") {
  std::mt19937_64 eng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SpanRecord> recs;
    int n = 1 + static_cast<int>(eng() % 20);
    for (int i = 0; i < n; ++i) {
      SpanRecord r;
      r.u_low = 0.0;
      r.u_high = std::uniform_real_distribution<double>(0.0, 1.5)(eng);
      recs.push_back(r);
    }
    REQUIRE(msus(recs) >= 0.0);
    REQUIRE(msus(recs) >= mus(recs) * mus(recs) - 1e-12);
  }
}

TEST_CASE("calibration_bins: bucket construction") {
  // S=2, every sample at confidence 0.9 and correct.
  std::vector<double> conf(10, 0.9);
  std::vector<char> correct(10, 1);
  CalibrationBins bins = calibration_bins(conf, correct, 2);
  REQUIRE(bins.mass[0] == 0);
  REQUIRE(bins.mass[1] == 10);
  REQUIRE(bins.expected(1) == Catch::Approx(0.75).margin(1e-15));
  REQUIRE(bins.observed(1) == 1.0);
  REQUIRE(ece(bins) == Catch::Approx(0.25).margin(1e-15));

  // Confidence exactly 1.0 lands in the last (closed) bucket.
  CalibrationBins edge = calibration_bins({1.0}, {1}, 15);
  REQUIRE(edge.mass[14] == 1);

  // Empty buckets contribute nothing.
  CalibrationBins partial = calibration_bins({0.1, 0.1}, {1, 0}, 10);
  REQUIRE(ece(partial) == Catch::Approx(std::abs(0.5 - 0.15)).margin(1e-15));
}

TEST_CASE("calibration_bins: input validation") {
  REQUIRE_THROWS_AS(calibration_bins({}, {}, 10), ConfigError);
  REQUIRE_THROWS_AS(calibration_bins({0.5}, {1, 0}, 10), ConfigError);
  REQUIRE_THROWS_AS(calibration_bins({1.5}, {1}, 10), ConfigError);
}

TEST_CASE("ece/signed_ece: perfectly calibrated buckets give zero") {
  // Four samples at confidence 0.75, three correct: ob == ex == 0.75.
  std::vector<double> conf(4, 0.75);
  std::vector<char> correct = {1, 1, 1, 0};
  CalibrationBins bins = calibration_bins(conf, correct, 2);
  REQUIRE(ece(bins) == 0.0);
  REQUIRE(signed_ece(bins) == 0.0);
}

TEST_CASE("signed_ece: fully confident and always wrong is maximally over-confident") {
  const int S = 15;
  std::vector<double> conf(20, 1.0);
  std::vector<char> correct(20, 0);
  CalibrationBins bins = calibration_bins(conf, correct, S);
  double want = 0.0 - (2.0 * (S - 1) + 1.0) / (2.0 * S);
  REQUIRE(signed_ece(bins) == Catch::Approx(want).margin(1e-15));
  REQUIRE(signed_ece(bins) < 0.0);
}

TEST_CASE("ece/signed_ece: match brute-force recomputation exactly") {
  std::mt19937_64 eng(11);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + static_cast<int>(eng() % 60);
    int S = 1 + static_cast<int>(eng() % 20);
    std::vector<double> conf(n);
    std::vector<char> correct(n);
    for (int i = 0; i < n; ++i) {
      conf[i] = u01(eng);
      correct[i] = static_cast<char>(eng() & 1);
    }
    CalibrationBins bins = calibration_bins(conf, correct, S);
    auto [want_abs, want_signed] = oracles::brute_force_ece(conf, correct, S);
    REQUIRE(ece(bins) == want_abs);
    REQUIRE(signed_ece(bins) == want_signed);
    REQUIRE(std::abs(signed_ece(bins)) <= ece(bins) + 1e-15);
  }
}

TEST_CASE("detection_metrics: separated and identical score distributions") {
  std::vector<double> in = {0.1, 0.2, 0.3};
  std::vector<double> out = {0.9, 1.1, 1.5};
  DetectionMetrics m = detection_metrics(in, out);
  REQUIRE(m.auroc == 1.0);
  REQUIRE(m.aupr_in == 1.0);
  REQUIRE(m.aupr_out == 1.0);
  REQUIRE(m.fpr_at_95_tpr == 0.0);

  std::vector<double> same = {0.4, 0.5, 0.6};
  DetectionMetrics tie = detection_metrics(same, same);
  REQUIRE(tie.auroc == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("detection_metrics: empty side is rejected") {
  REQUIRE_THROWS_AS(detection_metrics({}, {1.0}), ConfigError);
  REQUIRE_THROWS_AS(detection_metrics({1.0}, {}), ConfigError);
}

TEST_CASE("detection_metrics: AUROC matches the pair-counting oracle") {
  std::mt19937_64 eng(13);
  std::uniform_int_distribution<int> val(0, 9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> in(50), out(50);
    // Coarse integer-valued scores force plenty of ties.
    for (auto& s : in) s = 0.1 * val(eng);
    for (auto& s : out) s = 0.1 * val(eng) + 0.2;
    DetectionMetrics m = detection_metrics(in, out);
    REQUIRE(m.auroc == Catch::Approx(oracles::pair_count_auroc(in, out)).margin(1e-12));
    DetectionMetrics swapped = detection_metrics(out, in);
    REQUIRE(m.auroc + swapped.auroc == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("detection_metrics: AUPR and FPR95TPR match exhaustive-threshold oracles") {
  std::mt19937_64 eng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> val(0, 12);
  for (int trial = 0; trial < 200; ++trial) {
    int n_in = 5 + static_cast<int>(eng() % 60);
    int n_out = 5 + static_cast<int>(eng() % 60);
    std::vector<double> in(n_in), out(n_out);
    bool coarse = (trial % 2) == 0;
    for (auto& s : in) s = coarse ? 0.1 * val(eng) : u(eng);
    for (auto& s : out) s = coarse ? 0.1 * val(eng) + 0.15 : u(eng) + 0.2;
    DetectionMetrics m = detection_metrics(in, out);
    REQUIRE(m.aupr_out ==
            Catch::Approx(oracles::exhaustive_average_precision(out, in)).margin(1e-12));
    std::vector<double> neg_in(in), neg_out(out);
    for (auto& s : neg_in) s = -s;
    for (auto& s : neg_out) s = -s;
    REQUIRE(m.aupr_in ==
            Catch::Approx(oracles::exhaustive_average_precision(neg_in, neg_out)).margin(1e-12));
    REQUIRE(m.fpr_at_95_tpr ==
            Catch::Approx(oracles::exhaustive_fpr_at_95_tpr(in, out)).margin(1e-12));
  }
}
