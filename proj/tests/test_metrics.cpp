#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <random>
#include <sstream>

#include "npcl/metrics.hpp"

using namespace npcl;

namespace {

RunMatrix matrix3() {
  // acc rows: after task 0, 1, 2
  RunMatrix m(3);
  m.set(0, 0, 90, 0.1);
  m.set(1, 0, 80, 0.2);
  m.set(1, 1, 95, 0.1);
  m.set(2, 0, 70, 0.4);
  m.set(2, 1, 85, 0.3);
  m.set(2, 2, 99, 0.05);
  return m;
}

Prediction pred(std::uint32_t label, std::uint32_t majority, std::uint32_t task,
                std::vector<double> top1, std::vector<double> top2, std::vector<double> tcp) {
  Prediction p;
  p.true_label = label;
  p.majority_label = majority;
  p.pred_label = majority;
  p.true_task = task;
  p.top1_probs = std::move(top1);
  p.top2_probs = std::move(top2);
  p.true_class_probs = std::move(tcp);
  return p;
}

}  // namespace

TEST(RunMatrixType, FinalAccuracyAndBwt) {
  auto m = matrix3();
  EXPECT_NEAR(final_average_accuracy(m), (70 + 85 + 99) / 3.0, 1e-12);
  EXPECT_NEAR(bwt(m, Channel::acc), ((70 - 90) + (85 - 95)) / 2.0, 1e-12);
  EXPECT_NEAR(bwt(m, Channel::unc), 100 * ((0.4 - 0.1) + (0.3 - 0.1)) / 2.0, 1e-12);
}

TEST(RunMatrixType, MissingCellsAreErrors) {
  RunMatrix m(2);
  m.set(0, 0, 50, 0.1);
  EXPECT_FALSE(m.complete());
  EXPECT_FALSE(m.filled(1, 0));
  EXPECT_THROW(final_average_accuracy(m), MetricError);
  EXPECT_THROW(bwt(m, Channel::acc), MetricError);
  EXPECT_THROW(bwt(RunMatrix(1), Channel::acc), MetricError);
  EXPECT_THROW(m.set(0, 1, 1, 1), std::out_of_range);  // above the diagonal
}

TEST(RunMatrixType, JsonRoundTrip) {
  auto m = matrix3();
  auto back = RunMatrix::from_json(m.to_json());
  EXPECT_EQ(back.acc_rows(), m.acc_rows());
  EXPECT_EQ(back.unc_rows(), m.unc_rows());
}

TEST(Calibration, PerfectAndFlippedFixtures) {
  std::vector<CalibrationSample> perfect;
  for (int i = 0; i < 10; ++i) perfect.push_back({1.0, true});
  EXPECT_NEAR(ece(perfect), 0.0, 1e-15);
  EXPECT_NEAR(ace(perfect), 0.0, 1e-15);

  // Confidence 0.75 with 3/4 correct: calibrated.
  std::vector<CalibrationSample> cal{{0.75, true}, {0.75, true}, {0.75, true}, {0.75, false}};
  EXPECT_NEAR(ece(cal), 0.0, 1e-15);

  std::vector<CalibrationSample> wrong(8, {0.9, false});
  EXPECT_NEAR(ece(wrong), 0.9, 1e-15);
  EXPECT_NEAR(ace(wrong), 0.9, 1e-15);
}

TEST(Calibration, EceMatchesHandBinning) {
  std::vector<CalibrationSample> s{{0.05, false}, {0.5, true}, {0.52, false}, {0.99, true}, {1.0, true}};
  // bins of width 1/15: 0.05 -> 0, 0.5 and 0.52 -> 7, 0.99 and 1.0 -> 14
  double ref = (1.0 / 5) * 0.05 + (2.0 / 5) * std::abs(0.5 - 0.51) + (2.0 / 5) * std::abs(1.0 - 0.995);
  EXPECT_NEAR(ece(s), ref, 1e-14);
  auto bins = calibration_bins(s);
  EXPECT_EQ(bins[7].count, 2u);
  EXPECT_EQ(bins[14].count, 2u);
  EXPECT_THROW(ece(std::vector<CalibrationSample>{}), MetricError);
  EXPECT_THROW(ece(std::vector<CalibrationSample>{{1.5, true}}), MetricError);
}

TEST(Calibration, AceUsesEqualCountBins) {
  // 7 samples over 3 bins: sizes 3, 2, 2.
  std::vector<CalibrationSample> s{{0.1, false}, {0.2, false}, {0.3, true}, {0.6, true},
                                   {0.7, false}, {0.8, true}, {0.9, true}};
  double b0 = std::abs(1.0 / 3 - 0.2), b1 = std::abs(0.5 - 0.65), b2 = std::abs(1.0 - 0.85);
  EXPECT_NEAR(ace(s, 3), (b0 + b1 + b2) / 3, 1e-14);
  // More bins than samples: empty bins are skipped.
  std::vector<CalibrationSample> two{{0.2, true}, {0.4, false}};
  EXPECT_NEAR(ace(two, 15), (0.8 + 0.4) / 2, 1e-14);
}

TEST(Calibration, EceStaysInUnitInterval) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<CalibrationSample> s;
    for (int i = 0; i < 40; ++i) s.push_back({u(rng), u(rng) < 0.5});
    double e = ece(s), a = ace(s);
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Percentiles, LinearInterpolation) {
  std::vector<double> v{4, 1, 3, 2, 5};
  EXPECT_EQ(percentile(v, 0), 1.0);
  EXPECT_EQ(percentile(v, 100), 5.0);
  EXPECT_EQ(percentile(v, 50), 3.0);
  EXPECT_NEAR(percentile(v, 2.5), 1.1, 1e-12);
  EXPECT_NEAR(percentile(v, 97.5), 4.9, 1e-12);
  EXPECT_NEAR(piw(v), 3.8, 1e-12);
  std::vector<double> same(6, 0.3);
  EXPECT_EQ(piw(same), 0.0);
  EXPECT_THROW(percentile({}, 50), MetricError);
}

TEST(TTest, MatchesReferenceDistribution) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.05, 0.2);
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t n = 2 + trial % 25;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      b[i] = g(rng);
      a[i] = b[i] + g(rng);
    }
    auto r = paired_t_test(a, b);
    double mean = 0, ss = 0;
    for (std::size_t i = 0; i < n; ++i) mean += (a[i] - b[i]) / n;
    for (std::size_t i = 0; i < n; ++i) ss += std::pow(a[i] - b[i] - mean, 2);
    double t = mean / std::sqrt(ss / (n - 1) / n);
    boost::math::students_t dist(static_cast<double>(n - 1));
    double p = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    EXPECT_NEAR(r.t, t, 1e-10);
    EXPECT_EQ(r.dof, n - 1);
    EXPECT_NEAR(r.p, p, 1e-6) << "n=" << n << " t=" << t;
    EXPECT_EQ(r.rejected, p < 0.05);
  }
}

TEST(TTest, DegenerateDifferences) {
  std::vector<double> a{0.6, 0.6, 0.6}, b{0.2, 0.2, 0.2};
  auto r = paired_t_test(a, b);
  EXPECT_TRUE(r.rejected);
  EXPECT_EQ(r.p, 0.0);
  EXPECT_TRUE(std::isinf(r.t));
  auto z = paired_t_test(a, a);
  EXPECT_FALSE(z.rejected);
  EXPECT_EQ(z.p, 1.0);
  EXPECT_THROW(paired_t_test(std::vector<double>{1.0}, std::vector<double>{0.0}), MetricError);
}

TEST(ConfidenceTable, GroupsAndSplits) {
  std::vector<Prediction> ps;
  // label 0: one correct & confident, one wrong & undecided
  ps.push_back(pred(0, 0, 0, {0.9, 0.91, 0.89}, {0.1, 0.09, 0.11}, {0.9, 0.91, 0.89}));
  ps.push_back(pred(0, 1, 0, {0.5, 0.4, 0.6}, {0.45, 0.5, 0.4}, {0.45, 0.5, 0.4}));
  ps.push_back(pred(3, 3, 1, {0.8, 0.8, 0.81}, {0.2, 0.2, 0.19}, {0.8, 0.8, 0.81}));
  auto rows = confidence_report(ps);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].group, 0u);
  EXPECT_EQ(rows[0].count, 2u);
  EXPECT_EQ(rows[0].accuracy, 50.0);
  EXPECT_EQ(rows[0].rejected, 1u);
  EXPECT_EQ(rows[0].not_rejected, 1u);
  EXPECT_EQ(*rows[0].acc_rejected, 100.0);
  EXPECT_EQ(*rows[0].acc_not_rejected, 0.0);
  EXPECT_NEAR(*rows[0].piw_correct, piw(ps[0].true_class_probs), 1e-15);
  EXPECT_NEAR(*rows[0].piw_incorrect, piw(ps[1].true_class_probs), 1e-15);
  EXPECT_FALSE(rows[1].piw_incorrect.has_value());
  auto by_task = confidence_report(ps, GroupBy::task);
  EXPECT_EQ(by_task[1].group, 1u);

  std::ostringstream os;
  write_confidence_table_tsv(os, rows, GroupBy::label);
  EXPECT_NE(os.str().find("\t\t"), std::string::npos);  // absent piw_incorrect
}

TEST(Ood, MeanRowVariance) {
  std::vector<RowScores> s{{{0.5, 0.7}, {0.1, 0.3}}, {{0.9, 0.9}, {0.2, 0.2}}};
  auto o = ood_variances(s);
  EXPECT_NEAR(o.var_softmax, (0.01 + 0.0) / 2, 1e-15);
  EXPECT_NEAR(o.var_entropy, (0.01 + 0.0) / 2, 1e-15);
  std::vector<RowScores> single{{{0.5}, {0.1}}};
  EXPECT_THROW(ood_variances(single), MetricError);
}

TEST(Output, RunMatrixTsvMarksMissingCells) {
  RunMatrix m(2);
  m.set(0, 0, 50, 0.1);
  std::ostringstream os;
  write_run_matrix_tsv(os, m);
  EXPECT_NE(os.str().find("NaN"), std::string::npos);
}
