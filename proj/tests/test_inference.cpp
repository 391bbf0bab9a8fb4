#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "npcl/inference.hpp"

using namespace npcl;

namespace {

Matrix rows(std::vector<std::vector<double>> r) {
  Matrix m{r.size(), r.front().size(), {}};
  for (auto& x : r) m.data.insert(m.data.end(), x.begin(), x.end());
  return m;
}

// Independent per-row entropy oracle.
double row_entropy(const std::vector<double>& logits) {
  double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
  for (double l : logits) z += std::exp(l - mx);
  double h = 0;
  for (double l : logits) {
    double p = std::exp(l - mx) / z;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

HeadPrediction head(std::uint32_t id, double u) { return {id, rows({{0.0, 0.0}}), u}; }

}  // namespace

TEST(HeadEntropy, ClosedForms) {
  EXPECT_NEAR(head_entropy(rows({{30.0, 0.0, 0.0}})), 0.0, 1e-11);
  EXPECT_NEAR(head_entropy(rows({{1, 1, 1, 1}, {-2, -2, -2, -2}})), 2 * std::log(4.0), 1e-12);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 2);
  std::vector<std::vector<double>> r(3, std::vector<double>(5));
  double ref = 0;
  for (auto& row : r) {
    for (auto& v : row) v = g(rng);
    ref += row_entropy(row);
  }
  EXPECT_NEAR(head_entropy(rows(r)), ref, 1e-12);
  EXPECT_THROW(head_entropy(Matrix{}), std::invalid_argument);
}

TEST(SelectHead, ArgminWithLowestIdTieBreak) {
  EXPECT_EQ(select_head({head(0, 0.4)}).head_id, 0u);
  EXPECT_EQ(select_head({head(0, 0.1), head(1, 2.0), head(2, 1.5)}).head_id, 0u);
  EXPECT_EQ(select_head({head(0, 3.0), head(2, 1.0), head(1, 1.0)}).head_id, 1u);
  EXPECT_THROW(select_head({}), std::invalid_argument);
}

TEST(SelectHead, InvariantToPositiveRescaling) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 5), s(0.01, 100);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<HeadPrediction> a, b;
    double k = s(rng);
    for (std::uint32_t h = 0; h < 5; ++h) {
      double v = std::round(u(rng) * 4) / 4;  // coarse values force ties
      a.push_back(head(h, v));
      b.push_back(head(h, v * k));
    }
    EXPECT_EQ(select_head(a).head_id, select_head(b).head_id);
  }
}

TEST(NaiveAverage, Properties) {
  auto a = make_head_prediction(0, rows({{2.0, 0.0, 1.0}, {0.5, 0.5, 0.0}}));
  auto same = naive_average({a, a});
  auto one = mean_softmax(a.logits);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(same[j], one[j], 1e-15);

  auto p = make_head_prediction(0, rows({{10.0, 0.0}}));
  auto q = make_head_prediction(1, rows({{0.0, 10.0}}));
  auto avg = naive_average({p, q});
  EXPECT_NEAR(avg[0], 0.5, 1e-15);
  EXPECT_NEAR(avg[1], 0.5, 1e-15);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::vector<HeadPrediction> heads;
  for (std::uint32_t h = 0; h < 3; ++h) {
    std::vector<std::vector<double>> r(4, std::vector<double>(3));
    for (auto& row : r)
      for (auto& v : row) v = g(rng);
    heads.push_back(make_head_prediction(h, rows(r)));
  }
  std::vector<double> oracle(3, 0.0);
  for (auto& h : heads)
    for (std::size_t r = 0; r < 4; ++r) {
      double z = 0;
      for (std::size_t j = 0; j < 3; ++j) z += std::exp(h.logits.data[r * 3 + j]);
      for (std::size_t j = 0; j < 3; ++j) oracle[j] += std::exp(h.logits.data[r * 3 + j]) / z / 12.0;
    }
  auto got = naive_average(heads);
  double total = 0;
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(got[j], oracle[j], 1e-12);
    total += got[j];
  }
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_THROW(naive_average({p, make_head_prediction(1, rows({{0.0, 1.0, 2.0}}))}), DimensionError);
}

TEST(Decide, OneHeadModesAgree) {
  auto h = make_head_prediction(0, rows({{1.0, 3.0}, {0.0, 2.0}}));
  Sample truth{{}, 1, 0};
  auto u = decide({h}, InferenceMode::uqm, truth);
  auto n = decide({h}, InferenceMode::naive, truth);
  EXPECT_EQ(u.pred_label, n.pred_label);
  EXPECT_EQ(u.confidence, n.confidence);
  EXPECT_TRUE(u.correct());
}

TEST(Decide, PicksLowEntropyHead) {
  auto sure = make_head_prediction(1, rows({{0.0, 0.0, 9.0, 0.0}}));
  auto vague = make_head_prediction(0, rows({{0.2, 0.0, 0.0, 0.1}}));
  auto p = decide({vague, sure}, InferenceMode::uqm, Sample{{}, 2, 1});
  EXPECT_EQ(p.chosen_head, 1u);
  EXPECT_EQ(p.pred_label, 2u);
  EXPECT_EQ(p.u_per_head.size(), 2u);
}

TEST(Decide, TaskHeadReadsTheTargetsOwnHead) {
  auto sure = make_head_prediction(1, rows({{0.0, 0.0, 9.0, 0.0}}));
  auto vague = make_head_prediction(0, rows({{0.2, 0.0, 0.0, 0.1}}));
  auto p = decide({vague, sure}, InferenceMode::task_head, Sample{{}, 0, 0});
  EXPECT_EQ(p.chosen_head, 0u);
  EXPECT_EQ(p.pred_label, 0u);
  ASSERT_EQ(p.true_class_probs.size(), 1u);
  EXPECT_EQ(p.true_class_probs[0], mean_softmax(vague.logits)[0]);
  EXPECT_THROW(decide({vague, sure}, InferenceMode::task_head, Sample{{}, 0, 4}), std::invalid_argument);
  EXPECT_EQ(to_string(InferenceMode::task_head), "task_head");
  EXPECT_THROW(parse_mode("task_head"), std::invalid_argument);
}

TEST(Decide, SingleRowHasNoAveraging) {
  std::vector<double> l{0.3, -1.2, 2.0};
  auto p = decide({make_head_prediction(0, rows({l}))}, InferenceMode::uqm, Sample{{}, 0, 0});
  double z = std::exp(0.3) + std::exp(-1.2) + std::exp(2.0);
  EXPECT_NEAR(p.confidence, std::exp(2.0) / z, 1e-15);
  EXPECT_EQ(p.softmax_var, 0.0);
  EXPECT_EQ(p.entropy_var, 0.0);
  EXPECT_NEAR(p.true_class_probs[0], std::exp(0.3) / z, 1e-15);
}

TEST(Decide, RowDiagnostics) {
  auto h = make_head_prediction(0, rows({{2.0, 0.0, 0.0}, {0.0, 2.0, 0.0}, {3.0, 0.0, 0.0}}));
  auto p = decide({h}, InferenceMode::uqm, Sample{{}, 1, 0});
  EXPECT_EQ(p.majority_label, 0u);
  EXPECT_EQ(p.pred_label, 0u);
  ASSERT_EQ(p.top1_probs.size(), 3u);
  EXPECT_GT(p.top1_probs[0], p.top2_probs[0]);
  EXPECT_LT(p.top1_probs[1], p.top2_probs[1]);
  EXPECT_GT(p.softmax_var, 0.0);
}
