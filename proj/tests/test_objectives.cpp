#include <gtest/gtest.h>

#include <cmath>

#include "loss_fixture.hpp"
#include "npcl/objectives.hpp"

using namespace npcl;

namespace {

DiagGaussian gauss(std::vector<double> m, std::vector<double> v) {
  return DiagGaussian::from_values(std::move(m), std::move(v));
}

}  // namespace

TEST(CrossEntropy, MatchesExplicitLogSumExp) {
  auto logits = Tensor::matrix({{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}});
  double ref = 0.0;
  ref += std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 2.0;
  ref += std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)) - (-1.0);
  EXPECT_NEAR(cross_entropy(logits, {1, 0}).item(), ref / 2, 1e-12);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::size_t>{1}), DimensionError);
  EXPECT_THROW(cross_entropy(logits, {1, 3}), std::out_of_range);
}

TEST(LossWeightsType, RangeChecked) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.gamma = 0.0;
  EXPECT_NO_THROW(w.validate());
  w.gamma = 1.2;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  w.gamma = -0.1;
  EXPECT_THROW(w.validate(), std::invalid_argument);
}

TEST(TotalLoss, WeightsEachTerm) {
  LossParts p{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(4.0),
              Tensor::scalar(5.0)};
  LossWeights w{0.1, 0.2, 0.3, 0.4};
  auto r = total_loss(p, w, 4, 4);
  EXPECT_NEAR(r.breakdown.total, 1.0 + 0.2 + 0.6 + 1.2 + 2.0, 1e-12);
  EXPECT_EQ(r.breakdown.gr, 4.0);
}

TEST(TotalLoss, EmptyReplayDropsRegularizers) {
  LossParts p{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(4.0),
              Tensor::scalar(5.0)};
  auto r = total_loss(p, LossWeights{0.1, 0.2, 0.3, 0.4}, 4, 0);
  EXPECT_NEAR(r.breakdown.total, 1.0 + 0.2 + 0.6, 1e-12);
  EXPECT_EQ(r.breakdown.gr, 0.0);
  EXPECT_EQ(r.breakdown.tr, 0.0);
  EXPECT_THROW(total_loss(p, {}, 0, 0), std::invalid_argument);
}

TEST(TotalLoss, ZeroWeightsDisableTerms) {
  LossParts p{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(4.0),
              Tensor::scalar(5.0)};
  auto r = total_loss(p, LossWeights{0.0, 0.0, 0.0, 0.0}, 2, 2);
  EXPECT_EQ(r.breakdown.total, 1.0);
}

TEST(Regularizers, TaskRegularizerSkipsCurrentTask) {
  std::map<std::uint32_t, StoredTaskDist> stored{{0, {gauss({0, 0}, {1, 1}), 0}}};
  std::map<std::uint32_t, DiagGaussian> current{{1, gauss({5, 5}, {1, 1})}};
  EXPECT_EQ(task_regularizer(current, stored, 1).item(), 0.0);
  current[0] = gauss({0, 0}, {1, 1});
  EXPECT_EQ(task_regularizer(current, stored, 1).item(), 0.0);
  current[0] = gauss({1, 0}, {1, 1});
  EXPECT_NEAR(task_regularizer(current, stored, 1).item(),
              js_diag(gauss({1, 0}, {1, 1}), gauss({0, 0}, {1, 1})).item(), 1e-15);
  current[2] = gauss({0, 0}, {1, 1});
  EXPECT_THROW(task_regularizer(current, stored, 1), std::invalid_argument);
}

TEST(Regularizers, ElboTermsRequireMatchingTasks) {
  LatentEncoding a, b;
  a.global = gauss({0}, {1});
  b.global = gauss({1}, {1});
  a.task[0] = gauss({0}, {1});
  b.task[0] = gauss({0}, {2});
  auto k = elbo_kl_terms(a, b);
  EXPECT_NEAR(k.d_global.item(), 0.5, 1e-12);
  EXPECT_NEAR(k.d_task.item(), 0.5 * (0.5 + std::log(2.0) - 1.0), 1e-12);
  b.task.clear();
  b.task[3] = gauss({0}, {1});
  EXPECT_THROW(elbo_kl_terms(a, b), std::invalid_argument);
}

TEST(FullLoss, PassesFiniteDifferenceCheck) {
  npcl::testing::LossFixture fx;
  auto r = fx.check();
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
