#pragma once
// Complete training loss on a 4-sample, 2-task batch with every term active.

#include <random>

#include "gradcheck.hpp"
#include "npcl/memory.hpp"
#include "npcl/model.hpp"
#include "npcl/objectives.hpp"

namespace npcl::testing {

struct LossFixture {
  NpclModel model;
  SampleSet context, target, replay;
  DistributionMemory stored;

  static ModelConfig config() {
    ModelConfig c;
    c.input_dim = 4;
    c.backbone_hidden = 6;
    c.feature_dim = 4;
    c.hidden_dim = 4;
    c.num_hidden = 1;
    c.n_train = 2;
    c.m_task = 1;
    c.attention_heads = 2;
    c.class_count_per_task = {2, 2};
    c.init_seed = 17;
    return c;
  }

  LossFixture() : model(config()) {
    std::mt19937_64 rng(23);
    std::normal_distribution<double> g;
    for (std::uint32_t i = 0; i < 4; ++i) {
      Sample s;
      s.task = i < 2 ? 0 : 1;
      s.label = s.task * 2 + i % 2;
      for (int d = 0; d < 4; ++d) s.x.push_back(g(rng));
      target.push_back(s);
    }
    context = {target[0], target[2]};
    replay = {target[0], target[1]};
    stored.set_global(DiagGaussian::from_values({0.1, -0.2, 0.3, 0.0}, {0.9, 1.1, 1.3, 0.7}));
    stored.insert_task(0, DiagGaussian::from_values({0.0, 0.2, -0.1, 0.4}, {1.2, 0.8, 1.0, 0.6}), 0);
  }

  /// Re-seeds its sampler, so repeated calls differ only through parameters.
  Tensor loss() const {
    std::mt19937_64 rng(99);
    auto f = model.forward_train(context, target, 2, rng);
    LossParts p;
    p.ce = cross_entropy(f.logits, f.row_labels);
    auto kl = elbo_kl_terms(f.posterior, f.prior);
    p.d_task = kl.d_task;
    p.d_global = kl.d_global;
    EncodeOptions opt;
    opt.samples = model.config().n_train;
    auto enc = model.encode_latent(replay, opt, rng);
    p.gr = global_regularizer(*enc.global, *stored.global());
    p.tr = task_regularizer(enc.task, stored.tasks(), 1);
    return total_loss(p, LossWeights{0.3, 0.2, 0.4, 0.5}, 2, 2).total;
  }

  GradCheck check() {
    std::vector<Tensor> params;
    for (auto& [_, t] : model.params().items()) params.push_back(t);
    return grad_check([this] { return loss(); }, params);
  }
};

}  // namespace npcl::testing
