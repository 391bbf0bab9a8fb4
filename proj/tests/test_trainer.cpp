#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "npcl/datasets.hpp"
#include "npcl/trainer.hpp"

using namespace npcl;

namespace {

TaskStream small_stream(std::size_t tasks = 3) {
  SplitGaussianSpec s;
  s.num_tasks = tasks;
  s.dim = 6;
  s.n_train = 24;
  s.n_test = 8;
  s.seed = 2;
  return gen_split_gaussians(s);
}

ModelConfig small_model(const TaskStream& s) {
  ModelConfig c;
  c.backbone_hidden = 8;
  c.feature_dim = 6;
  c.hidden_dim = 8;
  c.n_train = 2;
  c.n_eval = 2;
  c.attention_heads = 2;
  return fit_to_stream(c, s);
}

TrainConfig small_train() {
  TrainConfig t;
  t.base_lr = 0.05;
  t.warmup_iters = 5;
  t.stream_batch = 16;
  t.replay_batch = 8;
  t.context_per_class = 10;
  t.buffer_size = 20;
  t.seed = 3;
  return t;
}

Sample tagged(std::uint32_t task, std::uint32_t label, double v) { return Sample{{v}, label, task}; }

}  // namespace

TEST(Warmup, LinearThenConstant) {
  EXPECT_DOUBLE_EQ(warmup_lr(0.1, 2000, 4000), 0.05);
  EXPECT_DOUBLE_EQ(warmup_lr(0.1, 4000, 4000), 0.1);
  EXPECT_DOUBLE_EQ(warmup_lr(0.1, 9000, 4000), 0.1);
  EXPECT_DOUBLE_EQ(warmup_lr(0.1, 1, 0), 0.1);
  double prev = 0.0;
  for (std::size_t s = 1; s < 100; ++s) {
    double lr = warmup_lr(0.3, s, 40);
    EXPECT_GE(lr, prev);
    if (s >= 40) {
      EXPECT_EQ(lr, 0.3);
    }
    prev = lr;
  }
}

TEST(TrainConfigType, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.context_fraction = 1.0;
  EXPECT_NO_THROW(c.validate());
  c.context_fraction = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.no_gr = c.no_tr = true;
  EXPECT_EQ(c.effective_weights().gamma, 0.0);
  EXPECT_EQ(c.effective_weights().delta, 0.0);
  EXPECT_EQ(c.effective_weights().alpha, c.weights.alpha);
}

TEST(ContextPools, CappedPerClassAndRetained) {
  ContextDataset d;
  std::mt19937_64 rng(1);
  SampleSet t0;
  for (int i = 0; i < 30; ++i) t0.push_back(tagged(0, i % 2, i));
  d.add_samples(t0, 5, rng);
  EXPECT_EQ(d.pool(0).size(), 10u);
  SampleSet t1{tagged(1, 2, 0.0), tagged(1, 3, 1.0)};
  d.add_samples(t1, 5, rng);
  EXPECT_EQ(d.pool(0).size(), 10u);
  EXPECT_EQ(d.pool(1).size(), 2u);
  EXPECT_FALSE(d.has(2));
}

TEST(ContextSplit, ContextIsSubsetOfTarget) {
  ContextDataset d;
  std::mt19937_64 rng(2);
  SampleSet pool;
  for (int i = 0; i < 60; ++i) pool.push_back(tagged(i % 3, i % 6, i));
  d.add_samples(pool, 100, rng);
  SampleSet stream(pool.begin(), pool.begin() + 24), replay(pool.begin() + 24, pool.begin() + 32);
  for (int trial = 0; trial < 20; ++trial) {
    auto ct = split_context_target(stream, replay, d, 0.125, rng);
    EXPECT_EQ(ct.context.size(), 4u);
    EXPECT_EQ(ct.target.size(), 36u);
    std::set<std::uint32_t> tasks;
    for (auto& c : ct.context) {
      EXPECT_NE(std::find(ct.target.begin(), ct.target.end(), c), ct.target.end());
      tasks.insert(c.task);
    }
    EXPECT_EQ(tasks.size(), 3u);
  }
  EXPECT_THROW(split_context_target({}, {}, d, 0.5, rng), std::invalid_argument);
  EXPECT_THROW(split_context_target({tagged(5, 0, 0)}, {}, d, 0.5, rng), NoContextError);
}

TEST(ContextSplit, FullFractionOverTheWholePoolCoversTarget) {
  ContextDataset d;
  std::mt19937_64 rng(3);
  SampleSet batch;
  for (int i = 0; i < 8; ++i) batch.push_back(tagged(0, i % 2, i));
  d.add_samples(batch, 100, rng);
  auto ct = split_context_target(batch, {}, d, 1.0, rng);
  std::multiset<double> c, b;
  for (auto& s : ct.context) c.insert(s.x[0]);
  for (auto& s : batch) b.insert(s.x[0]);
  EXPECT_EQ(c, b);
}

TEST(TrainTask, FirstTaskHasNoRegularizers) {
  auto s = small_stream();
  NpclModel m(small_model(s));
  auto cfg = small_train();
  auto st = make_train_state(cfg);
  train_task(m, s.tasks[0].train, 0, cfg, st);
  ASSERT_FALSE(st.logs.empty());
  for (auto& l : st.logs) {
    EXPECT_EQ(l.loss.gr, 0.0);
    EXPECT_EQ(l.loss.tr, 0.0);
  }
  EXPECT_EQ(st.memory.seen_count(), s.tasks[0].train.size());
  EXPECT_TRUE(st.dist_memory.global().has_value());
  EXPECT_TRUE(st.dist_memory.tasks().contains(0));
}

TEST(TrainTask, SeenCountMatchesStreamItems) {
  auto s = small_stream();
  NpclModel m(small_model(s));
  auto cfg = small_train();
  cfg.epochs_per_task = 2;
  auto st = make_train_state(cfg);
  std::size_t total = 0;
  for (std::uint32_t t = 0; t < 3; ++t) {
    train_task(m, s.tasks[t].train, t, cfg, st);
    total += s.tasks[t].train.size();
    EXPECT_EQ(st.memory.seen_count(), total);
  }
  EXPECT_EQ(st.memory.size(), cfg.buffer_size);
}

TEST(TrainTask, LaterTasksUseRegularizersUnlessDisabled) {
  auto s = small_stream();
  for (bool ablate : {false, true}) {
    NpclModel m(small_model(s));
    auto cfg = small_train();
    cfg.no_gr = cfg.no_tr = ablate;
    auto st = make_train_state(cfg);
    train_task(m, s.tasks[0].train, 0, cfg, st);
    std::size_t first = st.logs.size();
    train_task(m, s.tasks[1].train, 1, cfg, st);
    double gr = 0, tr = 0;
    for (std::size_t i = first; i < st.logs.size(); ++i) {
      gr += st.logs[i].loss.gr;
      tr += st.logs[i].loss.tr;
    }
    if (ablate) {
      EXPECT_EQ(gr, 0.0);
      EXPECT_EQ(tr, 0.0);
    } else {
      EXPECT_GT(gr, 0.0);
      EXPECT_GT(tr, 0.0);
    }
  }
}

TEST(TrainTask, ShortFinalBatchIsKept) {
  auto s = small_stream(1);
  NpclModel m(small_model(s));
  auto cfg = small_train();
  cfg.stream_batch = 32;
  auto st = make_train_state(cfg);
  SampleSet few(s.tasks[0].train.begin(), s.tasks[0].train.begin() + 5);
  train_task(m, few, 0, cfg, st);
  EXPECT_EQ(st.logs.size(), 1u);
  EXPECT_EQ(st.logs[0].loss.stream_count, 5u);
  EXPECT_THROW(train_task(m, {}, 0, cfg, st), std::invalid_argument);
}

TEST(TrainTask, DivergenceAbortsWithTermName) {
  auto s = small_stream(1);
  NpclModel m(small_model(s));
  auto cfg = small_train();
  cfg.base_lr = 1e300;
  cfg.warmup_iters = 0;
  auto st = make_train_state(cfg);
  try {
    train_task(m, s.tasks[0].train, 0, cfg, st);
    FAIL() << "expected a non-finite loss";
  } catch (const NanAbort& e) {
    EXPECT_FALSE(e.term.empty());
    EXPECT_NE(std::string(e.what()).find(e.term), std::string::npos);
  }
}

TEST(TrainTask, NoisyPriorChangesTaskKlTrajectory) {
  auto s = small_stream();
  std::vector<double> first_task[2], second_task[2];
  for (int noisy = 0; noisy < 2; ++noisy) {
    NpclModel m(small_model(s));
    auto cfg = small_train();
    cfg.noisy_prior = noisy;
    auto st = make_train_state(cfg);
    train_task(m, s.tasks[0].train, 0, cfg, st);
    std::size_t first = st.logs.size();
    for (auto& l : st.logs) first_task[noisy].push_back(l.loss.d_task);
    train_task(m, s.tasks[1].train, 1, cfg, st);
    for (std::size_t i = first; i < st.logs.size(); ++i) second_task[noisy].push_back(st.logs[i].loss.d_task);
  }
  EXPECT_EQ(first_task[0], first_task[1]);  // one head: nothing to misdirect
  EXPECT_NE(second_task[0], second_task[1]);
}

TEST(RunStream, FillsLowerTriangleDeterministically) {
  auto s = small_stream();
  auto dir = std::filesystem::temp_directory_path() / "npcl_run_stream_test";
  std::filesystem::remove_all(dir);
  std::size_t hooks = 0;
  auto a = run_stream(s, small_model(s), small_train(), dir, {},
                      [&](std::size_t t, const NpclModel&, const TrainState&) { EXPECT_EQ(t, hooks++); });
  auto b = run_stream(s, small_model(s), small_train());
  EXPECT_EQ(hooks, 3u);
  EXPECT_TRUE(a.matrix.complete());
  EXPECT_EQ(a.matrix.acc_rows(), b.matrix.acc_rows());
  EXPECT_EQ(a.state.logs.back().loss.total, b.state.logs.back().loss.total);
  EXPECT_EQ(a.final_predictions.size(), 3 * s.tasks[0].test.size());
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "task_2.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "train_log.tsv"));
  std::filesystem::remove_all(dir);
}

TEST(RunStream, SingleTaskMatchesJointAndPlainEvaluation) {
  auto s = small_stream(1);
  auto cfg = small_train();
  auto r = run_stream(s, small_model(s), cfg);
  auto j = run_joint(s, small_model(s), cfg);
  EXPECT_EQ(r.matrix.acc(0, 0), j.accuracy);
  auto rng = eval_rng(cfg.seed, 0);
  auto preds = evaluate(r.model, r.state.memory, s.tasks[0].test, 1, cfg, rng);
  EXPECT_EQ(r.matrix.acc(0, 0), accuracy_percent(preds));
}

TEST(Evaluation, NeedsMemory) {
  EpisodicMemory empty(5);
  std::mt19937_64 rng(1);
  EXPECT_THROW(evaluation_context(empty, 0, rng), NoContextError);
  EpisodicMemory mem(5);
  for (int i = 0; i < 5; ++i) mem.reservoir_update(tagged(0, 0, i), rng);
  EXPECT_EQ(evaluation_context(mem, 0, rng).size(), 5u);
  EXPECT_EQ(evaluation_context(mem, 3, rng).size(), 3u);
}

TEST(NoisyRoute, AlwaysMisdirects) {
  std::mt19937_64 rng(8);
  SampleSet ctx{tagged(0, 0, 0), tagged(1, 2, 0), tagged(2, 4, 0), tagged(2, 5, 1)};
  for (int trial = 0; trial < 200; ++trial) {
    auto route = detail::noisy_route(ctx, 3, rng);
    ASSERT_EQ(route.size(), 3u);
    for (auto [from, to] : route) {
      EXPECT_NE(from, to);
      EXPECT_LT(to, 3u);
    }
  }
  EXPECT_THROW(detail::noisy_route(ctx, 1, rng), std::invalid_argument);
}
