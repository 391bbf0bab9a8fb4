#pragma once
// Continual-learning driver: context/target construction, per-task
// optimization, distribution recording, stream and joint runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "npcl/datasets.hpp"
#include "npcl/inference.hpp"
#include "npcl/memory.hpp"
#include "npcl/metrics.hpp"
#include "npcl/model.hpp"
#include "npcl/objectives.hpp"
#include "npcl/params.hpp"

namespace npcl {

struct TrainConfig {
  std::size_t epochs_per_task = 1;
  double base_lr = 0.03;
  std::size_t warmup_iters = 4000;
  std::size_t stream_batch = 32;
  std::size_t replay_batch = 32;
  double context_fraction = 0.125;
  std::size_t context_per_class = 100;
  LossWeights weights;
  std::uint64_t seed = 1;  // drives initialization, batching and sampling
  bool no_gr = false;
  bool no_tr = false;
  bool noisy_prior = false;
  std::size_t buffer_size = 200;
  double clip_norm = 10000.0;
  InferenceMode eval_mode = InferenceMode::uqm;
  std::size_t eval_context_size = 0;  // 0: the whole episodic memory
  std::size_t eval_batch = 256;

  void validate() const {
    if (!(context_fraction > 0.0 && context_fraction <= 1.0))
      throw std::invalid_argument("context_fraction must lie in (0, 1]");
    if (epochs_per_task == 0) throw std::invalid_argument("epochs_per_task must be positive");
    if (stream_batch == 0) throw std::invalid_argument("stream_batch must be positive");
    if (context_per_class == 0) throw std::invalid_argument("context_per_class must be positive");
    if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
    if (eval_batch == 0) throw std::invalid_argument("eval_batch must be positive");
    weights.validate();
  }

  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (no_gr) w.gamma = 0.0;
    if (no_tr) w.delta = 0.0;
    return w;
  }
};

/// Linear warmup: base * min(1, step / warmup); constant when warmup is 0.
inline double warmup_lr(double base, std::size_t step, std::size_t warmup) {
  if (warmup == 0) return base;
  return base * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
}

/// Raised when a loss term turns non-finite.
struct NanAbort : NumericError {
  NanAbort(const std::string& term, std::size_t step, double value)
      : NumericError("non-finite loss term '" + term + "' (" + std::to_string(value) + ") at step " +
                     std::to_string(step)),
        term(term) {}
  NanAbort(const std::string& term, std::size_t step, const std::string& cause)
      : NumericError("non-finite values while computing '" + term + "' at step " + std::to_string(step) +
                     ": " + cause),
        term(term) {}
  std::string term;
};

/// Per-task pools the training context is drawn from.
class ContextDataset {
 public:
  /// Replaces the pool of every task present in `data` with `per_class`
  /// random samples of each of its classes. Other pools are kept.
  void add_samples(const SampleSet& data, std::size_t per_class, std::mt19937_64& rng) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, SampleSet> groups;
    for (auto& s : data) groups[{s.task, s.label}].push_back(s);
    std::map<std::uint32_t, SampleSet> fresh;
    for (auto& [key, items] : groups) {
      std::shuffle(items.begin(), items.end(), rng);
      auto n = std::min(per_class, items.size());
      auto& slice = fresh[key.first];
      slice.insert(slice.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n));
    }
    for (auto& [t, slice] : fresh) pools_[t] = std::move(slice);
  }

  bool has(std::uint32_t task) const { return pools_.contains(task) && !pools_.at(task).empty(); }
  const SampleSet& pool(std::uint32_t task) const { return pools_.at(task); }
  const std::map<std::uint32_t, SampleSet>& pools() const { return pools_; }

 private:
  std::map<std::uint32_t, SampleSet> pools_;
};

struct ContextTarget {
  SampleSet context, target;
  std::size_t stream_count = 0, replay_count = 0;
};

/// T = stream + replay + C, with C drawn from the context pools of the tasks
/// present in the batch: round(fraction * |stream + replay|) points, at least
/// one per present task.
inline ContextTarget split_context_target(const SampleSet& stream, const SampleSet& replay,
                                          const ContextDataset& pools, double fraction,
                                          std::mt19937_64& rng) {
  if (stream.empty() && replay.empty()) throw std::invalid_argument("empty target batch");
  ContextTarget ct;
  ct.stream_count = stream.size();
  ct.replay_count = replay.size();
  ct.target = stream;
  ct.target.insert(ct.target.end(), replay.begin(), replay.end());

  std::set<std::uint32_t> present;
  for (auto& s : ct.target) present.insert(s.task);
  std::vector<const Sample*> candidates;
  std::vector<std::uint32_t> covered;
  for (auto t : present)
    if (pools.has(t)) {
      covered.push_back(t);
      for (auto& s : pools.pool(t)) candidates.push_back(&s);
    }
  if (covered.empty()) throw NoContextError("no context pool for the tasks in this batch");

  auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ct.target.size())));
  want = std::clamp(want, covered.size(), candidates.size());

  std::set<const Sample*> chosen;
  for (auto t : covered) {
    const auto& p = pools.pool(t);
    std::uniform_int_distribution<std::size_t> u(0, p.size() - 1);
    chosen.insert(&p[u(rng)]);
  }
  // Partial shuffle over the pooled candidates until enough distinct points.
  for (std::size_t i = 0; chosen.size() < want && i < candidates.size(); ++i) {
    std::uniform_int_distribution<std::size_t> u(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[u(rng)]);
    chosen.insert(candidates[i]);
  }
  // Pointer order is allocation order; restore candidate order for determinism.
  for (auto* c : candidates)
    if (chosen.erase(c)) ct.context.push_back(*c);
  ct.target.insert(ct.target.end(), ct.context.begin(), ct.context.end());
  return ct;
}

struct StepLog {
  std::size_t step = 0;
  std::uint32_t task = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  LossBreakdown loss;
};

using StepObserver = std::function<void(const StepLog&)>;

/// Mutable state threaded through a stream of tasks.
struct TrainState {
  std::mt19937_64 rng;
  std::size_t step = 0;
  EpisodicMemory memory;
  DistributionMemory dist_memory;
  ContextDataset context;
  std::vector<StepLog> logs;
};

inline TrainState make_train_state(const TrainConfig& cfg) {
  return TrainState{std::mt19937_64(cfg.seed), 0, EpisodicMemory(cfg.buffer_size), {}, {}, {}};
}

namespace detail {

inline void check_finite(const LossBreakdown& b, std::size_t step) {
  const std::pair<const char*, double> terms[] = {{"ce", b.ce}, {"d_task", b.d_task},
                                                  {"d_global", b.d_global}, {"gr", b.gr},
                                                  {"tr", b.tr}, {"total", b.total}};
  for (auto [name, v] : terms)
    if (!std::isfinite(v)) throw NanAbort(name, step, v);
}

// Each context task is sent to the encoder of a different, uniformly drawn
// seen task. Needs at least two seen tasks.
inline std::map<std::uint32_t, std::uint32_t> noisy_route(const SampleSet& context,
                                                          std::size_t seen_tasks,
                                                          std::mt19937_64& rng) {
  if (seen_tasks < 2) throw std::invalid_argument("noisy routing needs two seen tasks");
  std::map<std::uint32_t, std::uint32_t> route;
  std::uniform_int_distribution<std::uint32_t> u(0, static_cast<std::uint32_t>(seen_tasks - 2));
  for (auto& s : context)
    if (!route.contains(s.task)) {
      std::uint32_t j = u(rng);
      route[s.task] = j >= s.task ? j + 1 : j;
    }
  return route;
}

}  // namespace detail

/// One optimization step on a prepared context/target split.
inline StepLog train_step(NpclModel& model, const ContextTarget& ct, const SampleSet& replay,
                          std::uint32_t task, const TrainConfig& cfg, TrainState& st) {
  const std::size_t seen = task + 1;
  const LossWeights w = cfg.effective_weights();
  LossParts parts;
  const char* stage = "forward";
  try {
    TrainForwardOptions fopt;
    if (cfg.noisy_prior && task > 0) fopt.context_task_route = detail::noisy_route(ct.context, seen, st.rng);
    auto fwd = model.forward_train(ct.context, ct.target, seen, st.rng, fopt);

    stage = "ce";
    parts.ce = cross_entropy(fwd.logits, fwd.row_labels);
    stage = "elbo_kl";
    auto kl = elbo_kl_terms(fwd.posterior, fwd.prior);
    parts.d_task = kl.d_task;
    parts.d_global = kl.d_global;

    const auto& dm = st.dist_memory;
    bool want_gr = w.gamma > 0.0 && model.has_global() && dm.global().has_value();
    bool want_tr = w.delta > 0.0 && model.has_task_heads() && !dm.tasks().empty();
    if (!replay.empty() && (want_gr || want_tr)) {
      stage = "replay_encoding";
      EncodeOptions opt;
      opt.samples = model.config().n_train;
      auto enc = model.encode_latent(replay, opt, st.rng);
      stage = "gr";
      if (want_gr) parts.gr = global_regularizer(*enc.global, *dm.global());
      stage = "tr";
      if (want_tr) parts.tr = task_regularizer(enc.task, dm.tasks(), task);
    }
  } catch (const NumericError& e) {
    throw NanAbort(stage, st.step + 1, e.what());
  }

  auto res = total_loss(parts, w, ct.stream_count, ct.replay_count);
  ++st.step;
  detail::check_finite(res.breakdown, st.step);
  backward(res.total);
  StepLog log;
  log.step = st.step;
  log.task = task;
  log.lr = warmup_lr(cfg.base_lr, st.step, cfg.warmup_iters);
  log.grad_norm = sgd_step(model.params(), log.lr, cfg.clip_norm).grad_norm;
  log.loss = res.breakdown;
  return log;
}

/// Trains one task: shuffled epochs over the task data with replay, then
/// records the task's distributions.
inline void train_task(NpclModel& model, const SampleSet& task_data, std::uint32_t task,
                       const TrainConfig& cfg, TrainState& st, const StepObserver& observer = {}) {
  if (task_data.empty()) throw std::invalid_argument("task " + std::to_string(task) + " has no data");
  cfg.validate();
  st.context.add_samples(task_data, cfg.context_per_class, st.rng);
  SampleSet data = task_data;
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
    std::shuffle(data.begin(), data.end(), st.rng);
    for (std::size_t b = 0; b < data.size(); b += cfg.stream_batch) {
      SampleSet stream(data.begin() + static_cast<std::ptrdiff_t>(b),
                       data.begin() + static_cast<std::ptrdiff_t>(std::min(data.size(), b + cfg.stream_batch)));
      SampleSet replay;
      if (!st.memory.empty() && cfg.replay_batch > 0) replay = st.memory.sample_batch(cfg.replay_batch, st.rng);
      auto ct = split_context_target(stream, replay, st.context, cfg.context_fraction, st.rng);
      auto log = train_step(model, ct, replay, task, cfg, st);
      if (epoch == 0)
        for (auto& s : stream) st.memory.reservoir_update(s, st.rng);
      st.logs.push_back(log);
      if (observer) observer(log);
    }
  }
  record_distributions(model, task_data, st.memory, st.dist_memory, cfg.stream_batch, task, st.rng);
}

/// Evaluation context: the whole memory, or a uniform subsample of it.
inline SampleSet evaluation_context(const EpisodicMemory& mem, std::size_t size, std::mt19937_64& rng) {
  if (mem.empty()) throw NoContextError("inference requires a nonempty episodic memory");
  if (size == 0 || size >= mem.size()) return mem.items();
  return mem.sample_batch(size, rng);
}

inline std::mt19937_64 eval_rng(std::uint64_t seed, std::size_t task) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task), 0x5eedu};
  return std::mt19937_64(seq);
}

/// Predictions for a test set against the memory context.
inline std::vector<Prediction> evaluate(const NpclModel& model, const EpisodicMemory& mem,
                                        const SampleSet& test, std::size_t seen_tasks,
                                        const TrainConfig& cfg, std::mt19937_64& rng) {
  auto ctx = evaluation_context(mem, cfg.eval_context_size, rng);
  return predict_set(model, ctx, test, seen_tasks, cfg.eval_mode, rng, cfg.eval_batch);
}

inline void write_train_log(std::ostream& os, const std::vector<StepLog>& logs) {
  os << "step\ttask\tlr\tce\td_task\td_global\tgr\ttr\ttotal\n";
  for (auto& l : logs)
    os << l.step << '\t' << l.task << '\t' << detail::num(l.lr) << '\t' << detail::num(l.loss.ce) << '\t'
       << detail::num(l.loss.d_task) << '\t' << detail::num(l.loss.d_global) << '\t'
       << detail::num(l.loss.gr) << '\t' << detail::num(l.loss.tr) << '\t' << detail::num(l.loss.total)
       << '\n';
}

/// Called after each task with the frozen model and its memories.
using TaskHook = std::function<void(std::size_t task, const NpclModel&, const TrainState&)>;

struct StreamResult {
  RunMatrix matrix;
  NpclModel model;
  TrainState state;
  std::vector<Prediction> final_predictions;  // every seen test set after the last task
};

/// Model config matching a stream's class layout.
inline ModelConfig fit_to_stream(ModelConfig m, const TaskStream& s) {
  m.input_dim = s.input_dim();
  m.class_count_per_task = s.class_counts();
  m.shared_classes = s.kind == StreamKind::domain_il;
  return m;
}

/// Trains tasks in order, evaluating every seen test set after each one.
/// With a run directory, checkpoints and the step log are written there.
inline StreamResult run_stream(const TaskStream& stream, ModelConfig mcfg, const TrainConfig& cfg,
                               const std::filesystem::path& run_dir = {},
                               const StepObserver& observer = {}, const TaskHook& hook = {}) {
  if (stream.tasks.empty()) throw std::invalid_argument("run_stream needs at least one task");
  cfg.validate();
  mcfg = fit_to_stream(std::move(mcfg), stream);
  mcfg.init_seed = cfg.seed;
  StreamResult r{RunMatrix(stream.tasks.size()), NpclModel(mcfg), make_train_state(cfg), {}};
  if (!run_dir.empty()) std::filesystem::create_directories(run_dir / "checkpoints");

  for (std::uint32_t t = 0; t < stream.tasks.size(); ++t) {
    train_task(r.model, stream.tasks[t].train, t, cfg, r.state, observer);
    auto rng = eval_rng(cfg.seed, t);
    auto ctx = evaluation_context(r.state.memory, cfg.eval_context_size, rng);
    auto icx = r.model.prepare_inference(ctx, t + 1, rng);
    for (std::uint32_t e = 0; e <= t; ++e) {
      std::vector<Prediction> preds;
      const auto& test = stream.tasks[e].test;
      for (std::size_t b = 0; b < test.size(); b += cfg.eval_batch) {
        SampleSet chunk(test.begin() + static_cast<std::ptrdiff_t>(b),
                        test.begin() + static_cast<std::ptrdiff_t>(std::min(test.size(), b + cfg.eval_batch)));
        auto p = predict_batch(r.model, icx, chunk, cfg.eval_mode, b);
        preds.insert(preds.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
      }
      r.matrix.set(t, e, accuracy_percent(preds), mean_uncertainty(preds));
      if (t + 1 == stream.tasks.size())
        r.final_predictions.insert(r.final_predictions.end(), std::make_move_iterator(preds.begin()),
                                   std::make_move_iterator(preds.end()));
    }
    if (!run_dir.empty())
      save_checkpoint(r.model.params(), run_dir / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt"));
    if (hook) hook(t, r.model, r.state);
  }
  if (!run_dir.empty()) {
    std::ofstream log(run_dir / "train_log.tsv");
    write_train_log(log, r.state.logs);
  }
  return r;
}

/// Collapses a stream into one task holding every training and test sample.
inline TaskStream merge_tasks(const TaskStream& s) {
  TaskStream m;
  m.kind = s.kind;
  Task all;
  std::set<std::uint32_t> classes;
  for (auto& t : s.tasks) {
    for (auto e : t.train) {
      e.task = 0;
      all.train.push_back(std::move(e));
    }
    for (auto e : t.test) {
      e.task = 0;
      all.test.push_back(std::move(e));
    }
    classes.insert(t.classes.begin(), t.classes.end());
  }
  all.classes.assign(classes.begin(), classes.end());
  m.tasks.push_back(std::move(all));
  return m;
}

struct JointResult {
  double accuracy = 0.0;
  std::vector<Prediction> predictions;
};

/// Non-continual upper bound. With keep_task_heads the union is trained with
/// its task ids intact and heads are picked by entropy at test time;
/// otherwise everything is one task with a single head.
inline JointResult run_joint(const TaskStream& stream, ModelConfig mcfg, TrainConfig cfg,
                             bool keep_task_heads = false) {
  if (stream.tasks.empty()) throw std::invalid_argument("run_joint needs at least one task");
  cfg.validate();
  mcfg = fit_to_stream(std::move(mcfg), stream);
  mcfg.init_seed = cfg.seed;
  TaskStream merged = merge_tasks(stream);
  if (!keep_task_heads) {
    std::size_t classes = stream.kind == StreamKind::domain_il ? mcfg.num_classes()
                                                               : merged.tasks[0].classes.size();
    mcfg.class_count_per_task = {classes};
  }
  NpclModel model(mcfg);
  TrainState st = make_train_state(cfg);
  SampleSet train = merged.tasks[0].train, test = merged.tasks[0].test;
  if (keep_task_heads) {
    train.clear();
    test.clear();
    for (auto& t : stream.tasks) {
      train.insert(train.end(), t.train.begin(), t.train.end());
      test.insert(test.end(), t.test.begin(), t.test.end());
    }
  }
  // Training as the last task makes every head live from the first step.
  std::uint32_t last = keep_task_heads ? static_cast<std::uint32_t>(stream.tasks.size() - 1) : 0;
  train_task(model, train, last, cfg, st);
  auto rng = eval_rng(cfg.seed, 0);
  JointResult jr;
  jr.predictions = evaluate(model, st.memory, test, model.config().num_tasks(), cfg, rng);
  jr.accuracy = accuracy_percent(jr.predictions);
  return jr;
}
}  // namespace npcl
