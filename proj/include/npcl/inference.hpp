#pragma once
// Prediction from a frozen model: entropy-based head selection and the naive
// all-head average.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcl/distributions.hpp"
#include "npcl/model.hpp"
#include "npcl/sample.hpp"

namespace npcl {

/// uqm and naive are the test-time rules; task_head reads the head of the
/// target's own task and needs task labels, so it only serves diagnostics.
enum class InferenceMode { uqm, naive, task_head };

inline InferenceMode parse_mode(std::string_view s) {
  if (s == "uqm") return InferenceMode::uqm;
  if (s == "naive") return InferenceMode::naive;
  throw std::invalid_argument("unknown inference mode '" + std::string(s) + "' (expected uqm or naive)");
}

inline std::string to_string(InferenceMode m) {
  switch (m) {
    case InferenceMode::uqm: return "uqm";
    case InferenceMode::naive: return "naive";
    case InferenceMode::task_head: return "task_head";
  }
  return "?";
}

/// Row-major [rows, cols] block of plain values.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
};

inline Matrix to_matrix(const Tensor& t) {
  Tensor m = t.rank() == 2 ? t : as_row(t);
  return {m.rows(), m.cols(), m.to_vector()};
}

inline void softmax_row(std::span<const double> logits, std::span<double> out) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) z += out[j] = std::exp(logits[j] - mx);
  for (auto& v : out) v /= z;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p{logits.rows, logits.cols, std::vector<double>(logits.data.size())};
  for (std::size_t r = 0; r < logits.rows; ++r) softmax_row(logits.row(r), p.row(r));
  return p;
}

/// Sum over rows of the Shannon entropy of each row's softmax.
inline double head_entropy(const Matrix& logits) {
  if (logits.rows == 0 || logits.cols == 0) throw std::invalid_argument("head_entropy on empty logits");
  auto p = softmax_rows(logits);
  double u = 0.0;
  for (std::size_t r = 0; r < p.rows; ++r) u += shannon_entropy(p.row(r));
  return u;
}

inline double head_entropy(const Tensor& logits) { return head_entropy(to_matrix(logits)); }

struct HeadPrediction {
  std::uint32_t head_id = 0;
  Matrix logits;  // N rows
  double entropy_u = 0.0;
};

inline HeadPrediction make_head_prediction(std::uint32_t head, Matrix logits) {
  double u = head_entropy(logits);
  return {head, std::move(logits), u};
}

/// Minimal U; ties go to the lowest head id.
inline const HeadPrediction& select_head(const std::vector<HeadPrediction>& preds) {
  if (preds.empty()) throw std::invalid_argument("select_head on an empty list");
  const HeadPrediction* best = &preds.front();
  for (auto& p : preds)
    if (p.entropy_u < best->entropy_u || (p.entropy_u == best->entropy_u && p.head_id < best->head_id))
      best = &p;
  return *best;
}

/// Mean softmax over the rows of one logit block.
inline std::vector<double> mean_softmax(const Matrix& logits) {
  auto p = softmax_rows(logits);
  std::vector<double> m(p.cols, 0.0);
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t j = 0; j < p.cols; ++j) m[j] += p.data[r * p.cols + j];
  for (auto& v : m) v /= static_cast<double>(p.rows);
  return m;
}

/// Mean softmax over every head and every MC row.
inline std::vector<double> naive_average(const std::vector<HeadPrediction>& preds) {
  if (preds.empty()) throw std::invalid_argument("naive_average on an empty list");
  const auto rows = preds.front().logits.rows, cols = preds.front().logits.cols;
  std::vector<double> m(cols, 0.0);
  for (auto& p : preds) {
    if (p.logits.rows != rows || p.logits.cols != cols)
      throw DimensionError("naive_average needs equally shaped heads");
    auto s = mean_softmax(p.logits);
    for (std::size_t j = 0; j < cols; ++j) m[j] += s[j];
  }
  for (auto& v : m) v /= static_cast<double>(preds.size());
  return m;
}

/// Everything recorded about one prediction.
struct Prediction {
  std::size_t sample_id = 0;
  std::uint32_t true_label = 0, true_task = 0;
  std::uint32_t chosen_head = 0;
  std::uint32_t pred_label = 0;
  double confidence = 0.0;
  std::vector<double> u_per_head;
  double softmax_var = 0.0;  // over rows, of the max softmax probability
  double entropy_var = 0.0;  // over rows, of the row entropy
  // Per-row sequences over the rows used for the decision.
  std::vector<double> row_max_prob, row_entropy;
  std::vector<double> true_class_probs;
  std::vector<double> top1_probs, top2_probs;  // top-2 classes of the mean softmax
  std::uint32_t majority_label = 0;            // mode of per-row argmax

  bool correct() const { return pred_label == true_label; }
  /// Mean row entropy of the decision rows.
  double mean_entropy() const {
    if (row_entropy.empty()) return 0.0;
    double s = 0.0;
    for (double e : row_entropy) s += e;
    return s / static_cast<double>(row_entropy.size());
  }
};

inline double population_variance(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

namespace detail {

// Fills the per-row diagnostics from the rows the decision was made on.
inline void fill_row_diagnostics(Prediction& p, const std::vector<const Matrix*>& blocks,
                                 const std::vector<double>& mean_probs) {
  std::size_t top1 = 0, top2 = mean_probs.size() > 1 ? 1 : 0;
  for (std::size_t j = 0; j < mean_probs.size(); ++j)
    if (mean_probs[j] > mean_probs[top1]) top1 = j;
  if (mean_probs.size() > 1) {
    top2 = top1 == 0 ? 1 : 0;
    for (std::size_t j = 0; j < mean_probs.size(); ++j)
      if (j != top1 && mean_probs[j] > mean_probs[top2]) top2 = j;
  }
  std::map<std::size_t, std::size_t> votes;
  std::vector<double> probs;
  for (auto* b : blocks) {
    probs.resize(b->cols);
    for (std::size_t r = 0; r < b->rows; ++r) {
      softmax_row(b->row(r), probs);
      auto am = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      ++votes[am];
      p.row_max_prob.push_back(probs[am]);
      p.row_entropy.push_back(shannon_entropy(probs));
      p.true_class_probs.push_back(p.true_label < probs.size() ? probs[p.true_label] : 0.0);
      p.top1_probs.push_back(probs[top1]);
      p.top2_probs.push_back(probs[top2]);
    }
  }
  std::size_t best = 0, best_votes = 0;
  for (auto [c, n] : votes)
    if (n > best_votes) {
      best = c;
      best_votes = n;
    }
  p.majority_label = static_cast<std::uint32_t>(best);
  p.softmax_var = population_variance(p.row_max_prob);
  p.entropy_var = population_variance(p.row_entropy);
}

}  // namespace detail

/// Decision for one target given its per-head logit blocks.
inline Prediction decide(std::vector<HeadPrediction> heads, InferenceMode mode, const Sample& truth,
                         std::size_t sample_id = 0) {
  if (heads.empty()) throw std::invalid_argument("no heads to decide between");
  Prediction p;
  p.sample_id = sample_id;
  p.true_label = truth.label;
  p.true_task = truth.task;
  for (auto& h : heads) p.u_per_head.push_back(h.entropy_u);

  std::vector<double> probs;
  std::vector<const Matrix*> blocks;
  if (mode == InferenceMode::uqm) {
    const auto& h = select_head(heads);
    p.chosen_head = h.head_id;
    probs = mean_softmax(h.logits);
    blocks.push_back(&h.logits);
  } else if (mode == InferenceMode::task_head) {
    auto it = std::find_if(heads.begin(), heads.end(), [&](auto& h) { return h.head_id == truth.task; });
    if (it == heads.end())
      throw std::invalid_argument("no head for task " + std::to_string(truth.task) + " among the inferred heads");
    p.chosen_head = it->head_id;
    probs = mean_softmax(it->logits);
    blocks.push_back(&it->logits);
  } else {
    p.chosen_head = std::numeric_limits<std::uint32_t>::max();
    probs = naive_average(heads);
    for (auto& h : heads) blocks.push_back(&h.logits);
  }
  auto am = std::max_element(probs.begin(), probs.end());
  p.pred_label = static_cast<std::uint32_t>(am - probs.begin());
  p.confidence = *am;
  detail::fill_row_diagnostics(p, blocks, probs);
  return p;
}

/// Predicts a batch of targets against a prepared (memory) context.
inline std::vector<Prediction> predict_batch(const NpclModel& model, const InferenceContext& ctx,
                                             const SampleSet& targets, InferenceMode mode,
                                             std::size_t first_id = 0) {
  if (targets.empty()) return {};
  auto out = model.infer(ctx, stack_inputs(targets));
  const std::size_t k = out.rows_per_target;
  std::vector<Matrix> blocks;
  for (auto& l : out.head_logits) blocks.push_back(to_matrix(l));
  std::vector<Prediction> preds;
  preds.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::vector<HeadPrediction> heads;
    for (std::size_t h = 0; h < blocks.size(); ++h) {
      const auto& b = blocks[h];
      Matrix rows{k, b.cols,
                  std::vector<double>(b.data.begin() + static_cast<std::ptrdiff_t>(i * k * b.cols),
                                      b.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * k * b.cols))};
      heads.push_back(make_head_prediction(out.heads[h], std::move(rows)));
    }
    preds.push_back(decide(std::move(heads), mode, targets[i], first_id + i));
  }
  return preds;
}

/// Single-target convenience over the memory context.
inline Prediction predict(const NpclModel& model, const SampleSet& memory_context, const Sample& x,
                          InferenceMode mode, std::size_t seen_tasks, std::mt19937_64& rng) {
  if (memory_context.empty()) throw NoContextError("prediction requires a nonempty memory context");
  auto ctx = model.prepare_inference(memory_context, seen_tasks, rng);
  return predict_batch(model, ctx, {x}, mode).front();
}

/// Predicts a whole test set in batches; z is sampled once for the context.
inline std::vector<Prediction> predict_set(const NpclModel& model, const SampleSet& memory_context,
                                           const SampleSet& test, std::size_t seen_tasks,
                                           InferenceMode mode, std::mt19937_64& rng,
                                           std::size_t batch = 256) {
  if (memory_context.empty()) throw NoContextError("prediction requires a nonempty memory context");
  auto ctx = model.prepare_inference(memory_context, seen_tasks, rng);
  std::vector<Prediction> all;
  all.reserve(test.size());
  for (std::size_t b = 0; b < test.size(); b += batch) {
    SampleSet chunk(test.begin() + static_cast<std::ptrdiff_t>(b),
                    test.begin() + static_cast<std::ptrdiff_t>(std::min(test.size(), b + batch)));
    auto p = predict_batch(model, ctx, chunk, mode, b);
    all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return all;
}

inline double accuracy_percent(const std::vector<Prediction>& preds) {
  if (preds.empty()) return 0.0;
  std::size_t ok = 0;
  for (auto& p : preds) ok += p.correct();
  return 100.0 * static_cast<double>(ok) / static_cast<double>(preds.size());
}

/// Mean over samples of the mean row entropy of the decision rows.
inline double mean_uncertainty(const std::vector<Prediction>& preds) {
  if (preds.empty()) return 0.0;
  double s = 0.0;
  for (auto& p : preds) s += p.mean_entropy();
  return s / static_cast<double>(preds.size());
}

inline nlohmann::json to_json(const Prediction& p) {
  nlohmann::json j{{"sample_id", p.sample_id},
                   {"true_label", p.true_label},
                   {"true_task", p.true_task},
                   {"pred_label", p.pred_label},
                   {"confidence", p.confidence},
                   {"U_per_head", p.u_per_head},
                   {"softmax_var", p.softmax_var},
                   {"entropy_var", p.entropy_var}};
  if (p.chosen_head == std::numeric_limits<std::uint32_t>::max())
    j["chosen_head"] = nullptr;
  else
    j["chosen_head"] = p.chosen_head;
  return j;
}

/// One JSON object per line.
inline void write_jsonl(std::ostream& os, const std::vector<Prediction>& preds) {
  for (auto& p : preds) os << to_json(p).dump() << '\n';
}

}  // namespace npcl
