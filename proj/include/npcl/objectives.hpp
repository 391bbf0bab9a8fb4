#pragma once
// Training losses: cross-entropy, ELBO KL terms, the global and task
// distribution regularizers, and their weighted combination.
//
//   total = mean_{stream+replay}(CE + alpha D^t + beta D^G)
//         + mean_{replay}(gamma GR + delta TR)
//
// D^t, D^G, GR and TR are batch-level quantities, so the sample means reduce
// to a single weighted term each; with an empty replay batch GR and TR vanish.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "npcl/distributions.hpp"
#include "npcl/model.hpp"

namespace npcl {

struct LossWeights {
  double alpha = 0.05;  // task KL
  double beta = 0.01;   // global KL
  double gamma = 0.2;   // global regularizer
  double delta = 0.1;   // task regularizer

  /// Weights must lie in [0, 1]; zero switches a term off.
  void validate() const {
    for (double w : {alpha, beta, gamma, delta})
      if (!(w >= 0.0 && w <= 1.0))
        throw std::invalid_argument("loss weights must lie in [0, 1], got " + std::to_string(w));
  }
};

struct LossParts {
  Tensor ce, d_task, d_global, gr, tr;
};

struct LossBreakdown {
  double ce = 0, d_task = 0, d_global = 0, gr = 0, tr = 0, total = 0;
  std::size_t stream_count = 0, replay_count = 0;
};

struct LossResult {
  Tensor total;
  LossBreakdown breakdown;
};

/// Mean over rows of -log softmax(row)[label].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& row_labels) {
  if (logits.rank() != 2 || row_labels.size() != logits.rows())
    throw DimensionError("cross_entropy needs one label per logit row");
  for (auto l : row_labels)
    if (l >= logits.cols())
      throw std::out_of_range("label " + std::to_string(l) + " outside " +
                              std::to_string(logits.cols()) + " classes");
  return scale(sum(pick(log_softmax(logits), row_labels)), -1.0 / static_cast<double>(logits.rows()));
}

/// Cross-entropy of one target against all of its N logit rows.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  Tensor l = logits.rank() == 2 ? logits : as_row(logits);
  return cross_entropy(l, std::vector<std::size_t>(l.rows(), label));
}

struct KlTerms {
  Tensor d_task, d_global;
};

/// D^G = KL(q(z^G|T) || q(z^G|C)); D^t = mean over tasks of
/// KL(q(z^t|z^G,T^t) || q(z^t|z^G,C^t)).
inline KlTerms elbo_kl_terms(const LatentEncoding& posterior, const LatentEncoding& prior) {
  KlTerms k;
  k.d_global = Tensor::scalar(0.0);
  k.d_task = Tensor::scalar(0.0);
  if (posterior.global.has_value() != prior.global.has_value())
    throw std::invalid_argument("posterior and prior disagree on the global latent");
  if (posterior.global) k.d_global = kl_diag(*posterior.global, *prior.global);
  if (posterior.task.size() != prior.task.size())
    throw std::invalid_argument("posterior and prior cover different task ids");
  if (posterior.task.empty()) return k;
  std::vector<Tensor> terms;
  for (auto& [t, q] : posterior.task) {
    auto it = prior.task.find(t);
    if (it == prior.task.end())
      throw std::invalid_argument("task " + std::to_string(t) + " has no prior");
    terms.push_back(kl_diag(q, it->second));
  }
  Tensor s = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
  k.d_task = scale(s, 1.0 / static_cast<double>(terms.size()));
  return k;
}

/// Drift of the current global distribution from the stored one.
inline Tensor global_regularizer(const DiagGaussian& current, const DiagGaussian& stored) {
  return js_diag(current, stored);
}

/// Stored distribution of a task, frozen at the step the task arrived.
struct StoredTaskDist {
  DiagGaussian dist;
  std::uint32_t step_recorded = 0;
};

/// Mean over past tasks (excluding `current_task`) of the JS drift between the
/// current task distribution and the stored one. Zero when no past task is present.
inline Tensor task_regularizer(const std::map<std::uint32_t, DiagGaussian>& current,
                               const std::map<std::uint32_t, StoredTaskDist>& stored,
                               std::uint32_t current_task) {
  std::vector<Tensor> terms;
  for (auto& [t, g] : current) {
    if (t == current_task) continue;
    auto it = stored.find(t);
    if (it == stored.end())
      throw std::invalid_argument("no stored distribution for replayed task " + std::to_string(t));
    terms.push_back(js_diag(collapse_rows(g), it->second.dist));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  Tensor s = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
  return scale(s, 1.0 / static_cast<double>(terms.size()));
}

inline LossResult total_loss(const LossParts& parts, const LossWeights& w,
                             std::size_t stream_count, std::size_t replay_count) {
  w.validate();
  if (stream_count + replay_count == 0) throw std::invalid_argument("empty batch");
  auto val = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
  auto term = [](const Tensor& t) { return t.defined() ? t : Tensor::scalar(0.0); };

  Tensor total = add(add(term(parts.ce), scale(term(parts.d_task), w.alpha)),
                     scale(term(parts.d_global), w.beta));
  if (replay_count > 0)
    total = add(total, add(scale(term(parts.gr), w.gamma), scale(term(parts.tr), w.delta)));

  LossResult r;
  r.total = total;
  auto& b = r.breakdown;
  b.ce = val(parts.ce);
  b.d_task = val(parts.d_task);
  b.d_global = val(parts.d_global);
  b.gr = replay_count > 0 ? val(parts.gr) : 0.0;
  b.tr = replay_count > 0 ? val(parts.tr) : 0.0;
  b.total = total.item();
  b.stream_count = stream_count;
  b.replay_count = replay_count;
  return r;
}

}  // namespace npcl
