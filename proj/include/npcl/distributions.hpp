#pragma once
// Diagonal Gaussians and the divergences/entropies used by the objectives.

#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "npcl/tensor.hpp"

namespace npcl {

inline constexpr double kVarFloor = 1e-8;

struct InvalidDistribution : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Diagonal Gaussian. `mean` and `var` are [o] for a single distribution or
/// [k, o] for a stack of k distributions (one per conditioning sample).
struct DiagGaussian {
  Tensor mean;
  Tensor var;

  DiagGaussian() = default;
  DiagGaussian(Tensor m, Tensor v) : mean(std::move(m)), var(std::move(v)) {
    if (mean.shape() != var.shape())
      throw DimensionError("gaussian mean " + shape_str(mean.shape()) + " vs var " +
                           shape_str(var.shape()));
  }

  /// Constant distribution; rejects variances below the floor.
  static DiagGaussian from_values(std::vector<double> mean, std::vector<double> var) {
    if (mean.size() != var.size()) throw DimensionError("gaussian mean/var length mismatch");
    for (double v : var)
      if (!(v >= kVarFloor)) throw InvalidDistribution("variance below floor");
    return {Tensor::vector(std::move(mean)), Tensor::vector(std::move(var))};
  }

  std::size_t dim() const { return mean.cols(); }
  std::size_t count() const { return mean.rank() == 2 ? mean.rows() : 1; }
  DiagGaussian detach() const { return {mean.detach(), var.detach()}; }
};

/// Maps raw head outputs to a variance: softplus(raw) + floor.
inline Tensor positive_variance(const Tensor& raw) { return add_scalar(softplus(raw), kVarFloor); }

/// z = mean + sqrt(var) * eps, eps ~ N(0, I). For a [k, o] stack, each row
/// yields n consecutive samples, giving [k * n, o]. `zero_noise` forces eps = 0.
inline Tensor reparam_sample(const DiagGaussian& g, std::size_t n, std::mt19937_64& rng,
                             bool zero_noise = false) {
  if (n == 0) throw std::invalid_argument("sample count must be positive");
  std::size_t k = g.count(), o = g.dim();
  std::vector<std::size_t> idx(k * n);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) idx[i * n + j] = i;
  Tensor mu = g.mean.rank() == 2 ? g.mean : as_row(g.mean);
  Tensor sd = sqrt(g.var.rank() == 2 ? g.var : as_row(g.var));
  std::vector<double> eps(k * n * o, 0.0);
  if (!zero_noise) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& e : eps) e = normal(rng);
  }
  Tensor noise = Tensor::matrix(k * n, o, std::move(eps));
  return add(gather_rows(mu, idx), mul(gather_rows(sd, idx), noise));
}

/// KL(q || p), summed over dimensions; for stacks, averaged over rows.
inline Tensor kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.mean.shape() != p.mean.shape())
    throw DimensionError("kl_diag dimension mismatch: " + shape_str(q.mean.shape()) + " vs " +
                         shape_str(p.mean.shape()));
  Tensor ratio = div(q.var, p.var);
  Tensor diff = sub(p.mean, q.mean);
  Tensor terms = sub(add(ratio, div(square(diff), p.var)), log(ratio));
  Tensor per = scale(add_scalar(terms, -1.0), 0.5);
  double rows = static_cast<double>(q.count());
  return scale(sum(per), 1.0 / rows);
}

/// Moment-matched midpoint of two Gaussians: mean (mp + mq) / 2,
/// var (vp + vq) / 2 + ((mp - mq) / 2)^2.
inline DiagGaussian moment_matched_midpoint(const DiagGaussian& p, const DiagGaussian& q) {
  Tensor m = scale(add(p.mean, q.mean), 0.5);
  Tensor half = scale(sub(p.mean, q.mean), 0.5);
  Tensor v = add(scale(add(p.var, q.var), 0.5), square(half));
  return {m, v};
}

/// Jensen-Shannon surrogate: 0.5 KL(p || m) + 0.5 KL(q || m) with m the
/// moment-matched midpoint. Symmetric, non-negative, zero iff p == q.
inline Tensor js_diag(const DiagGaussian& p, const DiagGaussian& q) {
  if (p.mean.shape() != q.mean.shape())
    throw DimensionError("js_diag dimension mismatch: " + shape_str(p.mean.shape()) + " vs " +
                         shape_str(q.mean.shape()));
  DiagGaussian m = moment_matched_midpoint(p, q);
  return scale(add(kl_diag(p, m), kl_diag(q, m)), 0.5);
}

/// -sum p ln p (nats), with 0 ln 0 = 0.
inline double shannon_entropy(std::span<const double> probs) {
  double total = 0.0, h = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || p > 1.0) throw InvalidDistribution("probability outside [0, 1]");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidDistribution("probabilities do not sum to 1");
  return h;
}

/// Componentwise arithmetic mean of means and of variances.
inline DiagGaussian average_distributions(const std::vector<DiagGaussian>& ds) {
  if (ds.empty()) throw std::invalid_argument("average of zero distributions");
  Tensor m = ds[0].mean, v = ds[0].var;
  for (std::size_t i = 1; i < ds.size(); ++i) {
    if (ds[i].mean.shape() != m.shape()) throw DimensionError("averaging gaussians of unequal dims");
    m = add(m, ds[i].mean);
    v = add(v, ds[i].var);
  }
  double inv = 1.0 / static_cast<double>(ds.size());
  return {scale(m, inv), scale(v, inv)};
}

/// Averages a [k, o] stack down to one [o] distribution.
inline DiagGaussian collapse_rows(const DiagGaussian& g) {
  if (g.mean.rank() != 2) return g;
  return {mean_rows(g.mean), mean_rows(g.var)};
}

}  // namespace npcl
