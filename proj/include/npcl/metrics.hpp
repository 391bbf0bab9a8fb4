#pragma once
// Evaluation metrics: accuracy-matrix summaries, backward transfer,
// calibration errors, OOD variance scores, prediction-interval widths and the
// paired t-test over top-2 class probabilities.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcl/inference.hpp"

namespace npcl {

struct MetricError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Lower-triangular accuracy/uncertainty matrices indexed [t_train][t_eval].
class RunMatrix {
 public:
  explicit RunMatrix(std::size_t tasks = 0) : acc_(tasks), unc_(tasks) {
    for (std::size_t t = 0; t < tasks; ++t) {
      acc_[t].assign(t + 1, kMissing);
      unc_[t].assign(t + 1, kMissing);
    }
  }

  std::size_t tasks() const { return acc_.size(); }

  void set(std::size_t t_train, std::size_t t_eval, double acc, double unc) {
    check(t_train, t_eval);
    acc_[t_train][t_eval] = acc;
    unc_[t_train][t_eval] = unc;
  }
  double acc(std::size_t t_train, std::size_t t_eval) const { return at(acc_, t_train, t_eval); }
  double unc(std::size_t t_train, std::size_t t_eval) const { return at(unc_, t_train, t_eval); }
  bool filled(std::size_t t_train, std::size_t t_eval) const {
    check(t_train, t_eval);
    return !std::isnan(acc_[t_train][t_eval]);
  }
  bool complete() const {
    for (std::size_t i = 0; i < tasks(); ++i)
      for (std::size_t j = 0; j <= i; ++j)
        if (!filled(i, j)) return false;
    return tasks() > 0;
  }
  const std::vector<std::vector<double>>& acc_rows() const { return acc_; }
  const std::vector<std::vector<double>>& unc_rows() const { return unc_; }

  nlohmann::json to_json() const { return {{"tasks", tasks()}, {"acc", acc_}, {"unc", unc_}}; }
  static RunMatrix from_json(const nlohmann::json& j) {
    RunMatrix m(j.at("tasks").get<std::size_t>());
    auto a = j.at("acc").get<std::vector<std::vector<double>>>();
    auto u = j.at("unc").get<std::vector<std::vector<double>>>();
    if (a.size() != m.tasks() || u.size() != m.tasks()) throw MetricError("run matrix size mismatch");
    for (std::size_t i = 0; i < m.tasks(); ++i)
      for (std::size_t k = 0; k <= i; ++k) m.set(i, k, a.at(i).at(k), u.at(i).at(k));
    return m;
  }

 private:
  static constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

  void check(std::size_t i, std::size_t j) const {
    if (i >= tasks() || j > i)
      throw std::out_of_range("run matrix cell (" + std::to_string(i) + ", " + std::to_string(j) +
                              ") is outside the lower triangle");
  }
  double at(const std::vector<std::vector<double>>& m, std::size_t i, std::size_t j) const {
    check(i, j);
    return m[i][j];
  }

  std::vector<std::vector<double>> acc_, unc_;
};

/// Mean of the last row of the accuracy matrix.
inline double final_average_accuracy(const RunMatrix& m) {
  if (!m.complete()) throw MetricError("final_average_accuracy needs a complete run matrix");
  const std::size_t last = m.tasks() - 1;
  double s = 0.0;
  for (std::size_t j = 0; j <= last; ++j) s += m.acc(last, j);
  return s / static_cast<double>(m.tasks());
}

enum class Channel { acc, unc };

/// Mean over earlier tasks of (final-row value - diagonal value). The
/// uncertainty channel is scaled by 100.
inline double bwt(const RunMatrix& m, Channel ch) {
  if (m.tasks() < 2) throw MetricError("backward transfer needs at least two tasks");
  if (!m.complete()) throw MetricError("backward transfer needs a complete run matrix");
  const std::size_t last = m.tasks() - 1;
  auto v = [&](std::size_t i, std::size_t j) { return ch == Channel::acc ? m.acc(i, j) : m.unc(i, j); };
  double s = 0.0;
  for (std::size_t i = 0; i < last; ++i) s += v(last, i) - v(i, i);
  s /= static_cast<double>(last);
  return ch == Channel::unc ? 100.0 * s : s;
}

// ---------------------------------------------------------------- calibration

struct CalibrationSample {
  double confidence = 0.0;
  bool correct = false;
};

inline constexpr std::size_t kCalibrationBins = 15;

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0, confidence = 0.0;
};

namespace detail {

inline void check_calibration(std::span<const CalibrationSample> s, std::size_t bins) {
  if (s.empty()) throw MetricError("calibration error on empty input");
  if (bins == 0) throw MetricError("bin count must be positive");
  for (auto& e : s)
    if (!(e.confidence >= 0.0 && e.confidence <= 1.0))
      throw MetricError("confidence " + std::to_string(e.confidence) + " outside [0, 1]");
}

}  // namespace detail

/// Equal-width bins over [0, 1]; the last bin is closed.
inline std::vector<CalibrationBin> calibration_bins(std::span<const CalibrationSample> s,
                                                    std::size_t bins = kCalibrationBins) {
  detail::check_calibration(s, bins);
  std::vector<CalibrationBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = static_cast<double>(b) / static_cast<double>(bins);
    out[b].hi = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (auto& e : s) {
    auto b = std::min(static_cast<std::size_t>(std::floor(e.confidence * static_cast<double>(bins))),
                      bins - 1);
    ++out[b].count;
    out[b].accuracy += e.correct ? 1.0 : 0.0;
    out[b].confidence += e.confidence;
  }
  for (auto& b : out)
    if (b.count > 0) {
      b.accuracy /= static_cast<double>(b.count);
      b.confidence /= static_cast<double>(b.count);
    }
  return out;
}

inline double ece(std::span<const CalibrationSample> s, std::size_t bins = kCalibrationBins) {
  double e = 0.0;
  for (auto& b : calibration_bins(s, bins))
    if (b.count > 0)
      e += static_cast<double>(b.count) / static_cast<double>(s.size()) * std::abs(b.accuracy - b.confidence);
  return e;
}

/// Equal-count bins over sorted confidences; leading bins take the remainder.
inline double ace(std::span<const CalibrationSample> s, std::size_t bins = kCalibrationBins) {
  detail::check_calibration(s, bins);
  std::vector<CalibrationSample> sorted(s.begin(), s.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](auto& a, auto& b) { return a.confidence < b.confidence; });
  const std::size_t n = sorted.size(), base = n / bins, extra = n % bins;
  double total = 0.0;
  std::size_t used = 0, pos = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    std::size_t size = base + (b < extra ? 1 : 0);
    if (size == 0) continue;
    double acc = 0.0, conf = 0.0;
    for (std::size_t i = pos; i < pos + size; ++i) {
      acc += sorted[i].correct ? 1.0 : 0.0;
      conf += sorted[i].confidence;
    }
    pos += size;
    total += std::abs(acc - conf) / static_cast<double>(size);
    ++used;
  }
  return total / static_cast<double>(used);
}

inline std::vector<CalibrationSample> calibration_input(const std::vector<Prediction>& preds) {
  std::vector<CalibrationSample> s;
  s.reserve(preds.size());
  for (auto& p : preds) s.push_back({p.confidence, p.correct()});
  return s;
}

// ------------------------------------------------------------------------ OOD

struct OodScores {
  double var_softmax = 0.0, var_entropy = 0.0;
};

/// Per-sample row sequences of max softmax probability and row entropy.
struct RowScores {
  std::vector<double> max_prob, entropy;
};

inline OodScores ood_variances(std::span<const RowScores> samples) {
  if (samples.empty()) throw MetricError("ood_variances on an empty set");
  OodScores o;
  for (auto& s : samples) {
    if (s.max_prob.size() < 2 || s.entropy.size() != s.max_prob.size())
      throw MetricError("ood_variances needs at least two rows per sample");
    o.var_softmax += population_variance(s.max_prob);
    o.var_entropy += population_variance(s.entropy);
  }
  o.var_softmax /= static_cast<double>(samples.size());
  o.var_entropy /= static_cast<double>(samples.size());
  return o;
}

inline OodScores ood_variances(const std::vector<Prediction>& preds) {
  std::vector<RowScores> rows;
  rows.reserve(preds.size());
  for (auto& p : preds) rows.push_back({p.row_max_prob, p.row_entropy});
  return ood_variances(rows);
}

// ------------------------------------------------------------ PIW and t-test

/// Percentile q in [0, 100] with linear interpolation between order statistics.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw MetricError("percentile of an empty sequence");
  if (!(q >= 0.0 && q <= 100.0)) throw MetricError("percentile outside [0, 100]");
  std::sort(v.begin(), v.end());
  double rank = q / 100.0 * static_cast<double>(v.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(rank));
  auto hi = std::min(lo + 1, v.size() - 1);
  double w = rank - static_cast<double>(lo);
  return v[lo] + w * (v[hi] - v[lo]);
}

inline double piw(std::span<const double> true_class_probs, double lo = 2.5, double hi = 97.5) {
  if (true_class_probs.empty()) throw MetricError("piw of an empty sequence");
  std::vector<double> v(true_class_probs.begin(), true_class_probs.end());
  return percentile(v, hi) - percentile(v, lo);
}

namespace detail {

// Continued fraction for the incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15, kTiny = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw MetricError("incomplete beta argument outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log1p(-x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a t statistic with `dof` degrees of freedom.
inline double student_t_two_sided_p(double t, double dof) {
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t dof = 0;
  bool rejected = false;
};

/// Paired t-test on top1 - top2 differences.
inline TTestResult paired_t_test(std::span<const double> top1, std::span<const double> top2,
                                 double alpha = 0.05) {
  if (top1.size() != top2.size()) throw MetricError("paired sequences differ in length");
  const std::size_t n = top1.size();
  if (n < 2) throw MetricError("paired t-test needs at least two pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += top1[i] - top2[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = top1[i] - top2[i] - mean;
    ss += d * d;
  }
  TTestResult r;
  r.dof = n - 1;
  double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    if (mean == 0.0) return r;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p = 0.0;
    r.rejected = true;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided_p(r.t, static_cast<double>(r.dof));
  r.rejected = r.p < alpha;
  return r;
}

// ------------------------------------------------------ confidence table

enum class GroupBy { label, task };

struct ConfidenceRow {
  std::uint32_t group = 0;
  std::size_t count = 0;
  double accuracy = 0.0;  // majority-vote correctness, percent
  std::optional<double> piw_correct, piw_incorrect;
  std::size_t rejected = 0, not_rejected = 0;
  std::optional<double> acc_rejected, acc_not_rejected;
};

/// Per-group accuracy, mean true-class PIW split by majority-vote
/// correctness, and accuracy split by t-test outcome. Groups without samples
/// are absent.
inline std::vector<ConfidenceRow> confidence_report(const std::vector<Prediction>& preds,
                                                    GroupBy by = GroupBy::label, double alpha = 0.05) {
  struct Acc {
    std::size_t n = 0, ok = 0, n_rej = 0, ok_rej = 0, n_keep = 0, ok_keep = 0;
    double piw_ok = 0.0, piw_bad = 0.0;
  };
  std::map<std::uint32_t, Acc> groups;
  for (auto& p : preds) {
    auto& g = groups[by == GroupBy::label ? p.true_label : p.true_task];
    bool ok = p.majority_label == p.true_label;
    double w = piw(p.true_class_probs);
    auto t = paired_t_test(p.top1_probs, p.top2_probs, alpha);
    ++g.n;
    g.ok += ok;
    (ok ? g.piw_ok : g.piw_bad) += w;
    if (t.rejected) {
      ++g.n_rej;
      g.ok_rej += ok;
    } else {
      ++g.n_keep;
      g.ok_keep += ok;
    }
  }
  auto pct = [](std::size_t a, std::size_t b) { return 100.0 * static_cast<double>(a) / static_cast<double>(b); };
  std::vector<ConfidenceRow> rows;
  for (auto& [id, g] : groups) {
    ConfidenceRow r;
    r.group = id;
    r.count = g.n;
    r.accuracy = pct(g.ok, g.n);
    if (g.ok > 0) r.piw_correct = g.piw_ok / static_cast<double>(g.ok);
    if (g.n > g.ok) r.piw_incorrect = g.piw_bad / static_cast<double>(g.n - g.ok);
    r.rejected = g.n_rej;
    r.not_rejected = g.n_keep;
    if (g.n_rej > 0) r.acc_rejected = pct(g.ok_rej, g.n_rej);
    if (g.n_keep > 0) r.acc_not_rejected = pct(g.ok_keep, g.n_keep);
    rows.push_back(r);
  }
  return rows;
}

// -------------------------------------------------------------------- output

namespace detail {

inline std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  nlohmann::json j = *v;
  return j.dump();
}

inline std::string num(double v) {
  if (std::isnan(v)) return "NaN";
  nlohmann::json j = v;
  return j.dump();
}

}  // namespace detail

inline void write_run_matrix_tsv(std::ostream& os, const RunMatrix& m) {
  os << "t_train\tt_eval\tacc\tunc\n";
  for (std::size_t i = 0; i < m.tasks(); ++i)
    for (std::size_t j = 0; j <= i; ++j)
      os << i << '\t' << j << '\t' << detail::num(m.acc(i, j)) << '\t' << detail::num(m.unc(i, j)) << '\n';
}

inline void write_calibration_tsv(std::ostream& os, std::span<const CalibrationSample> s,
                                  std::size_t bins = kCalibrationBins) {
  os << "bin\tlo\thi\tcount\taccuracy\tconfidence\n";
  auto table = calibration_bins(s, bins);
  for (std::size_t b = 0; b < table.size(); ++b)
    os << b << '\t' << detail::num(table[b].lo) << '\t' << detail::num(table[b].hi) << '\t'
       << table[b].count << '\t' << detail::num(table[b].accuracy) << '\t'
       << detail::num(table[b].confidence) << '\n';
}

inline void write_confidence_table_tsv(std::ostream& os, const std::vector<ConfidenceRow>& rows,
                                       GroupBy by = GroupBy::label) {
  os << (by == GroupBy::label ? "class" : "task")
     << "\tcount\taccuracy\tpiw_correct\tpiw_incorrect\trejected\tnot_rejected\tacc_rejected\tacc_not_rejected\n";
  for (auto& r : rows)
    os << r.group << '\t' << r.count << '\t' << detail::num(r.accuracy) << '\t'
       << detail::cell(r.piw_correct) << '\t' << detail::cell(r.piw_incorrect) << '\t' << r.rejected
       << '\t' << r.not_rejected << '\t' << detail::cell(r.acc_rejected) << '\t'
       << detail::cell(r.acc_not_rejected) << '\n';
}

/// Raw top1 - top2 differences, one row per (sample, MC row).
inline void write_qq_raw_tsv(std::ostream& os, const std::vector<Prediction>& preds) {
  os << "sample_id\trow\tdiff\n";
  for (auto& p : preds)
    for (std::size_t r = 0; r < p.top1_probs.size(); ++r)
      os << p.sample_id << '\t' << r << '\t' << detail::num(p.top1_probs[r] - p.top2_probs[r]) << '\n';
}

}  // namespace npcl
