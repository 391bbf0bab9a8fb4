#pragma once
// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap shared handle to a graph node. Operations build the
// graph eagerly while gradient recording is enabled; backward() orders the
// reachable nodes topologically (the tape) and runs each node's local
// vector-Jacobian product in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace npcl {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RankError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GradientError : std::logic_error {
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return from(std::move(s), std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return matrix(rows.size(), cols, std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::vector<double> to_vector() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw RankError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(shape(), node_->data); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
  std::shared_ptr<detail::Node> node_;
};

/// Creates an op output; records parents and the local backward rule only
/// when recording is on and some input needs a gradient.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool need = false;
  if (grad_enabled())
    for (auto& t : inputs) need = need || t.requires_grad();
  if (need) {
    n->requires_grad = true;
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

namespace detail {

inline void check_finite_inputs(std::span<const double> v, const char* op) {
  for (double x : v)
    if (std::isnan(x)) throw NumericError(std::string("NaN input to ") + op);
}

// Rank <= 2 operands viewed as (rows, cols) for broadcasting.
struct View2 {
  std::size_t r, c;
};
inline View2 view2(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw RankError("broadcasting supports rank <= 2, got " + shape_str(s));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto va = view2(a), vb = view2(b);
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  };
  std::size_t r = dim(va.r, vb.r), c = dim(va.c, vb.c);
  std::size_t rank = std::max(a.size(), b.size());
  if (rank == 2) return {r, c};
  if (rank == 1) return {c};
  return {};
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

namespace detail {

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto vo = view2(out), va = view2(a.shape()), vb = view2(b.shape());
  std::vector<double> y(vo.r * vo.c);
  auto A = a.data();
  auto B = b.data();
  const bool same = a.shape() == b.shape();
  if (same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(A[i], B[i]);
  } else {
    for (std::size_t i = 0; i < vo.r; ++i)
      for (std::size_t j = 0; j < vo.c; ++j) {
        double x1 = A[(va.r == 1 ? 0 : i) * va.c + (va.c == 1 ? 0 : j)];
        double x2 = B[(vb.r == 1 ? 0 : i) * vb.c + (vb.c == 1 ? 0 : j)];
        y[i * vo.c + j] = f(x1, x2);
      }
  }
  return make_result(out, std::move(y), {a, b}, [=](Node& self) {
    auto* pa = self.parents[0].get();
    auto* pb = self.parents[1].get();
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (std::size_t i = 0; i < vo.r; ++i)
      for (std::size_t j = 0; j < vo.c; ++j) {
        std::size_t ia = (va.r == 1 ? 0 : i) * va.c + (va.c == 1 ? 0 : j);
        std::size_t ib = (vb.r == 1 ? 0 : i) * vb.c + (vb.c == 1 ? 0 : j);
        double g = self.grad[i * vo.c + j];
        double x1 = pa->data[ia], x2 = pb->data[ib];
        if (pa->requires_grad) pa->grad[ia] += g * da(x1, x2);
        if (pb->requires_grad) pb->grad[ib] += g * db(x1, x2);
      }
  });
}

template <class F, class D>
Tensor unary(const Tensor& a, F f, D d) {
  auto A = a.data();
  std::vector<double> y(A.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(A[i]);
  return make_result(a.shape(), std::move(y), {a}, [=](Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += self.grad[i] * d(p->data[i], self.data[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}
inline Tensor sqrt(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; },
                       [](double x, double) { return 2.0 * x; });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
/// log(1 + e^x), overflow-safe.
inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ----------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  auto A = a.data();
  double s = std::accumulate(A.begin(), A.end(), 0.0);
  return make_result({}, {s}, {a}, [](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0];
  });
}
inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Column means of a [m, n] matrix (rank-1 input passes through) -> [n].
inline Tensor mean_rows(const Tensor& a) {
  if (a.rank() == 1) return a;
  if (a.rank() != 2) throw RankError("mean_rows expects rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> y(n, 0.0);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j] += A[i * n + j];
  for (auto& v : y) v /= static_cast<double>(m);
  return make_result({n}, std::move(y), {a}, [m, n](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[j] * inv;
  });
}

/// Row sums of a [m, n] matrix -> [m]; rank-1 input -> scalar.
inline Tensor sum_cols(const Tensor& a) {
  if (a.rank() == 1) return sum(a);
  if (a.rank() != 2) throw RankError("sum_cols expects rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> y(m, 0.0);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += A[i * n + j];
  return make_result({m}, std::move(y), {a}, [m, n](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[i];
  });
}

// -------------------------------------------------------------------- shaping

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  return make_result(std::move(shape), a.to_vector(), {a}, [](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}
inline Tensor as_row(const Tensor& a) { return reshape(a, {1, a.numel()}); }

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw RankError("transpose expects rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> y(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = A[i * n + j];
  return make_result({n, m}, std::move(y), {a}, [m, n](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[j * m + i];
  });
}

/// Concatenates rank-2 tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.rank() != 2 || p.rows() != m)
      throw DimensionError("concat_cols: shape " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> y(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto P = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(P.begin() + i * widths[k], widths[k], y.begin() + i * total + off);
    off += widths[k];
  }
  return make_result({m, total}, std::move(y), parts, [m, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto* p = self.parents[k].get();
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            p->grad[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Stacks rank-2 tensors with equal column counts along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  std::size_t n = parts[0].cols();
  std::vector<std::size_t> heights;
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.rank() != 2 || p.cols() != n)
      throw DimensionError("concat_rows: shape " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    heights.push_back(p.rows());
    total += p.rows();
  }
  std::vector<double> y;
  y.reserve(total * n);
  for (auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  return make_result({total, n}, std::move(y), parts, [n, heights](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < heights.size(); ++k) {
      auto* p = self.parents[k].get();
      std::size_t cnt = heights[k] * n;
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < cnt; ++i) p->grad[i] += self.grad[off + i];
      }
      off += cnt;
    }
  });
}

/// Selects rows by index (repeats allowed); gradients scatter-add back.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> idx) {
  if (a.rank() != 2) throw RankError("gather_rows expects rank 2, got " + shape_str(a.shape()));
  if (idx.empty()) throw DimensionError("gather_rows with no indices");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> y(idx.size() * n);
  auto A = a.data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= m) throw DimensionError("gather_rows index out of range");
    std::copy_n(A.begin() + idx[k] * n, n, y.begin() + k * n);
  }
  std::size_t out_rows = idx.size();
  return make_result({out_rows, n}, std::move(y), {a},
                     [n, idx = std::move(idx)](detail::Node& self) {
                       auto* p = self.parents[0].get();
                       p->ensure_grad();
                       for (std::size_t k = 0; k < idx.size(); ++k)
                         for (std::size_t j = 0; j < n; ++j)
                           p->grad[idx[k] * n + j] += self.grad[k * n + j];
                     });
}

/// Replicates a row vector ([n] or [1, n]) into [m, n].
inline Tensor repeat_rows(const Tensor& a, std::size_t m) {
  Tensor row = a.rank() == 2 ? a : as_row(a);
  if (row.rows() != 1) throw DimensionError("repeat_rows expects a single row");
  return gather_rows(row, std::vector<std::size_t>(m, 0));
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2) throw RankError("slice_cols expects rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  if (begin >= end || end > n) throw DimensionError("slice_cols range out of bounds");
  std::size_t w = end - begin;
  std::vector<double> y(m * w);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A.begin() + i * n + begin, w, y.begin() + i * w);
  return make_result({m, w}, std::move(y), {a}, [m, n, w, begin](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) p->grad[i * n + begin + j] += self.grad[i * w + j];
  });
}

/// Picks one entry per row: out[i] = a[i, cols[i]].
inline Tensor pick(const Tensor& a, std::vector<std::size_t> cols) {
  if (a.rank() != 2 || cols.size() != a.rows())
    throw DimensionError("pick: need one column index per row of " + shape_str(a.shape()));
  std::size_t m = a.rows(), n = a.cols();
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= n) throw DimensionError("pick: column index out of range");
    y[i] = a.data()[i * n + cols[i]];
  }
  return make_result({m}, std::move(y), {a}, [n, cols = std::move(cols)](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < cols.size(); ++i) p->grad[i * n + cols[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------- linear alg

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  std::vector<double> y(static_cast<std::size_t>(m * n));
  Eigen::Map<Mat>(y.data(), m, n).noalias() =
      Eigen::Map<const Mat>(a.data().data(), m, k) * Eigen::Map<const Mat>(b.data().data(), k, n);
  return make_result({a.shape()[0], b.shape()[1]}, std::move(y), {a, b},
                     [m, k, n](detail::Node& self) {
                       auto* pa = self.parents[0].get();
                       auto* pb = self.parents[1].get();
                       Eigen::Map<const Mat> G(self.grad.data(), m, n);
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         Eigen::Map<Mat>(pa->grad.data(), m, k).noalias() +=
                             G * Eigen::Map<const Mat>(pb->data.data(), k, n).transpose();
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         Eigen::Map<Mat>(pb->grad.data(), k, n).noalias() +=
                             Eigen::Map<const Mat>(pa->data.data(), m, k).transpose() * G;
                       }
                     });
}

// ------------------------------------------------------ normalized activations

/// Softmax along the last axis with max subtraction.
inline Tensor softmax(const Tensor& x) {
  detail::check_finite_inputs(x.data(), "softmax");
  std::size_t n = x.cols(), m = x.numel() / n;
  std::vector<double> y(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = X.data() + i * n;
    double mx = *std::max_element(r, r + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (y[i * n + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= s;
  }
  return make_result(x.shape(), std::move(y), {x}, [m, n](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        p->grad[i * n + j] += self.data[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& x) {
  detail::check_finite_inputs(x.data(), "log_softmax");
  std::size_t n = x.cols(), m = x.numel() / n;
  std::vector<double> y(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = X.data() + i * n;
    double mx = *std::max_element(r, r + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(r[j] - mx);
    double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = r[j] - lse;
  }
  return make_result(x.shape(), std::move(y), {x}, [m, n](detail::Node& self) {
    auto* p = self.parents[0].get();
    p->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        p->grad[i * n + j] += self.grad[i * n + j] - std::exp(self.data[i * n + j]) * gs;
    }
  });
}

/// Per-row standardization followed by an affine map with `gain` and `bias` ([d]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() == 0 || x.cols() == 0) throw DimensionError("layer_norm over an empty dimension");
  std::size_t d = x.cols(), m = x.numel() / d;
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm affine parameters must have " + std::to_string(d) +
                         " entries");
  std::vector<double> y(x.numel()), xhat(x.numel()), inv_std(m);
  auto X = x.data();
  auto G = gain.data();
  auto B = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = X.data() + i * d;
    double mu = std::accumulate(r, r + d, 0.0) / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (r[j] - mu) * inv_std[i];
      y[i * d + j] = xhat[i * d + j] * G[j] + B[j];
    }
  }
  return make_result(x.shape(), std::move(y), {x, gain, bias},
                     [m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                       auto* px = self.parents[0].get();
                       auto* pg = self.parents[1].get();
                       auto* pb = self.parents[2].get();
                       if (pg->requires_grad) pg->ensure_grad();
                       if (pb->requires_grad) pb->ensure_grad();
                       if (px->requires_grad) px->ensure_grad();
                       std::vector<double> gx(d);
                       for (std::size_t i = 0; i < m; ++i) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           double g = self.grad[i * d + j];
                           if (pg->requires_grad) pg->grad[j] += g * xhat[i * d + j];
                           if (pb->requires_grad) pb->grad[j] += g;
                           gx[j] = g * pg->data[j];
                           s1 += gx[j];
                           s2 += gx[j] * xhat[i * d + j];
                         }
                         if (!px->requires_grad) continue;
                         double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j)
                           px->grad[i * d + j] +=
                               inv_std[i] * (gx[j] - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
                       }
                     });
}

// ------------------------------------------------------------------- backward

/// Topologically ordered nodes reachable from a root (inputs before outputs).
class Tape {
 public:
  explicit Tape(const Tensor& root) {
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order_.push_back(n);
        stack.pop_back();
      }
    }
  }
  const std::vector<detail::Node*>& order() const { return order_; }

 private:
  std::vector<detail::Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a gradient.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw RankError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  Tape tape(loss);
  for (auto* n : tape.order()) {
    if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
    else n->ensure_grad();
  }
  loss.node()->grad[0] += 1.0;
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

}  // namespace npcl
