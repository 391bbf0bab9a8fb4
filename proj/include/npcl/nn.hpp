#pragma once
// Layers built on the tensor core: fully connected, MLP stacks with optional
// layer normalization, and multi-head scaled dot-product attention.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "npcl/params.hpp"
#include "npcl/tensor.hpp"

namespace npcl::nn {

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng)
      : in_(in), out_(out) {
    w_ = store.add(name + ".w", {in, out}, xavier_uniform(in, out, rng));
    b_ = store.add(name + ".b", {out}, std::vector<double>(out, 0.0));
  }
  Tensor operator()(const Tensor& x) const {
    if (x.cols() != in_)
      throw DimensionError("linear layer expects " + std::to_string(in_) + " inputs, got " +
                           shape_str(x.shape()));
    return add(matmul(x.rank() == 2 ? x : as_row(x), w_), b_);
  }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor w_, b_;
};

/// in -> [hidden -> (LayerNorm) -> ReLU] x depth -> out.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
      std::size_t depth, std::size_t out, bool layer_norm, std::mt19937_64& rng) {
    std::size_t width = in;
    for (std::size_t i = 0; i < depth; ++i) {
      std::string ln = name + ".h" + std::to_string(i);
      hidden_.emplace_back(store, ln, width, hidden, rng);
      if (layer_norm) {
        gains_.push_back(store.add(ln + ".ln_gain", {hidden}, std::vector<double>(hidden, 1.0)));
        biases_.push_back(store.add(ln + ".ln_bias", {hidden}, std::vector<double>(hidden, 0.0)));
      }
      width = hidden;
    }
    out_ = Linear(store, name + ".out", width, out, rng);
  }

  Tensor operator()(Tensor x) const {
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
      x = hidden_[i](x);
      if (!gains_.empty()) x = layer_norm(x, gains_[i], biases_[i]);
      x = relu(x);
    }
    return out_(x);
  }
  std::size_t in() const { return hidden_.empty() ? out_.in() : hidden_.front().in(); }
  std::size_t out() const { return out_.out(); }

 private:
  std::vector<Linear> hidden_;
  std::vector<Tensor> gains_, biases_;
  Linear out_;
};

/// Row-stochastic attention matrix [queries x keys], averaged over heads.
struct AttentionWeights {
  std::size_t queries = 0, keys = 0;
  std::vector<double> w;
};

/// Multi-head scaled dot-product attention. Queries and keys are projected
/// per head; values are projected (and the heads re-mixed by an output
/// projection) unless `project_values` is false, in which case each head
/// attends over its own column block of the raw values.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t query_dim,
                     std::size_t key_dim, std::size_t value_dim, std::size_t model_dim,
                     std::size_t heads, bool project_values, std::mt19937_64& rng)
      : heads_(heads), model_dim_(model_dim), value_dim_(value_dim), project_values_(project_values) {
    if (heads == 0 || model_dim % heads != 0)
      throw std::invalid_argument("attention width " + std::to_string(model_dim) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    q_ = Linear(store, name + ".q", query_dim, model_dim, rng);
    k_ = Linear(store, name + ".k", key_dim, model_dim, rng);
    if (project_values) {
      v_ = Linear(store, name + ".v", value_dim, model_dim, rng);
      o_ = Linear(store, name + ".o", model_dim, model_dim, rng);
    } else if (value_dim % heads != 0) {
      throw std::invalid_argument("value width not divisible by head count");
    }
  }

  Tensor operator()(const Tensor& queries, const Tensor& keys, const Tensor& values,
                    AttentionWeights* weights_out = nullptr) const {
    if (keys.rows() != values.rows())
      throw DimensionError("attention keys and values differ in count");
    Tensor q = q_(queries), k = k_(keys);
    Tensor v = project_values_ ? v_(values) : values;
    std::size_t dh = model_dim_ / heads_;
    std::size_t vh = (project_values_ ? model_dim_ : value_dim_) / heads_;
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    if (weights_out) {
      weights_out->queries = q.rows();
      weights_out->keys = k.rows();
      weights_out->w.assign(q.rows() * k.rows(), 0.0);
    }
    for (std::size_t h = 0; h < heads_; ++h) {
      Tensor qh = heads_ == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
      Tensor kh = heads_ == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
      Tensor vv = heads_ == 1 ? v : slice_cols(v, h * vh, (h + 1) * vh);
      Tensor w = softmax(scale(matmul(qh, transpose(kh)), inv));
      if (weights_out)
        for (std::size_t i = 0; i < w.numel(); ++i)
          weights_out->w[i] += w[i] / static_cast<double>(heads_);
      outs.push_back(matmul(w, vv));
    }
    Tensor out = outs.size() == 1 ? outs[0] : concat_cols(outs);
    return project_values_ ? o_(out) : out;
  }

 private:
  std::size_t heads_ = 1, model_dim_ = 0, value_dim_ = 0;
  bool project_values_ = true;
  Linear q_, k_, v_, o_;
};

}  // namespace npcl::nn
