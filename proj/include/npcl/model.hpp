#pragma once
// Hierarchical neural-process classifier for continual learning.
//
// Latent path: [x; y] -> MLP -> task-wise self-attention (s^t) -> shared
// cross-attention over all encodings (s^G). The global encoder maps the mean
// of s^G to N(mu_G, var_G); each task encoder psi^t maps [mean s^t ; z^G_i]
// to N(mu_t, var_t), one distribution per global sample.
//
// Deterministic path: [x; y] -> MLP -> self-attention (r_i), then
// target-to-context cross-attention with context features as keys and
// target features as queries (r_*).
//
// Decoder: MLP([x_*; r_*; z]) -> logits over the classes seen so far.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "npcl/distributions.hpp"
#include "npcl/nn.hpp"
#include "npcl/params.hpp"
#include "npcl/sample.hpp"

namespace npcl {

enum class Variant { npcl, st_npcl, np, anp };

inline Variant parse_variant(std::string_view s) {
  if (s == "npcl") return Variant::npcl;
  if (s == "st_npcl") return Variant::st_npcl;
  if (s == "np") return Variant::np;
  if (s == "anp") return Variant::anp;
  throw std::invalid_argument("unknown variant '" + std::string(s) +
                              "' (expected npcl, st_npcl, np or anp)");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::npcl: return "npcl";
    case Variant::st_npcl: return "st_npcl";
    case Variant::np: return "np";
    case Variant::anp: return "anp";
  }
  return "?";
}

struct NoContextError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t input_dim = 32;
  std::size_t backbone_hidden = 64;
  std::size_t feature_dim = 32;  // |f|
  std::size_t hidden_dim = 256;  // |o|
  std::size_t num_hidden = 2;    // 2 for class-IL, 1 for domain-IL
  bool layer_norm = true;        // class-IL layers use layer normalization
  std::size_t n_train = 50;      // N while training
  std::size_t n_eval = 10;       // N at evaluation
  std::size_t m_task = 1;        // M per global sample
  Variant variant = Variant::npcl;
  std::size_t attention_heads = 4;
  std::vector<std::size_t> class_count_per_task{2, 2, 2, 2, 2};
  bool shared_classes = false;  // domain-IL: every task reuses one label set
  std::uint64_t init_seed = 0;

  std::size_t num_tasks() const { return class_count_per_task.size(); }
  std::size_t num_classes() const {
    if (class_count_per_task.empty()) return 0;
    if (shared_classes) return class_count_per_task.front();
    std::size_t n = 0;
    for (auto c : class_count_per_task) n += c;
    return n;
  }
  /// Width of the logit space once `seen_tasks` tasks have arrived.
  std::size_t seen_classes(std::size_t seen_tasks) const {
    if (shared_classes) return num_classes();
    std::size_t n = 0;
    for (std::size_t t = 0; t < std::min(seen_tasks, num_tasks()); ++t) n += class_count_per_task[t];
    return n;
  }

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(what);
    };
    need(input_dim > 0 && feature_dim > 0 && hidden_dim > 0 && backbone_hidden > 0,
         "model dimensions must be positive");
    need(num_hidden >= 1, "num_hidden must be at least 1");
    need(n_train >= 1 && n_eval >= 1 && m_task >= 1, "Monte Carlo sample counts must be >= 1");
    need(attention_heads >= 1 && hidden_dim % attention_heads == 0,
         "hidden_dim must be divisible by attention_heads");
    need(!class_count_per_task.empty(), "class_count_per_task must list at least one task");
    for (auto c : class_count_per_task) need(c >= 1, "every task needs at least one class");
  }
};

/// Output of the latent path for one input set.
struct LatentEncoding {
  std::optional<DiagGaussian> global;           // [o]
  Tensor z_global;                              // [N, o]
  std::map<std::uint32_t, DiagGaussian> task;   // [N, o] stacks (npcl) or [o] (st_npcl)
  std::map<std::uint32_t, Tensor> z_task;       // [N * M, o]
  std::map<std::uint32_t, Tensor> task_summary; // mean of s^t per task
};

struct EncodeOptions {
  std::size_t samples = 1;
  /// Task heads to produce. Empty: every task present in the input set.
  std::vector<std::uint32_t> heads;
  /// Replaces the sampled z^G (the prior is conditioned on posterior samples).
  const Tensor* z_global_override = nullptr;
  bool zero_noise = false;
};

/// Everything the objectives need from one training forward pass.
struct TrainForward {
  Tensor logits;                         // [targets * K, seen classes], grouped by task
  std::vector<std::size_t> row_labels;   // label for each logit row
  std::vector<std::size_t> row_target;   // target index for each logit row
  std::size_t rows_per_target = 1;       // K
  LatentEncoding posterior;              // from the target set
  LatentEncoding prior;                  // from the context set
};

/// Options that alter how the training prior is formed.
struct TrainForwardOptions {
  /// Reassigns context task ids before encoding the prior (noisy-prior ablation).
  std::map<std::uint32_t, std::uint32_t> context_task_route;
  bool zero_noise = false;
};

/// Context-conditioned state reused across target batches at inference.
struct InferenceContext {
  Tensor context_features;             // [m, f]
  Tensor context_values;               // r_i, [m, o]
  std::vector<std::uint32_t> heads;    // head ids in output order
  std::vector<Tensor> head_latents;    // [K, o] per head
  std::size_t classes = 0;
  LatentEncoding prior;
};

/// Per-head logits for a batch of targets: head_logits[h] is [targets * K, C].
struct InferOutput {
  std::vector<std::uint32_t> heads;
  std::vector<Tensor> head_logits;
  std::size_t rows_per_target = 1;
  std::size_t targets = 0;
};

namespace detail {

// First decoder layer applied to [x_*; r_*; z] without materializing the
// replicated concatenation: W [x; r; z] = W_t [x; r] + W_z z.
class PairDecoder {
 public:
  PairDecoder() = default;
  PairDecoder(ParameterStore& store, const std::string& name, std::size_t target_dim,
              std::size_t latent_dim, std::size_t hidden, std::size_t depth, std::size_t out,
              bool layer_norm, std::mt19937_64& rng)
      : target_dim_(target_dim), latent_dim_(latent_dim) {
    auto w = xavier_uniform(target_dim + latent_dim, hidden, rng);
    std::vector<double> wt(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(target_dim * hidden));
    std::vector<double> wz(w.begin() + static_cast<std::ptrdiff_t>(target_dim * hidden), w.end());
    w_target_ = store.add(name + ".h0.w_target", {target_dim, hidden}, std::move(wt));
    w_latent_ = store.add(name + ".h0.w_latent", {latent_dim, hidden}, std::move(wz));
    b_ = store.add(name + ".h0.b", {hidden}, std::vector<double>(hidden, 0.0));
    if (layer_norm) {
      gain_ = store.add(name + ".h0.ln_gain", {hidden}, std::vector<double>(hidden, 1.0));
      bias_ = store.add(name + ".h0.ln_bias", {hidden}, std::vector<double>(hidden, 0.0));
    }
    rest_ = nn::Mlp(store, name + ".tail", hidden, hidden, depth - 1, out, layer_norm, rng);
  }

  /// targets [n, target_dim], latents [K, latent_dim] -> [n * K, out], target-major.
  Tensor operator()(const Tensor& targets, const Tensor& latents) const {
    if (targets.cols() != target_dim_ || latents.cols() != latent_dim_)
      throw DimensionError("decoder input widths " + shape_str(targets.shape()) + " / " +
                           shape_str(latents.shape()) + " do not match the decoder");
    std::size_t n = targets.rows(), k = latents.rows();
    Tensor ht = matmul(targets, w_target_);
    Tensor hz = matmul(latents, w_latent_);
    std::vector<std::size_t> ti(n * k), zi(n * k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        ti[i * k + j] = i;
        zi[i * k + j] = j;
      }
    Tensor h = add(add(gather_rows(ht, std::move(ti)), gather_rows(hz, std::move(zi))), b_);
    if (gain_.defined()) h = layer_norm(h, gain_, bias_);
    return rest_(relu(h));
  }

 private:
  std::size_t target_dim_ = 0, latent_dim_ = 0;
  Tensor w_target_, w_latent_, b_, gain_, bias_;
  nn::Mlp rest_;
};

inline std::map<std::uint32_t, std::vector<std::size_t>> group_by_task(const SampleSet& s) {
  std::map<std::uint32_t, std::vector<std::size_t>> g;
  for (std::size_t i = 0; i < s.size(); ++i) g[s[i].task].push_back(i);
  return g;
}

}  // namespace detail

class NpclModel {
 public:
  explicit NpclModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.init_seed);
    const auto f = cfg_.feature_dim, o = cfg_.hidden_dim, c = cfg_.num_classes();
    const auto heads = cfg_.attention_heads;
    const bool ln = cfg_.layer_norm;

    backbone_ = nn::Mlp(store_, "backbone", cfg_.input_dim, cfg_.backbone_hidden, 1, f, false, rng);
    phi_lat_ = nn::Mlp(store_, "latent.phi", f + c, o, cfg_.num_hidden, o, ln, rng);
    if (cfg_.variant != Variant::np)
      sa_lat_ = nn::MultiHeadAttention(store_, "latent.self_attn", o, o, o, o, heads, true, rng);
    if (cfg_.variant == Variant::npcl)
      ca_lat_ = nn::MultiHeadAttention(store_, "latent.cross_attn", o, o, o, o, heads, true, rng);
    if (has_global()) {
      psi_g_mean_ = nn::Mlp(store_, "latent.psi_global.mean", o, o, 1, o, false, rng);
      psi_g_var_ = nn::Mlp(store_, "latent.psi_global.var", o, o, 1, o, false, rng);
    }
    if (has_task_heads()) {
      std::size_t in = cfg_.variant == Variant::npcl ? 2 * o : o;
      for (std::size_t t = 0; t < cfg_.num_tasks(); ++t) {
        std::string base = "latent.psi_task." + std::to_string(t);
        psi_t_mean_.emplace_back(store_, base + ".mean", in, o, 1, o, false, rng);
        psi_t_var_.emplace_back(store_, base + ".var", in, o, 1, o, false, rng);
      }
    }
    if (has_deterministic()) {
      phi_det_ = nn::Mlp(store_, "det.phi", f + c, o, cfg_.num_hidden, o, ln, rng);
      sa_det_ = nn::MultiHeadAttention(store_, "det.self_attn", o, o, o, o, heads, true, rng);
      ca_det_ = nn::MultiHeadAttention(store_, "det.cross_attn", f, f, o, o, heads, false, rng);
    }
    decoder_ = detail::PairDecoder(store_, "decoder", has_deterministic() ? f + o : f, o, o,
                                   cfg_.num_hidden, c, ln, rng);
  }

  // Layers hold handles into the store; a copy would alias the parameters.
  NpclModel(const NpclModel&) = delete;
  NpclModel& operator=(const NpclModel&) = delete;
  NpclModel(NpclModel&&) = default;
  NpclModel& operator=(NpclModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  bool has_global() const { return cfg_.variant != Variant::st_npcl; }
  bool has_task_heads() const {
    return cfg_.variant == Variant::npcl || cfg_.variant == Variant::st_npcl;
  }
  bool has_deterministic() const { return cfg_.variant != Variant::np; }

  /// Latent rows decoded per target and head: N * M.
  std::size_t rows_per_head(std::size_t n) const { return n * cfg_.m_task; }

  Tensor features(const SampleSet& s) const { return backbone_(stack_inputs(s)); }
  Tensor features(const Tensor& raw) const { return backbone_(raw); }

  // ------------------------------------------------------------ latent path

  LatentEncoding encode_latent(const Tensor& feats, const SampleSet& set, const EncodeOptions& opt,
                               std::mt19937_64& rng) const {
    if (set.empty()) throw std::invalid_argument("encode_latent on an empty set");
    for (auto& s : set)
      if (s.task >= cfg_.num_tasks())
        throw std::out_of_range("unknown task id " + std::to_string(s.task));
    for (auto h : opt.heads)
      if (h >= cfg_.num_tasks()) throw std::out_of_range("unknown task head " + std::to_string(h));

    const std::size_t o = cfg_.hidden_dim;
    Tensor phi = phi_lat_(concat_cols({feats, one_hot(set, cfg_.num_classes())}));
    auto groups = detail::group_by_task(set);
    LatentEncoding enc;

    std::vector<std::uint32_t> heads = opt.heads;
    if (heads.empty())
      for (auto& [t, _] : groups) heads.push_back(t);

    if (cfg_.variant == Variant::np || cfg_.variant == Variant::anp) {
      Tensor s = cfg_.variant == Variant::anp ? sa_lat_(phi, phi, phi) : phi;
      enc.global = global_head(mean_rows(s));
      enc.z_global = sample_global(*enc.global, opt, rng);
      return enc;
    }

    std::vector<Tensor> per_task;
    for (auto& [t, idx] : groups) {
      Tensor p = gather_rows(phi, idx);
      Tensor s = sa_lat_(p, p, p);
      enc.task_summary[t] = mean_rows(s);
      per_task.push_back(s);
    }

    if (cfg_.variant == Variant::st_npcl) {
      for (auto t : heads) {
        Tensor summary = task_summary_or_zero(enc, t, o);
        DiagGaussian g{reshape(psi_t_mean_[t](summary), {o}),
                       positive_variance(reshape(psi_t_var_[t](summary), {o}))};
        enc.z_task[t] = reparam_sample(g, opt.samples * cfg_.m_task, rng, opt.zero_noise);
        enc.task[t] = std::move(g);
      }
      return enc;
    }

    Tensor all = per_task.size() == 1 ? per_task[0] : concat_rows(per_task);
    Tensor s_global = ca_lat_(all, all, all);
    enc.global = global_head(mean_rows(s_global));
    enc.z_global = sample_global(*enc.global, opt, rng);
    const std::size_t n = enc.z_global.rows();
    for (auto t : heads) {
      Tensor summary = task_summary_or_zero(enc, t, o);
      Tensor in = concat_cols({repeat_rows(summary, n), enc.z_global});
      DiagGaussian g{psi_t_mean_[t](in), positive_variance(psi_t_var_[t](in))};
      enc.z_task[t] = reparam_sample(g, cfg_.m_task, rng, opt.zero_noise);
      enc.task[t] = std::move(g);
    }
    return enc;
  }

  LatentEncoding encode_latent(const SampleSet& set, const EncodeOptions& opt,
                               std::mt19937_64& rng) const {
    return encode_latent(features(set), set, opt, rng);
  }

  // ----------------------------------------------------- deterministic path

  /// Self-attended context representations r_i.
  Tensor context_values(const Tensor& ctx_feats, const SampleSet& context) const {
    require_deterministic();
    Tensor p = phi_det_(concat_cols({ctx_feats, one_hot(context, cfg_.num_classes())}));
    return sa_det_(p, p, p);
  }

  /// r_* for each target: keys are context features, queries target features.
  Tensor cross_attend(const Tensor& target_feats, const Tensor& ctx_feats, const Tensor& values,
                      nn::AttentionWeights* weights = nullptr) const {
    require_deterministic();
    return ca_det_(target_feats, ctx_feats, values, weights);
  }

  Tensor encode_deterministic(const Tensor& ctx_feats, const SampleSet& context,
                              const Tensor& target_feats,
                              nn::AttentionWeights* weights = nullptr) const {
    if (context.empty()) throw NoContextError("deterministic path needs a nonempty context");
    return cross_attend(target_feats, ctx_feats, context_values(ctx_feats, context), weights);
  }

  Tensor encode_deterministic(const SampleSet& context, const SampleSet& targets,
                              nn::AttentionWeights* weights = nullptr) const {
    if (context.empty()) throw NoContextError("deterministic path needs a nonempty context");
    return encode_deterministic(features(context), context, features(targets), weights);
  }

  // ---------------------------------------------------------------- decoder

  /// Logits [targets * K, classes] for each target paired with each latent row.
  Tensor decode(const Tensor& target_feats, const Tensor& r_star, const Tensor& z,
                std::size_t classes) const {
    Tensor t = target_feats;
    if (has_deterministic()) {
      if (!r_star.defined() || r_star.rows() != target_feats.rows())
        throw DimensionError("decoder needs one r_* row per target");
      t = concat_cols({target_feats, r_star});
    }
    Tensor logits = decoder_(t, z);
    if (classes == 0 || classes > cfg_.num_classes())
      throw DimensionError("class count outside the logit space");
    return classes == cfg_.num_classes() ? logits : slice_cols(logits, 0, classes);
  }

  // ------------------------------------------------------------ train/infer

  TrainForward forward_train(const SampleSet& context, const SampleSet& target,
                             std::size_t seen_tasks, std::mt19937_64& rng,
                             const TrainForwardOptions& opt = {}) const {
    if (target.empty()) throw std::invalid_argument("empty target set");
    if (context.empty()) throw NoContextError("training needs a nonempty context set");
    const std::size_t classes = cfg_.seen_classes(seen_tasks);
    for (auto& s : target)
      if (s.task >= cfg_.num_tasks())
        throw std::out_of_range("target task " + std::to_string(s.task) + " has no latent head");

    TrainForward out;
    Tensor ft = features(target);
    Tensor fc = features(context);
    EncodeOptions post_opt;
    post_opt.samples = cfg_.n_train;
    post_opt.zero_noise = opt.zero_noise;
    out.posterior = encode_latent(ft, target, post_opt, rng);

    SampleSet routed = context;
    for (auto& s : routed)
      if (auto it = opt.context_task_route.find(s.task); it != opt.context_task_route.end())
        s.task = it->second;
    EncodeOptions prior_opt = post_opt;
    if (cfg_.variant == Variant::npcl) prior_opt.z_global_override = &out.posterior.z_global;
    // Every posterior head gets a prior, even when routing left it without context.
    for (auto& [t, _] : out.posterior.task) prior_opt.heads.push_back(t);
    out.prior = encode_latent(fc, routed, prior_opt, rng);

    Tensor r_star;
    if (has_deterministic()) r_star = encode_deterministic(fc, context, ft);

    std::vector<Tensor> parts;
    if (!has_task_heads()) {
      out.rows_per_target = out.posterior.z_global.rows();
      parts.push_back(decode(ft, r_star, out.posterior.z_global, classes));
      for (std::size_t i = 0; i < target.size(); ++i)
        for (std::size_t k = 0; k < out.rows_per_target; ++k) {
          out.row_labels.push_back(target[i].label);
          out.row_target.push_back(i);
        }
    } else {
      for (auto& [t, idx] : detail::group_by_task(target)) {
        const Tensor& z = out.posterior.z_task.at(t);
        out.rows_per_target = z.rows();
        Tensor r = has_deterministic() ? gather_rows(r_star, idx) : Tensor{};
        parts.push_back(decode(gather_rows(ft, idx), r, z, classes));
        for (auto i : idx)
          for (std::size_t k = 0; k < z.rows(); ++k) {
            out.row_labels.push_back(target[i].label);
            out.row_target.push_back(i);
          }
      }
    }
    out.logits = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return out;
  }

  /// Encodes the (memory) context once: priors and one latent block per head.
  InferenceContext prepare_inference(const SampleSet& context, std::size_t seen_tasks,
                                     std::mt19937_64& rng) const {
    if (context.empty()) throw NoContextError("inference requires a nonempty replay context");
    if (seen_tasks == 0 || seen_tasks > cfg_.num_tasks())
      throw std::out_of_range("seen task count out of range");
    NoGradGuard guard;
    InferenceContext ctx;
    ctx.classes = cfg_.seen_classes(seen_tasks);
    ctx.context_features = features(context);
    if (has_deterministic()) ctx.context_values = context_values(ctx.context_features, context);
    EncodeOptions opt;
    opt.samples = cfg_.n_eval;
    if (has_task_heads())
      for (std::uint32_t t = 0; t < seen_tasks; ++t) opt.heads.push_back(t);
    ctx.prior = encode_latent(ctx.context_features, context, opt, rng);
    if (has_task_heads()) {
      for (auto t : opt.heads) {
        ctx.heads.push_back(t);
        ctx.head_latents.push_back(ctx.prior.z_task.at(t));
      }
    } else {
      ctx.heads.push_back(0);
      ctx.head_latents.push_back(ctx.prior.z_global);
    }
    return ctx;
  }

  InferOutput infer(const InferenceContext& ctx, const Tensor& raw_targets) const {
    NoGradGuard guard;
    InferOutput out;
    Tensor ft = features(raw_targets);
    Tensor r_star;
    if (has_deterministic()) r_star = cross_attend(ft, ctx.context_features, ctx.context_values);
    out.heads = ctx.heads;
    out.targets = raw_targets.rows();
    for (auto& z : ctx.head_latents) {
      out.rows_per_target = z.rows();
      out.head_logits.push_back(decode(ft, r_star, z, ctx.classes));
    }
    return out;
  }

  InferOutput forward_infer(const SampleSet& context, const SampleSet& targets,
                            std::size_t seen_tasks, std::mt19937_64& rng) const {
    auto ctx = prepare_inference(context, seen_tasks, rng);
    return infer(ctx, stack_inputs(targets));
  }

  /// Deterministic-path cross-attention weights, averaged over heads.
  nn::AttentionWeights attention_weights(const SampleSet& context, const SampleSet& targets) const {
    NoGradGuard guard;
    nn::AttentionWeights w;
    encode_deterministic(context, targets, &w);
    return w;
  }

 private:
  DiagGaussian global_head(const Tensor& pooled) const {
    const std::size_t o = cfg_.hidden_dim;
    return {reshape(psi_g_mean_(pooled), {o}), positive_variance(reshape(psi_g_var_(pooled), {o}))};
  }

  Tensor sample_global(const DiagGaussian& g, const EncodeOptions& opt, std::mt19937_64& rng) const {
    if (opt.z_global_override) {
      if (opt.z_global_override->cols() != cfg_.hidden_dim)
        throw DimensionError("z_global override has the wrong width");
      return *opt.z_global_override;
    }
    return reparam_sample(g, opt.samples, rng, opt.zero_noise);
  }

  // Heads whose task has no points in the set are conditioned on a zero summary.
  static Tensor task_summary_or_zero(const LatentEncoding& enc, std::uint32_t t, std::size_t o) {
    auto it = enc.task_summary.find(t);
    return it != enc.task_summary.end() ? it->second : Tensor::zeros({o});
  }

  void require_deterministic() const {
    if (!has_deterministic())
      throw std::logic_error("variant " + to_string(cfg_.variant) + " has no deterministic path");
  }

  ModelConfig cfg_;
  ParameterStore store_;
  nn::Mlp backbone_, phi_lat_, psi_g_mean_, psi_g_var_, phi_det_;
  std::vector<nn::Mlp> psi_t_mean_, psi_t_var_;
  nn::MultiHeadAttention sa_lat_, ca_lat_, sa_det_, ca_det_;
  detail::PairDecoder decoder_;
};

/// Builds the requested architecture variant.
inline NpclModel make_variant(ModelConfig cfg) { return NpclModel(std::move(cfg)); }

inline NpclModel make_variant(ModelConfig cfg, std::string_view variant) {
  cfg.variant = parse_variant(variant);
  return NpclModel(std::move(cfg));
}

}  // namespace npcl
