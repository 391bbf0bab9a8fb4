#pragma once
// Run configuration: one JSON document with sections model, train, data and
// eval, plus dotted-key overrides validated against the defaults.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcl/datasets.hpp"
#include "npcl/inference.hpp"
#include "npcl/model.hpp"
#include "npcl/trainer.hpp"

namespace npcl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string kind = "split_gaussians";  // split_gaussians, permuted, rotated
  std::size_t num_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t dim = 32;
  double sep = 4.0;
  double noise = 1.0;
  std::size_t n_train = 500;  // per class
  std::size_t n_test = 200;   // per class
  std::uint64_t seed = 0;     // generator seed; the OOD stream uses seed + ood_offset
  std::uint64_t ood_offset = 1000;
  // IDX base set for permuted/rotated streams; synthetic blobs when empty.
  std::string train_images, train_labels, test_images, test_labels;
};

struct EvalConfig {
  InferenceMode mode = InferenceMode::uqm;
  std::size_t context_size = 0;
  std::size_t batch = 256;
  bool ood = true;
  bool dump_predictions = true;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  std::uint64_t seed = 1;

  /// Desk-scale defaults used by the command line.
  static RunConfig desk() {
    RunConfig c;
    c.model.backbone_hidden = 32;
    c.model.feature_dim = 16;
    c.model.hidden_dim = 32;
    c.model.n_train = 10;
    c.model.n_eval = 10;
    c.train.epochs_per_task = 5;
    c.train.base_lr = 0.1;
    c.train.warmup_iters = 40;
    c.train.buffer_size = 50;
    return c;
  }

  /// Train/eval settings with the run seed and eval section folded in.
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    t.eval_mode = eval.mode;
    t.eval_context_size = eval.context_size;
    t.eval_batch = eval.batch;
    return t;
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& d = c.data;
  const auto& e = c.eval;
  return {
      {"seed", c.seed},
      {"model",
       {{"backbone_hidden", m.backbone_hidden},
        {"feature_dim", m.feature_dim},
        {"hidden_dim", m.hidden_dim},
        {"num_hidden", m.num_hidden},
        {"layer_norm", m.layer_norm},
        {"n_train", m.n_train},
        {"n_eval", m.n_eval},
        {"m_task", m.m_task},
        {"variant", to_string(m.variant)},
        {"attention_heads", m.attention_heads}}},
      {"train",
       {{"epochs_per_task", t.epochs_per_task},
        {"base_lr", t.base_lr},
        {"warmup_iters", t.warmup_iters},
        {"stream_batch", t.stream_batch},
        {"replay_batch", t.replay_batch},
        {"context_fraction", t.context_fraction},
        {"context_per_class", t.context_per_class},
        {"buffer_size", t.buffer_size},
        {"clip_norm", t.clip_norm},
        {"no_gr", t.no_gr},
        {"no_tr", t.no_tr},
        {"noisy_prior", t.noisy_prior},
        {"weights",
         {{"alpha", t.weights.alpha},
          {"beta", t.weights.beta},
          {"gamma", t.weights.gamma},
          {"delta", t.weights.delta}}}}},
      {"data",
       {{"kind", d.kind},
        {"num_tasks", d.num_tasks},
        {"classes_per_task", d.classes_per_task},
        {"dim", d.dim},
        {"sep", d.sep},
        {"noise", d.noise},
        {"n_train", d.n_train},
        {"n_test", d.n_test},
        {"seed", d.seed},
        {"ood_offset", d.ood_offset},
        {"train_images", d.train_images},
        {"train_labels", d.train_labels},
        {"test_images", d.test_images},
        {"test_labels", d.test_labels}}},
      {"eval",
       {{"mode", to_string(e.mode)},
        {"context_size", e.context_size},
        {"batch", e.batch},
        {"ood", e.ood},
        {"dump_predictions", e.dump_predictions}}},
  };
}

namespace detail {

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto& [k, v] : j.items()) {
    std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten(v, key, out);
    else
      out.push_back(key);
  }
}

inline std::string join_keys(const std::vector<std::string>& keys) {
  std::string s;
  for (auto& k : keys) s += (s.empty() ? "" : ", ") + k;
  return s;
}

inline nlohmann::json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  for (std::string part; std::getline(ss, part, '.');) p += "/" + part;
  return nlohmann::json::json_pointer(p);
}

}  // namespace detail

/// Every dotted leaf key accepted in a config document.
inline std::vector<std::string> valid_keys() {
  std::vector<std::string> keys;
  detail::flatten(to_json(RunConfig::desk()), "", keys);
  std::sort(keys.begin(), keys.end());
  return keys;
}

/// Resolves a dotted key; a unique suffix match (weights.gamma) is accepted.
inline std::string resolve_key(const std::string& key) {
  auto keys = valid_keys();
  if (std::find(keys.begin(), keys.end(), key) != keys.end()) return key;
  std::vector<std::string> hits;
  for (auto& k : keys)
    if (k.size() > key.size() && k.ends_with("." + key)) hits.push_back(k);
  if (hits.size() == 1) return hits.front();
  if (hits.size() > 1) throw ConfigError("ambiguous key '" + key + "' matches " + detail::join_keys(hits));
  throw ConfigError("unknown key '" + key + "'; valid keys: " + detail::join_keys(keys));
}

inline RunConfig from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::string> given;
  detail::flatten(doc, "", given);
  nlohmann::json merged = to_json(RunConfig::desk());
  for (auto& k : given) {
    auto full = resolve_key(k);
    merged[detail::pointer(full)] = doc[detail::pointer(k)];
  }
  RunConfig c = RunConfig::desk();
  try {
    auto& m = merged.at("model");
    c.model.backbone_hidden = m.at("backbone_hidden").get<std::size_t>();
    c.model.feature_dim = m.at("feature_dim").get<std::size_t>();
    c.model.hidden_dim = m.at("hidden_dim").get<std::size_t>();
    c.model.num_hidden = m.at("num_hidden").get<std::size_t>();
    c.model.layer_norm = m.at("layer_norm").get<bool>();
    c.model.n_train = m.at("n_train").get<std::size_t>();
    c.model.n_eval = m.at("n_eval").get<std::size_t>();
    c.model.m_task = m.at("m_task").get<std::size_t>();
    c.model.variant = parse_variant(m.at("variant").get<std::string>());
    c.model.attention_heads = m.at("attention_heads").get<std::size_t>();

    auto& t = merged.at("train");
    c.train.epochs_per_task = t.at("epochs_per_task").get<std::size_t>();
    c.train.base_lr = t.at("base_lr").get<double>();
    c.train.warmup_iters = t.at("warmup_iters").get<std::size_t>();
    c.train.stream_batch = t.at("stream_batch").get<std::size_t>();
    c.train.replay_batch = t.at("replay_batch").get<std::size_t>();
    c.train.context_fraction = t.at("context_fraction").get<double>();
    c.train.context_per_class = t.at("context_per_class").get<std::size_t>();
    c.train.buffer_size = t.at("buffer_size").get<std::size_t>();
    c.train.clip_norm = t.at("clip_norm").get<double>();
    c.train.no_gr = t.at("no_gr").get<bool>();
    c.train.no_tr = t.at("no_tr").get<bool>();
    c.train.noisy_prior = t.at("noisy_prior").get<bool>();
    auto& w = t.at("weights");
    c.train.weights = {w.at("alpha").get<double>(), w.at("beta").get<double>(),
                       w.at("gamma").get<double>(), w.at("delta").get<double>()};

    auto& d = merged.at("data");
    c.data.kind = d.at("kind").get<std::string>();
    c.data.num_tasks = d.at("num_tasks").get<std::size_t>();
    c.data.classes_per_task = d.at("classes_per_task").get<std::size_t>();
    c.data.dim = d.at("dim").get<std::size_t>();
    c.data.sep = d.at("sep").get<double>();
    c.data.noise = d.at("noise").get<double>();
    c.data.n_train = d.at("n_train").get<std::size_t>();
    c.data.n_test = d.at("n_test").get<std::size_t>();
    c.data.seed = d.at("seed").get<std::uint64_t>();
    c.data.ood_offset = d.at("ood_offset").get<std::uint64_t>();
    c.data.train_images = d.at("train_images").get<std::string>();
    c.data.train_labels = d.at("train_labels").get<std::string>();
    c.data.test_images = d.at("test_images").get<std::string>();
    c.data.test_labels = d.at("test_labels").get<std::string>();

    auto& e = merged.at("eval");
    c.eval.mode = parse_mode(e.at("mode").get<std::string>());
    c.eval.context_size = e.at("context_size").get<std::size_t>();
    c.eval.batch = e.at("batch").get<std::size_t>();
    c.eval.ood = e.at("ood").get<bool>();
    c.eval.dump_predictions = e.at("dump_predictions").get<bool>();

    c.seed = merged.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config type error: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  if (c.data.kind != "split_gaussians" && c.data.kind != "permuted" && c.data.kind != "rotated")
    throw ConfigError("data.kind must be split_gaussians, permuted or rotated");
  try {
    c.model.validate();
    c.resolved_train().validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  return c;
}

/// Applies `key=value` overrides; values parse as JSON, falling back to strings.
inline RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
  nlohmann::json doc = to_json(base);
  for (auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    auto key = resolve_key(o.substr(0, eq));
    auto raw = o.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    doc[detail::pointer(key)] = v;
  }
  return from_json(doc);
}

inline RunConfig load_config(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open config " + p.string());
  nlohmann::json doc = nlohmann::json::parse(is, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config " + p.string() + " is not valid JSON");
  return from_json(doc);
}

// ----------------------------------------------------------------- streams

namespace detail {

// Square blob images stand in for an IDX base set.
inline std::pair<LabeledData, LabeledData> synthetic_base(const DataConfig& d) {
  SplitGaussianSpec s;
  s.num_tasks = 1;
  s.classes_per_task = d.classes_per_task;
  s.dim = d.dim;
  s.sep = d.sep;
  s.noise = d.noise;
  s.n_train = d.n_train;
  s.n_test = d.n_test;
  s.seed = d.seed;
  auto st = gen_split_gaussians(s);
  auto conv = [](const SampleSet& set) {
    LabeledData out;
    for (auto& e : set) {
      out.x.push_back(e.x);
      out.y.push_back(e.label);
    }
    return out;
  };
  return {conv(st.tasks[0].train), conv(st.tasks[0].test)};
}

}  // namespace detail

/// The task stream a config describes; `seed_offset` shifts the generator seed.
inline TaskStream build_stream(const DataConfig& d, std::uint64_t seed_offset = 0) {
  if (d.kind == "split_gaussians") {
    SplitGaussianSpec s;
    s.num_tasks = d.num_tasks;
    s.classes_per_task = d.classes_per_task;
    s.dim = d.dim;
    s.sep = d.sep;
    s.noise = d.noise;
    s.n_train = d.n_train;
    s.n_test = d.n_test;
    s.seed = d.seed + seed_offset;
    return gen_split_gaussians(s);
  }
  DataConfig shifted = d;
  shifted.seed += seed_offset;
  LabeledData train, test;
  if (!d.train_images.empty()) {
    train = load_idx(d.train_images, d.train_labels);
    test = load_idx(d.test_images, d.test_labels);
  } else {
    std::tie(train, test) = detail::synthetic_base(shifted);
  }
  return d.kind == "permuted" ? gen_permuted(train, test, d.num_tasks, shifted.seed)
                              : gen_rotated(train, test, d.num_tasks, shifted.seed);
}

}  // namespace npcl
