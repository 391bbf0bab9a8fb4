#pragma once
// Named parameter store, Glorot initialization, clipped SGD and the binary
// checkpoint format.
//
// Checkpoint layout (all integers and floats little-endian):
//   u32 format_version, u64 parameter_count,
//   per parameter: u32 name_length, name bytes, u32 rank, u64 extents[rank],
//                  f64 values[product(extents)]

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "npcl/tensor.hpp"

namespace npcl {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ParameterStore {
 public:
  /// Registers a trainable tensor; names must be unique.
  Tensor& add(const std::string& name, Shape shape, std::vector<double> values) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    return params_.emplace(name, Tensor::from(std::move(shape), std::move(values), true))
        .first->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  /// Lexicographic by name.
  const std::map<std::string, Tensor>& items() const { return params_; }
  std::map<std::string, Tensor>& items() { return params_; }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (auto& [_, t] : params_) n += t.numel();
    return n;
  }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Global L2 norm over all populated gradients.
  double grad_norm() const {
    double s = 0.0;
    for (auto& [_, t] : params_)
      if (t.has_grad())
        for (double g : t.grad()) s += g * g;
    return std::sqrt(s);
  }

 private:
  std::map<std::string, Tensor> params_;
  std::uint64_t step_ = 0;
};

/// Glorot-uniform weights, U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline std::vector<double> xavier_uniform(std::size_t fan_in, std::size_t fan_out,
                                          std::mt19937_64& rng) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> w(fan_in * fan_out);
  for (auto& x : w) x = u(rng);
  return w;
}

struct SgdReport {
  double grad_norm = 0.0;
  double applied_scale = 1.0;
};

/// Clips the global gradient norm to `clip_norm`, applies p -= lr * g, clears
/// gradients and advances the step counter.
///
/// Parameters that took no part in the loss have no gradient and are left
/// alone; if no parameter at all carries a gradient the call is an error.
inline SgdReport sgd_step(ParameterStore& store, double lr, double clip_norm) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
  bool any = false;
  for (auto& [_, t] : store.items()) any = any || t.has_grad();
  if (!any) throw GradientError("sgd_step called before any gradient was populated");

  SgdReport rep;
  rep.grad_norm = store.grad_norm();
  if (!std::isfinite(rep.grad_norm)) throw NumericError("non-finite gradient norm");
  if (rep.grad_norm > clip_norm) rep.applied_scale = clip_norm / rep.grad_norm;
  double k = lr * rep.applied_scale;
  for (auto& [_, t] : store.items()) {
    if (!t.has_grad()) continue;
    auto p = t.mutable_data();
    auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= k * g[i];
    t.zero_grad();
  }
  store.set_step(store.step() + 1);
  return rep;
}

// ------------------------------------------------------------- binary helpers

namespace io {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <class T>
T get(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), sizeof(T))) throw IoError("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace io

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParameterStore& store, std::ostream& os) {
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put<std::uint64_t>(os, store.size());
  for (auto& [name, t] : store.items()) {
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::put<std::uint64_t>(os, e);
    for (double v : t.data()) io::put<double>(os, v);
  }
}

/// Reads a checkpoint into `store`. Every record must name an existing
/// parameter with the same shape, and every parameter must be covered.
inline void load_checkpoint(ParameterStore& store, std::istream& is) {
  auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  auto count = io::get<std::uint64_t>(is);
  if (count != store.size())
    throw IoError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                  std::to_string(store.size()));
  for (std::uint64_t k = 0; k < count; ++k) {
    auto len = io::get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated parameter name");
    auto rank = io::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = io::get<std::uint64_t>(is);
    if (!store.contains(name)) throw IoError("checkpoint parameter not in model: " + name);
    Tensor t = store.get(name);
    if (t.shape() != shape)
      throw IoError("shape mismatch for " + name + ": " + shape_str(shape) + " vs " +
                    shape_str(t.shape()));
    for (auto& v : t.mutable_data()) v = io::get<double>(is);
  }
}

inline void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  save_checkpoint(store, os);
}

inline void load_checkpoint(ParameterStore& store, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  load_checkpoint(store, is);
}

}  // namespace npcl
