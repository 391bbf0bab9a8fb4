#pragma once
// Episodic replay memory (reservoir sampling) and the distribution memory of
// stored global/task Gaussians.
//
// Episodic memory file (little-endian):
//   u64 capacity, u64 seen_count, u64 item_count,
//   per item: u32 task_id, u32 label, u32 feature_count, f64 features[feature_count]

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcl/model.hpp"
#include "npcl/objectives.hpp"
#include "npcl/params.hpp"
#include "npcl/sample.hpp"

namespace npcl {

class EpisodicMemory {
 public:
  explicit EpisodicMemory(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::uint64_t seen_count() const { return seen_; }
  const SampleSet& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  /// Reservoir sampling: fills up to capacity, then replaces a uniformly
  /// chosen slot with probability capacity / (seen + 1).
  void reservoir_update(const Sample& item, std::mt19937_64& rng) {
    if (capacity_ > 0) {
      if (items_.size() < capacity_) {
        items_.push_back(item);
      } else {
        std::uniform_int_distribution<std::uint64_t> pick(0, seen_);
        auto j = pick(rng);
        if (j < capacity_) items_[static_cast<std::size_t>(j)] = item;
      }
    }
    ++seen_;
  }

  /// Uniform sample without replacement; the whole buffer if size >= |items|.
  SampleSet sample_batch(std::size_t size, std::mt19937_64& rng) const {
    if (items_.empty()) throw std::logic_error("sample_batch on an empty memory");
    if (size >= items_.size()) return items_;
    std::vector<std::size_t> idx(items_.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates.
    SampleSet out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, idx.size() - 1);
      std::swap(idx[i], idx[u(rng)]);
      out.push_back(items_[idx[i]]);
    }
    return out;
  }

  void save(std::ostream& os) const {
    io::put<std::uint64_t>(os, capacity_);
    io::put<std::uint64_t>(os, seen_);
    io::put<std::uint64_t>(os, items_.size());
    for (auto& s : items_) write_record(os, s);
  }

  static EpisodicMemory load(std::istream& is) {
    EpisodicMemory m(static_cast<std::size_t>(io::get<std::uint64_t>(is)));
    m.seen_ = io::get<std::uint64_t>(is);
    auto n = io::get<std::uint64_t>(is);
    if (n > m.capacity_) throw IoError("episodic memory file holds more items than its capacity");
    for (std::uint64_t i = 0; i < n; ++i) m.items_.push_back(read_record(is));
    return m;
  }

  void save(const std::filesystem::path& p) const {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write " + p.string());
    save(os);
  }
  static EpisodicMemory load(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open " + p.string());
    return load(is);
  }

  /// One (task, label, features) record as laid out in the buffer file.
  static void write_record(std::ostream& os, const Sample& s) {
    io::put<std::uint32_t>(os, s.task);
    io::put<std::uint32_t>(os, s.label);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.x.size()));
    for (double v : s.x) io::put<double>(os, v);
  }
  static Sample read_record(std::istream& is) {
    Sample s;
    s.task = io::get<std::uint32_t>(is);
    s.label = io::get<std::uint32_t>(is);
    s.x.resize(io::get<std::uint32_t>(is));
    for (auto& v : s.x) v = io::get<double>(is);
    return s;
  }

 private:
  std::size_t capacity_;
  std::uint64_t seen_ = 0;
  SampleSet items_;
};

/// Stored global distribution (replaced after every task) and per-task
/// distributions (written once, at the step the task arrived).
class DistributionMemory {
 public:
  const std::optional<DiagGaussian>& global() const { return global_; }
  const std::map<std::uint32_t, StoredTaskDist>& tasks() const { return tasks_; }

  void set_global(const DiagGaussian& g) { global_ = g.detach(); }

  /// Returns false (and keeps the old entry) if the task is already stored.
  bool insert_task(std::uint32_t task, const DiagGaussian& g, std::uint32_t step) {
    return tasks_.emplace(task, StoredTaskDist{g.detach(), step}).second;
  }

  nlohmann::json to_json(std::size_t latent_dim) const {
    nlohmann::json j;
    j["latent_dim"] = latent_dim;
    if (global_) {
      j["global"] = {{"mean", global_->mean.to_vector()}, {"var", global_->var.to_vector()}};
    } else {
      j["global"] = nullptr;
    }
    j["tasks"] = nlohmann::json::array();
    for (auto& [t, s] : tasks_)
      j["tasks"].push_back({{"task_id", t},
                            {"step_recorded", s.step_recorded},
                            {"mean", s.dist.mean.to_vector()},
                            {"var", s.dist.var.to_vector()}});
    return j;
  }

  static DistributionMemory from_json(const nlohmann::json& j) {
    DistributionMemory m;
    std::size_t dim = j.at("latent_dim").get<std::size_t>();
    auto check = [dim](const std::vector<double>& v) {
      if (v.size() != dim) throw IoError("distribution width does not match latent_dim");
    };
    if (!j.at("global").is_null()) {
      auto mean = j["global"].at("mean").get<std::vector<double>>();
      auto var = j["global"].at("var").get<std::vector<double>>();
      check(mean);
      check(var);
      m.global_ = DiagGaussian::from_values(std::move(mean), std::move(var));
    }
    for (auto& e : j.at("tasks")) {
      auto mean = e.at("mean").get<std::vector<double>>();
      auto var = e.at("var").get<std::vector<double>>();
      check(mean);
      check(var);
      m.tasks_.emplace(e.at("task_id").get<std::uint32_t>(),
                       StoredTaskDist{DiagGaussian::from_values(std::move(mean), std::move(var)),
                                      e.at("step_recorded").get<std::uint32_t>()});
    }
    return m;
  }

 private:
  std::optional<DiagGaussian> global_;
  std::map<std::uint32_t, StoredTaskDist> tasks_;
};

/// Gradient-free pass over the task's training data interleaved with one
/// replay of the buffer. Batch-level global distributions are averaged into
/// the stored global; the averaged task distribution is stored for `task`
/// unless one was already recorded.
inline void record_distributions(const NpclModel& model, const SampleSet& task_data,
                                 const EpisodicMemory& mem, DistributionMemory& dist_mem,
                                 std::size_t batch_size, std::uint32_t task,
                                 std::mt19937_64& rng) {
  if (task_data.empty()) throw std::invalid_argument("record_distributions on empty task data");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  NoGradGuard guard;
  const std::size_t batches = (task_data.size() + batch_size - 1) / batch_size;
  const SampleSet& buf = mem.items();
  std::vector<DiagGaussian> globals, per_task;
  EncodeOptions opt;
  opt.samples = model.config().n_train;
  for (std::size_t b = 0; b < batches; ++b) {
    SampleSet batch(task_data.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                    task_data.begin() +
                        static_cast<std::ptrdiff_t>(std::min(task_data.size(), (b + 1) * batch_size)));
    std::size_t lo = buf.size() * b / batches, hi = buf.size() * (b + 1) / batches;
    batch.insert(batch.end(), buf.begin() + static_cast<std::ptrdiff_t>(lo),
                 buf.begin() + static_cast<std::ptrdiff_t>(hi));
    auto enc = model.encode_latent(batch, opt, rng);
    if (enc.global) globals.push_back(*enc.global);
    if (auto it = enc.task.find(task); it != enc.task.end()) per_task.push_back(collapse_rows(it->second));
  }
  if (!globals.empty()) dist_mem.set_global(average_distributions(globals));
  if (!per_task.empty()) dist_mem.insert_task(task, average_distributions(per_task), task);
}

/// 2*o per task plus 2*o for the global pair plus one task label per buffer slot.
inline std::uint64_t storage_footprint(std::uint64_t latent_dim, std::uint64_t tasks,
                                       std::uint64_t buffer) {
  return 2 * latent_dim * tasks + 2 * latent_dim + buffer;
}

/// Flattened size of a logits-replay buffer.
inline std::uint64_t logits_replay_footprint(std::uint64_t buffer, std::uint64_t classes) {
  return buffer * classes;
}

}  // namespace npcl
