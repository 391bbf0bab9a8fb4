#pragma once
// Task-stream generators and the IDX image/label reader.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "npcl/memory.hpp"
#include "npcl/sample.hpp"

namespace npcl {

enum class StreamKind { class_il, domain_il };

struct Task {
  SampleSet train, test;
  std::vector<std::uint32_t> classes;
};

struct TaskStream {
  StreamKind kind = StreamKind::class_il;
  std::vector<Task> tasks;

  std::size_t input_dim() const {
    for (auto& t : tasks)
      if (!t.train.empty()) return t.train.front().x.size();
    return 0;
  }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c;
    for (auto& t : tasks) c.push_back(t.classes.size());
    return c;
  }
};

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Labeled vectors without task assignment.
struct LabeledData {
  std::vector<std::vector<double>> x;
  std::vector<std::uint32_t> y;
  std::size_t size() const { return x.size(); }
};

struct SplitGaussianSpec {
  std::size_t num_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t dim = 32;
  double sep = 4.0;          // minimum pairwise distance between class means
  double noise = 1.0;        // per-coordinate standard deviation
  std::size_t n_train = 500; // per class
  std::size_t n_test = 200;  // per class
  std::uint64_t seed = 0;
};

/// Class means on a sphere of radius `sep` with pairwise distance >= sep;
/// samples are isotropic Gaussians around them. Classes are numbered
/// contiguously in task order.
inline TaskStream gen_split_gaussians(const SplitGaussianSpec& s) {
  if (!(s.sep > 0.0)) throw std::invalid_argument("cluster separation must be positive");
  if (s.num_tasks == 0 || s.classes_per_task == 0 || s.dim == 0)
    throw std::invalid_argument("empty stream shape");
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t classes = s.num_tasks * s.classes_per_task;

  std::vector<std::vector<double>> means;
  constexpr int kMaxTries = 10000;
  for (std::size_t c = 0; c < classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
      std::vector<double> m(s.dim);
      double norm = 0.0;
      for (auto& v : m) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : m) v *= s.sep / norm;
      placed = std::all_of(means.begin(), means.end(), [&](const auto& o) {
        double d = 0.0;
        for (std::size_t i = 0; i < s.dim; ++i) d += (m[i] - o[i]) * (m[i] - o[i]);
        return std::sqrt(d) >= s.sep;
      });
      if (placed) means.push_back(std::move(m));
    }
    if (!placed)
      throw DatasetError("cannot place " + std::to_string(classes) + " class means with separation " +
                         std::to_string(s.sep) + " in " + std::to_string(s.dim) + " dimensions");
  }

  TaskStream stream;
  stream.kind = StreamKind::class_il;
  auto draw = [&](std::uint32_t c, std::uint32_t task) {
    Sample e;
    e.label = c;
    e.task = task;
    e.x.resize(s.dim);
    for (std::size_t i = 0; i < s.dim; ++i) e.x[i] = means[c][i] + s.noise * normal(rng);
    return e;
  };
  for (std::uint32_t t = 0; t < s.num_tasks; ++t) {
    Task task;
    for (std::size_t k = 0; k < s.classes_per_task; ++k) {
      auto c = static_cast<std::uint32_t>(t * s.classes_per_task + k);
      task.classes.push_back(c);
      for (std::size_t i = 0; i < s.n_train; ++i) task.train.push_back(draw(c, t));
      for (std::size_t i = 0; i < s.n_test; ++i) task.test.push_back(draw(c, t));
    }
    std::shuffle(task.train.begin(), task.train.end(), rng);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

using Permutation = std::vector<std::size_t>;

inline std::vector<double> apply_permutation(const std::vector<double>& x, const Permutation& p) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < p.size(); ++i) y[i] = x[p[i]];
  return y;
}

inline Permutation invert_permutation(const Permutation& p) {
  Permutation inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

/// Task permutations used by gen_permuted; task 0 is the identity.
inline std::vector<Permutation> task_permutations(std::size_t dim, std::size_t num_tasks,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Permutation> out;
  for (std::size_t k = 0; k < num_tasks; ++k) {
    Permutation p(dim);
    std::iota(p.begin(), p.end(), 0);
    if (k > 0) std::shuffle(p.begin(), p.end(), rng);
    out.push_back(std::move(p));
  }
  return out;
}

namespace detail {

inline Task transformed_task(const LabeledData& train, const LabeledData& test, std::uint32_t t,
                             const auto& transform) {
  Task task;
  std::vector<std::uint32_t> classes;
  auto convert = [&](const LabeledData& d, SampleSet& out) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      out.push_back(Sample{transform(d.x[i]), d.y[i], t});
      classes.push_back(d.y[i]);
    }
  };
  convert(train, task.train);
  convert(test, task.test);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  task.classes = std::move(classes);
  return task;
}

}  // namespace detail

/// Domain-IL stream: task k applies a fixed random pixel permutation.
inline TaskStream gen_permuted(const LabeledData& train, const LabeledData& test,
                               std::size_t num_tasks, std::uint64_t seed) {
  if (train.size() == 0) throw std::invalid_argument("gen_permuted needs a nonempty base set");
  auto perms = task_permutations(train.x.front().size(), num_tasks, seed);
  TaskStream s;
  s.kind = StreamKind::domain_il;
  for (std::uint32_t k = 0; k < num_tasks; ++k)
    s.tasks.push_back(detail::transformed_task(
        train, test, k, [&](const std::vector<double>& x) { return apply_permutation(x, perms[k]); }));
  return s;
}

/// Rotates a square image about its center. Output pixel (r, c) samples the
/// input at the inverse-rotated position with bilinear interpolation; points
/// outside the image read as zero. A pixel at offset (dr, dc) from the center
/// lands at (cos a * dr - sin a * dc, sin a * dr + cos a * dc).
inline std::vector<double> rotate_image(const std::vector<double>& img, double angle) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(img.size()))));
  if (side * side != img.size()) throw std::invalid_argument("rotation needs a square image");
  const double center = (static_cast<double>(side) - 1.0) / 2.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  auto at = [&](long r, long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long>(side) || c >= static_cast<long>(side)) return 0.0;
    return img[static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)];
  };
  std::vector<double> out(img.size(), 0.0);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      double dr = static_cast<double>(r) - center, dc = static_cast<double>(c) - center;
      double sr = center + ca * dr + sa * dc;
      double sc = center - sa * dr + ca * dc;
      double fr = std::floor(sr), fc = std::floor(sc);
      double wr = sr - fr, wc = sc - fc;
      auto r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
      out[r * side + c] = (1 - wr) * (1 - wc) * at(r0, c0) + (1 - wr) * wc * at(r0, c0 + 1) +
                          wr * (1 - wc) * at(r0 + 1, c0) + wr * wc * at(r0 + 1, c0 + 1);
    }
  return out;
}

/// One angle per task, uniform in [0, pi); task 0 keeps angle 0.
inline std::vector<double> task_angles(std::size_t num_tasks, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, std::numbers::pi);
  std::vector<double> a(num_tasks, 0.0);
  for (std::size_t k = 1; k < num_tasks; ++k) a[k] = u(rng);
  return a;
}

/// Domain-IL stream: task k rotates every image by a fixed angle.
inline TaskStream gen_rotated(const LabeledData& train, const LabeledData& test,
                              std::size_t num_tasks, std::uint64_t seed) {
  if (train.size() == 0) throw std::invalid_argument("gen_rotated needs a nonempty base set");
  auto angles = task_angles(num_tasks, seed);
  TaskStream s;
  s.kind = StreamKind::domain_il;
  for (std::uint32_t k = 0; k < num_tasks; ++k)
    s.tasks.push_back(detail::transformed_task(
        train, test, k, [&](const std::vector<double>& x) { return rotate_image(x, angles[k]); }));
  return s;
}

// ------------------------------------------------------------------------ IDX

namespace detail {

inline std::uint32_t read_be32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DatasetError(std::string("truncated ") + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX image file and label file; pixels scaled to [0, 1].
inline LabeledData load_idx(std::istream& images, std::istream& labels) {
  if (auto m = detail::read_be32(images, "image header"); m != kIdxImagesMagic)
    throw DatasetError("bad image file magic");
  if (auto m = detail::read_be32(labels, "label header"); m != kIdxLabelsMagic)
    throw DatasetError("bad label file magic");
  auto n_img = detail::read_be32(images, "image header");
  auto rows = detail::read_be32(images, "image header");
  auto cols = detail::read_be32(images, "image header");
  auto n_lab = detail::read_be32(labels, "label header");
  if (n_img != n_lab)
    throw DatasetError("image count " + std::to_string(n_img) + " != label count " +
                       std::to_string(n_lab));
  LabeledData d;
  const std::size_t px = std::size_t{rows} * cols;
  std::vector<unsigned char> buf(px);
  for (std::uint32_t i = 0; i < n_img; ++i) {
    if (!images.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(px)))
      throw DatasetError("truncated image payload");
    std::vector<double> x(px);
    for (std::size_t k = 0; k < px; ++k) x[k] = buf[k] / 255.0;
    d.x.push_back(std::move(x));
    char l;
    if (!labels.get(l)) throw DatasetError("truncated label payload");
    d.y.push_back(static_cast<unsigned char>(l));
  }
  return d;
}

inline LabeledData load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  std::ifstream fi(images, std::ios::binary), fl(labels, std::ios::binary);
  if (!fi) throw DatasetError("cannot open " + images.string());
  if (!fl) throw DatasetError("cannot open " + labels.string());
  return load_idx(fi, fl);
}

/// Writes task_<k>_train.bin / task_<k>_test.bin using the buffer record layout
/// (u64 record count followed by records).
inline void export_stream(const TaskStream& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto dump = [](const SampleSet& set, const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write " + p.string());
    io::put<std::uint64_t>(os, set.size());
    for (auto& e : set) EpisodicMemory::write_record(os, e);
  };
  for (std::size_t k = 0; k < s.tasks.size(); ++k) {
    dump(s.tasks[k].train, dir / ("task_" + std::to_string(k) + "_train.bin"));
    dump(s.tasks[k].test, dir / ("task_" + std::to_string(k) + "_test.bin"));
  }
}

inline SampleSet import_shard(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  auto n = io::get<std::uint64_t>(is);
  SampleSet out;
  for (std::uint64_t i = 0; i < n; ++i) out.push_back(EpisodicMemory::read_record(is));
  return out;
}

}  // namespace npcl
