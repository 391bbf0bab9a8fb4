#pragma once

#include <cstdint>
#include <vector>

#include "npcl/tensor.hpp"

namespace npcl {

/// One labeled observation: raw input vector, class label, task id.
struct Sample {
  std::vector<double> x;
  std::uint32_t label = 0;
  std::uint32_t task = 0;

  bool operator==(const Sample&) const = default;
};

using SampleSet = std::vector<Sample>;

/// Stacks inputs into an [n, d] constant tensor.
inline Tensor stack_inputs(const SampleSet& s) {
  if (s.empty()) throw DimensionError("cannot stack an empty sample set");
  std::size_t d = s.front().x.size();
  std::vector<double> v;
  v.reserve(s.size() * d);
  for (auto& e : s) {
    if (e.x.size() != d) throw DimensionError("samples differ in input width");
    v.insert(v.end(), e.x.begin(), e.x.end());
  }
  return Tensor::matrix(s.size(), d, std::move(v));
}

/// [n, classes] one-hot rows.
inline Tensor one_hot(const SampleSet& s, std::size_t classes) {
  std::vector<double> v(s.size() * classes, 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].label >= classes) throw DimensionError("label outside the class space");
    v[i * classes + s[i].label] = 1.0;
  }
  return Tensor::matrix(s.size(), classes, std::move(v));
}

}  // namespace npcl
