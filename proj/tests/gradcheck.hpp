#pragma once
// Central finite-difference gradient comparison shared by the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "npcl/tensor.hpp"

namespace npcl::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() of `f` against central differences for every entry of
/// every input. Error is |a - n| / max(|a|, |n|, floor).
inline GradCheck grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                            double h = 1e-5, double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  GradCheck r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto v = inputs[k].mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      double orig = v[i];
      v[i] = orig + h;
      double fp = f().item();
      v[i] = orig - h;
      double fm = f().item();
      v[i] = orig;
      double num = (fp - fm) / (2 * h);
      double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.checked;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return r;
}

}  // namespace npcl::testing
