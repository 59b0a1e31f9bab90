#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "synfuse/rng.hpp"
#include "synfuse/tensor.hpp"

namespace synfuse::numcheck {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Contract a tensor output to a scalar with fixed random weights so every
/// output element contributes a distinct gradient signal.
inline Tensor contract(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor r = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  return sum(mul(out, r));
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Central differences on every element of every input. The relative error of
/// an element is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckResult gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5,
                                 double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  backward(f());
  GradCheckResult res;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        data[i] = saved + h;
        plus = f().item();
        data[i] = saved - h;
        minus = f().item();
      }
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double abs_err = std::abs(a - numeric);
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / std::max({std::abs(a), std::abs(numeric), floor}));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace synfuse::numcheck
