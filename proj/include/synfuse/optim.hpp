#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "synfuse/error.hpp"
#include "synfuse/rng.hpp"
#include "synfuse/tensor.hpp"

namespace synfuse {

/// Uniform in +-sqrt(6 / (fan_in + fan_out)); fan_in and fan_out are the
/// two dimensions of a matrix.
inline Tensor glorot_init(const Shape& shape, Rng& rng, bool requires_grad = true) {
  if (shape.size() != 2) throw ShapeError("glorot_init expects a matrix shape, got " + shape_str(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : t.mutable_data()) v = rng.uniform(-limit, limit);
  return t;
}

/// Inverse-square-root schedule with linear warmup:
///   lr(step) = factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
struct NoamSchedule {
  double factor = 2.0;
  std::size_t d_model = 512;
  std::size_t warmup = 4000;

  double operator()(std::size_t step) const {
    const double s = static_cast<double>(std::max<std::size_t>(step, 1));
    const double w = static_cast<double>(std::max<std::size_t>(warmup, 1));
    return factor / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
  }
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-9;
  double learning_rate = 1e-3;
};

/// One bias-corrected Adam update of every parameter that requires grad,
/// using the gradients currently stored on the parameters. Parameters without
/// a gradient buffer are treated as having zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: parameter list changed size");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (!p.requires_grad()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw ShapeError("adam_step: moment shape does not match parameter");
    const auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

/// Adam with a learning-rate schedule.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps, NoamSchedule schedule) : schedule_(schedule) {
    state_.beta1 = beta1;
    state_.beta2 = beta2;
    state_.eps = eps;
  }

  void step(std::span<Tensor> params) {
    state_.learning_rate = schedule_(state_.step + 1);
    adam_step(params, state_);
  }

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }
  const NoamSchedule& schedule() const { return schedule_; }

 private:
  AdamState state_;
  NoamSchedule schedule_;
};

inline void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

inline void scale_grads(std::span<Tensor> params, double factor) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (auto& g : p.mutable_grad()) g *= factor;
  }
}

/// Sums per-batch gradients and steps the optimizer every `every` batches,
/// dividing by the total token count across the accumulated batches first.
class GradAccumulator {
 public:
  explicit GradAccumulator(std::size_t every = 2) : every_(std::max<std::size_t>(every, 1)) {}

  /// Register one backward pass worth `tokens` loss terms. Returns true when
  /// the optimizer stepped.
  bool add_batch(std::span<Tensor> params, Adam& optimizer, std::size_t tokens) {
    tokens_ += tokens;
    if (++pending_ < every_) return false;
    if (tokens_ > 0) scale_grads(params, 1.0 / static_cast<double>(tokens_));
    optimizer.step(params);
    zero_grads(params);
    pending_ = 0;
    tokens_ = 0;
    return true;
  }

  std::size_t pending() const { return pending_; }
  std::size_t every() const { return every_; }

 private:
  std::size_t every_;
  std::size_t pending_ = 0;
  std::size_t tokens_ = 0;
};

}  // namespace synfuse
