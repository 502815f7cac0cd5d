#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vefuse/errors.hpp"
#include "vefuse/tensor.hpp"

namespace vefuse {

/// Named trainable tensors in a stable (lexicographic) order.
using ParameterMap = std::map<std::string, Tensor>;

/// Linear warmup to the base rate, then linear decay reaching zero at the final step.
struct LinearSchedule {
  double base_lr = 1e-3;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 0;  // 0 keeps the rate constant

  /// Rate used for update number `step` (1-based).
  double rate(std::size_t step) const {
    if (total_steps == 0) return base_lr;
    const double f = static_cast<double>(step) / static_cast<double>(total_steps);
    if (f < warmup_fraction) return base_lr * f / warmup_fraction;
    if (warmup_fraction >= 1.0) return base_lr;
    return base_lr * std::max(0.0, 1.0 - f) / (1.0 - warmup_fraction);
  }
};

struct OptimizerState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  LinearSchedule schedule;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void validate(const OptimizerState& s) {
  const double wf = s.schedule.warmup_fraction;
  if (!(wf >= 0.0 && wf < 1.0)) {
    throw ConfigurationError("warmup fraction must lie in [0,1), got " + std::to_string(wf));
  }
  if (!(s.schedule.base_lr > 0.0)) throw ConfigurationError("learning rate must be positive");
}

/// One decoupled-weight-decay Adam update using each parameter's accumulated grad.
/// Returns the learning rate that was applied.
inline double adamw_step(OptimizerState& state, ParameterMap& params) {
  validate(state);
  for (auto& [name, p] : params) {
    if (!p.grad().empty() && !all_finite(p.grad())) {
      throw TrainingError("non-finite gradient in parameter '" + name + "' at step " +
                          std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double lr = state.schedule.rate(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.size() != p.size()) m.assign(p.size(), 0.0);
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    auto values = p.mutable_values();
    auto g = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr * state.weight_decay * values[i];
      values[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
  return lr;
}

inline void zero_grads(ParameterMap& params) {
  for (auto& [_, p] : params) p.zero_grad();
}

/// Uniform in +-sqrt(6/(fan_in+fan_out)).
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng,
                             bool requires_grad = true) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = dist(rng);
  return Tensor(Shape{fan_in, fan_out}, std::move(v), requires_grad);
}

}  // namespace vefuse
