#pragma once

// Central finite-difference oracle for the autodiff tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "vefuse/tensor.hpp"

namespace vefuse::testing {

/// Relative error ||analytic - numeric|| / (||analytic|| + ||numeric||), one entry per input.
inline std::vector<double> gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                     double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<double> errors;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.size(), 0.0);
    if (!t.grad().empty()) analytic.assign(t.grad().begin(), t.grad().end());
    double diff = 0.0, na = 0.0, nn = 0.0;
    auto vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      double plus, minus;
      {
        NoGradGuard ng;
        vals[i] = orig + h;
        plus = loss_fn().item();
        vals[i] = orig - h;
        minus = loss_fn().item();
      }
      vals[i] = orig;
      const double numeric = (plus - minus) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    const double denom = std::sqrt(na) + std::sqrt(nn);
    errors.push_back(denom < 1e-300 ? 0.0 : std::sqrt(diff) / denom);
  }
  return errors;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Fixed random projection to a scalar so each output element gets a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, random_tensor(x.shape(), rng, 1.0, false)));
}

}  // namespace vefuse::testing
