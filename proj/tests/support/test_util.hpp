#pragma once
// Shared test helpers: random tensors and a central-difference gradient
// checker that is independent of the tape implementation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fluiddiff/ops.hpp"
#include "fluiddiff/rng.hpp"
#include "fluiddiff/tensor.hpp"

namespace fluiddiff::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T = double>
Tensor<T> random_param(Shape shape, Rng& rng, double scale = 1.0) {
  auto t = random_tensor<T>(std::move(shape), rng, scale);
  t.set_requires_grad(true);
  return t;
}

/// Builds an arbitrary-shaped output from the given inputs.
using GraphFn = std::function<Tensor<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares tape gradients of loss = mean(f(...) * R) (R a fixed random
/// projection) against central differences with step h, for every element
/// of every tensor in `wrt` (up to `max_per_tensor` evenly spaced entries).
/// Relative error uses max(|ad|, |fd|, floor) as the denominator.
inline GradCheckResult grad_check(const GraphFn& f, std::vector<Tensor<double>> wrt, Rng& rng,
                                  double h = 1e-5, std::size_t max_per_tensor = 0,
                                  double floor = 1e-6) {
  Tensor<double> proj;
  auto loss_of = [&](Tape<double>& tape) {
    Tensor<double> out = f(tape);
    if (!proj.defined()) proj = random_tensor<double>(out.shape(), rng);
    return ops::mean(tape, ops::mul(tape, out, proj));
  };

  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = loss_of(tape);
    tape.backward(loss);
  }

  GradCheckResult result;
  for (auto& t : wrt) {
    std::vector<double> ad(t.grad().begin(), t.grad().end());
    const std::size_t n = t.numel();
    const std::size_t stride = (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : n / max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = t[i];
      Tape<double> off(false);
      t[i] = saved + h;
      const double plus = loss_of(off).item();
      t[i] = saved - h;
      const double minus = loss_of(off).item();
      t[i] = saved;
      const double fd = (plus - minus) / (2.0 * h);
      const double denom = std::max({std::abs(ad[i]), std::abs(fd), floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(ad[i] - fd) / denom);
      ++result.checked;
    }
  }
  return result;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fluiddiff::testing
