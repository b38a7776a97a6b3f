#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dplx/ops.hpp"
#include "dplx/rng.hpp"

namespace dplx::testing {

using T = Tensor<double>;
using Fn = std::function<T(const std::vector<T>&)>;

/// Fixed random projection that turns any tensor output into a scalar loss.
inline T project(const T& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(out, randn<double>(out.shape(), rng)));
}

/// Worst per-input relative error ‖g_analytic − g_numeric‖ / (‖g_analytic‖ + ‖g_numeric‖)
/// with central differences of step h. Inputs without requires_grad are skipped.
inline double gradcheck(const Fn& f, std::vector<T> inputs, double h = 1e-6) {
  for (auto& x : inputs) x.zero_grad();
  backward(f(inputs));
  double worst = 0;
  for (auto& x : inputs) {
    if (!x.requires_grad()) continue;
    std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.size(), 0.0);
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x.data()[i];
      double lp, lm;
      {
        NoGradGuard ng;
        x.data()[i] = keep + h;
        lp = f(inputs).item();
        x.data()[i] = keep - h;
        lm = f(inputs).item();
      }
      x.data()[i] = keep;
      const double num = (lp - lm) / (2 * h);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += analytic[i] * analytic[i];
      nn += num * num;
    }
    const double denom = std::sqrt(na) + std::sqrt(nn);
    if (denom > 0) worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

inline T rnd(Shape s, std::uint64_t seed, double sd = 1.0, bool grad = true) {
  Rng rng(seed);
  return randn<double>(std::move(s), rng, sd, grad);
}

inline double max_abs_diff(const T& a, const T& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dplx::testing
