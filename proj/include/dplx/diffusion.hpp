#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dplx/ops.hpp"
#include "dplx/rng.hpp"

namespace dplx {

struct StepError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

enum class ScheduleKind { linear, scaled_linear };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "scaled_linear") return ScheduleKind::scaled_linear;
  throw ConfigError("unknown schedule kind '" + s + "' (expected linear or scaled_linear)");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "scaled_linear"; }

/// Variance schedule for steps t = 1..T (stored at index t−1), with ᾱ_0 := 1.
class DiffusionSchedule {
 public:
  DiffusionSchedule() = default;

  static DiffusionSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ConfigError("schedule needs at least one step");
    DiffusionSchedule s;
    double prod = 1.0;
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("every beta must lie in (0, 1)");
      s.alpha_.push_back(1.0 - b);
      prod *= 1.0 - b;
      s.alpha_bar_.push_back(prod);
    }
    s.beta_ = std::move(betas);
    return s;
  }

  /// linear: β evenly spaced; scaled_linear: √β evenly spaced.
  static DiffusionSchedule build(ScheduleKind kind, std::size_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule step count must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
      throw ConfigError("schedule bounds must satisfy 0 < beta_start <= beta_end < 1");
    std::vector<double> b(steps);
    for (std::size_t i = 0; i < steps; ++i) {
      const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      if (kind == ScheduleKind::linear) {
        b[i] = beta_start + f * (beta_end - beta_start);
      } else {
        const double r = std::sqrt(beta_start) + f * (std::sqrt(beta_end) - std::sqrt(beta_start));
        b[i] = r * r;
      }
    }
    return from_betas(std::move(b));
  }

  /// Reference preset: scaled_linear, T = 1000, β ∈ [8.5e-4, 1.2e-2].
  static DiffusionSchedule reference_preset() { return build(ScheduleKind::scaled_linear, 1000, 8.5e-4, 1.2e-2); }

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_[index(t)]; }
  double alpha(std::size_t t) const { return alpha_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bar_[index(t)]; }
  double alpha_bar_prev(std::size_t t) const { return t == 1 ? 1.0 : alpha_bar_[index(t) - 1]; }

  /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t
  double beta_tilde(std::size_t t) const { return (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t)) * beta(t); }

  void check_step(std::size_t t) const {
    if (t < 1 || t > steps())
      throw StepError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }

 private:
  std::size_t index(std::size_t t) const {
    check_step(t);
    return t - 1;
  }

  std::vector<double> beta_, alpha_, alpha_bar_;
};

/// x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε
template <class S>
Tensor<S> q_sample(const Tensor<S>& x0, std::size_t t, const Tensor<S>& eps, const DiffusionSchedule& sched) {
  sched.check_step(t);
  if (x0.shape() != eps.shape())
    throw DimensionError("q_sample: noise " + shape_str(eps.shape()) + " vs sample " + shape_str(x0.shape()));
  const double ab = sched.alpha_bar(t);
  return add(scale(x0, static_cast<S>(std::sqrt(ab))), scale(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

/// μ̃_t = (x_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t
template <class S>
Tensor<S> posterior_mean(const Tensor<S>& xt, const Tensor<S>& eps_hat, std::size_t t, const DiffusionSchedule& sched) {
  sched.check_step(t);
  if (xt.shape() != eps_hat.shape())
    throw DimensionError("posterior_mean: noise estimate " + shape_str(eps_hat.shape()) + " vs sample " +
                         shape_str(xt.shape()));
  const double a = sched.alpha(t), ab = sched.alpha_bar(t);
  const double ce = (1.0 - a) / std::sqrt(1.0 - ab), cx = 1.0 / std::sqrt(a);
  std::vector<S> out(xt.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<S>(cx * (static_cast<double>(xt[i]) - ce * static_cast<double>(eps_hat[i])));
  return Tensor<S>(xt.shape(), std::move(out));
}

/// One ancestral step: x_{t−1} = μ̃_t + √β̃_t · z, with z = 0 at t = 1.
template <class S>
Tensor<S> posterior_step(const Tensor<S>& xt, const Tensor<S>& eps_hat, std::size_t t, const DiffusionSchedule& sched,
                         Rng& rng) {
  auto mu = posterior_mean(xt, eps_hat, t, sched);
  if (t == 1) return mu;
  const double sd = std::sqrt(sched.beta_tilde(t));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : mu.data()) v = static_cast<S>(static_cast<double>(v) + sd * nd(rng));
  return mu;
}

/// ε-predictor signature: (noisy x_t, step t, clean conditioning memory) → ε̂.
template <class S>
using NoisePredictor = std::function<Tensor<S>(const Tensor<S>&, std::size_t, const Tensor<S>&)>;

/// Terms of one duplex diffusion step for fixed (t, ε_x, ε_y).
template <class S>
struct DdmTerms {
  Tensor<S> loss, loss_x, loss_y;
};

/// λ1·mean‖ε_x − ε̂_x‖² + λ2·mean‖ε_y − ε̂_y‖², with ε̂_x predicted from x_t given y0
/// (reverse direction) and ε̂_y from y_t given x0 (forward direction).
template <class S>
DdmTerms<S> ddm_loss(const Tensor<S>& x0, const Tensor<S>& y0, std::size_t t, const Tensor<S>& eps_x,
                     const Tensor<S>& eps_y, const DiffusionSchedule& sched_x, const DiffusionSchedule& sched_y,
                     const NoisePredictor<S>& predict_x, const NoisePredictor<S>& predict_y, S lambda1, S lambda2) {
  if (sched_x.steps() != sched_y.steps())
    throw ConfigError("duplex diffusion needs both schedules to share T (" + std::to_string(sched_x.steps()) + " vs " +
                      std::to_string(sched_y.steps()) + ")");
  const auto xt = q_sample(x0, t, eps_x, sched_x);
  const auto yt = q_sample(y0, t, eps_y, sched_y);
  DdmTerms<S> out;
  out.loss_x = mse(predict_x(xt, t, y0), eps_x);
  out.loss_y = mse(predict_y(yt, t, x0), eps_y);
  out.loss = weighted_sum<S>({out.loss_x, out.loss_y}, {lambda1, lambda2});
  return out;
}

/// Samples t ~ U{1..T} once for both directions, then ε_x, ε_y ~ N(0, I).
template <class S>
DdmTerms<S> ddm_train_step(const Tensor<S>& x0, const Tensor<S>& y0, const DiffusionSchedule& sched_x,
                           const DiffusionSchedule& sched_y, const NoisePredictor<S>& predict_x,
                           const NoisePredictor<S>& predict_y, S lambda1, S lambda2, Rng& rng) {
  if (sched_x.steps() != sched_y.steps())
    throw ConfigError("duplex diffusion needs both schedules to share T (" + std::to_string(sched_x.steps()) + " vs " +
                      std::to_string(sched_y.steps()) + ")");
  std::uniform_int_distribution<std::size_t> ud(1, sched_x.steps());
  const std::size_t t = ud(rng);
  const auto eps_x = randn<S>(x0.shape(), rng);
  const auto eps_y = randn<S>(y0.shape(), rng);
  return ddm_loss(x0, y0, t, eps_x, eps_y, sched_x, sched_y, predict_x, predict_y, lambda1, lambda2);
}

/// Iterates the learned reverse transition from x_T ~ N(0, I) down to an x0
/// estimate of `target_len` rows.
template <class S>
Tensor<S> ancestral_sample(const Tensor<S>& memory, std::size_t target_len, std::size_t width,
                           const NoisePredictor<S>& predict, const DiffusionSchedule& sched, Rng& rng) {
  if (target_len < 1) throw DimensionError("ancestral_sample: target length must be >= 1");
  NoGradGuard ng;
  auto x = randn<S>({target_len, width}, rng);
  for (std::size_t t = sched.steps(); t >= 1; --t) x = posterior_step(x, predict(x, t, memory), t, sched, rng);
  return x;
}

/// Sinusoidal embedding of a diffusion step, width `dim` (even).
template <class S>
Tensor<S> timestep_embedding(std::size_t t, std::size_t dim) {
  std::vector<S> v(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[i] = static_cast<S>(std::sin(static_cast<double>(t) * freq));
    v[half + i] = static_cast<S>(std::cos(static_cast<double>(t) * freq));
  }
  return Tensor<S>({1, dim}, std::move(v));
}

}  // namespace dplx
