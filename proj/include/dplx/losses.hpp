#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include "dplx/ops.hpp"

namespace dplx {

using UnitSequence = std::vector<int>;

struct InfeasibleAlignment : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-negative interpolation weights w1..w6: (CTC|MSE) fwd, (CTC|MSE) rev,
/// fba fwd, fba rev, cc fwd, cc rev.
struct LossWeights {
  double w[6] = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0};

  void validate() const {
    bool any = false;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
      any = any || v > 0.0;
    }
    if (!any) throw ConfigError("at least one loss weight must be positive");
  }
};

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

/// Minimum number of frames a CTC alignment of `target` needs: one per label
/// plus one blank between each adjacent repeated pair.
inline std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

/// Forward (α) and backward (β) log-domain tables over time × extended labels,
/// where the extended label interleaves blanks: length 2|y|+1. β includes the
/// emission at its own frame.
struct AlignmentLattice {
  std::size_t frames = 0, states = 0;
  std::vector<int> labels;  // extended
  std::vector<double> alpha, beta;
  double forward_total = 0, backward_total = 0;

  double a(std::size_t t, std::size_t s) const { return alpha[t * states + s]; }
  double b(std::size_t t, std::size_t s) const { return beta[t * states + s]; }
};

template <class S>
AlignmentLattice ctc_lattice(const Tensor<S>& log_probs, std::span<const int> target, std::size_t input_len, int blank) {
  detail::require_2d(log_probs, "ctc");
  const std::size_t C = log_probs.dim(1);
  if (blank < 0 || static_cast<std::size_t>(blank) >= C) throw DimensionError("ctc: blank id outside the label axis");
  if (input_len == 0 || input_len > log_probs.dim(0))
    throw DimensionError("ctc: input length " + std::to_string(input_len) + " vs " + shape_str(log_probs.shape()));
  for (int u : target)
    if (u < 0 || static_cast<std::size_t>(u) >= C || u == blank) throw DataError("ctc: target label out of range");
  if (ctc_min_frames(target) > input_len)
    throw InfeasibleAlignment("ctc: target of length " + std::to_string(target.size()) + " needs " +
                              std::to_string(ctc_min_frames(target)) + " frames, only " + std::to_string(input_len) +
                              " available");

  constexpr double ninf = -std::numeric_limits<double>::infinity();
  AlignmentLattice lat;
  lat.frames = input_len;
  lat.states = 2 * target.size() + 1;
  lat.labels.assign(lat.states, blank);
  for (std::size_t i = 0; i < target.size(); ++i) lat.labels[2 * i + 1] = target[i];
  const std::size_t T = lat.frames, N = lat.states;
  auto lp = [&](std::size_t t, std::size_t s) { return static_cast<double>(log_probs[t * C + static_cast<std::size_t>(lat.labels[s])]); };
  auto skip_ok = [&](std::size_t s) { return s >= 2 && lat.labels[s] != blank && lat.labels[s] != lat.labels[s - 2]; };

  lat.alpha.assign(T * N, ninf);
  lat.alpha[0] = lp(0, 0);
  if (N > 1) lat.alpha[1] = lp(0, 1);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < N; ++s) {
      double v = lat.a(t - 1, s);
      if (s >= 1) v = detail::log_add(v, lat.a(t - 1, s - 1));
      if (skip_ok(s)) v = detail::log_add(v, lat.a(t - 1, s - 2));
      lat.alpha[t * N + s] = v == ninf ? ninf : v + lp(t, s);
    }
  lat.forward_total = N > 1 ? detail::log_add(lat.a(T - 1, N - 1), lat.a(T - 1, N - 2)) : lat.a(T - 1, 0);

  lat.beta.assign(T * N, ninf);
  lat.beta[(T - 1) * N + N - 1] = lp(T - 1, N - 1);
  if (N > 1) lat.beta[(T - 1) * N + N - 2] = lp(T - 1, N - 2);
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < N; ++s) {
      double v = lat.b(t + 1, s);
      if (s + 1 < N) v = detail::log_add(v, lat.b(t + 1, s + 1));
      if (s + 2 < N && skip_ok(s + 2)) v = detail::log_add(v, lat.b(t + 1, s + 2));
      lat.beta[t * N + s] = v == ninf ? ninf : v + lp(t, s);
    }
  lat.backward_total = N > 1 ? detail::log_add(lat.b(0, 0), lat.b(0, 1)) : lat.b(0, 0);
  return lat;
}

/// −log Σ_a p(a|x) over monotonic alignments of `target` to the first
/// `input_len` rows of `log_probs` (rows are log-normalized over V+1 labels).
/// A feasible target whose alignments all underflow or hit NaN yields a
/// non-finite loss rather than an infeasibility error.
template <class S>
Tensor<S> ctc_loss(const Tensor<S>& log_probs, std::span<const int> target, std::size_t input_len, int blank) {
  auto lat = ctc_lattice(log_probs, target, input_len, blank);
  const double total = lat.forward_total;
  const std::size_t C = log_probs.dim(1);
  return Tensor<S>::make_result({1}, {static_cast<S>(-total)}, {log_probs}, [lat = std::move(lat), C, total](Node<S>& n) {
    if (!std::isfinite(total)) return;
    auto& p = n.parents[0];
    const double g = static_cast<double>(n.grad[0]);
    for (std::size_t t = 0; t < lat.frames; ++t)
      for (std::size_t s = 0; s < lat.states; ++s) {
        const double ab = lat.a(t, s) + lat.b(t, s);
        if (!std::isfinite(ab)) continue;
        const std::size_t k = static_cast<std::size_t>(lat.labels[s]);
        const double occ = std::exp(ab - static_cast<double>(p->data[t * C + k]) - total);
        p->grad[t * C + k] -= static_cast<S>(g * occ);
      }
  });
}

template <class S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& ref) {
  return mse(pred, ref);
}

/// (1/L)·Σ_l (1 − cos(H→_l, sg(H←_l))); the reverse-side list never receives
/// gradient.
template <class S>
Tensor<S> fba_loss(const std::vector<Tensor<S>>& fwd, const std::vector<Tensor<S>>& rev) {
  if (fwd.size() != rev.size() || fwd.empty())
    throw DimensionError("fba: layer lists differ in length (" + std::to_string(fwd.size()) + " vs " +
                         std::to_string(rev.size()) + ")");
  std::vector<Tensor<S>> cos;
  cos.reserve(fwd.size());
  for (std::size_t l = 0; l < fwd.size(); ++l) cos.push_back(cosine_similarity(fwd[l], rev[l].detach()));
  const S inv = S(1) / S(fwd.size());
  const auto avg = weighted_sum(cos, std::vector<S>(cos.size(), inv));
  return add(Tensor<S>::scalar(S(1)), scale(avg, S(-1)));
}

/// Operand of the cycle-consistency distance: a dense representation, a unit
/// sequence, or per-frame log-probabilities over units (+ blank).
template <class S>
struct CcOperand {
  enum class Kind { dense, units, log_probs } kind = Kind::dense;
  Tensor<S> tensor;
  UnitSequence units;
  int blank = 0;

  static CcOperand dense(Tensor<S> t) { return {Kind::dense, std::move(t), {}, 0}; }
  static CcOperand of_units(UnitSequence u) { return {Kind::units, {}, std::move(u), 0}; }
  static CcOperand of_log_probs(Tensor<S> lp, int blank_id) { return {Kind::log_probs, std::move(lp), {}, blank_id}; }
};

/// distance(x, f←(f→(x))): MSE for dense representations, CTC when the original
/// is a unit sequence and the round trip yields log-probabilities.
template <class S>
Tensor<S> cc_loss(const CcOperand<S>& original, const CcOperand<S>& roundtrip) {
  using K = typename CcOperand<S>::Kind;
  if (original.kind == K::dense && roundtrip.kind == K::dense) return mse(roundtrip.tensor, original.tensor);
  if (original.kind == K::units && roundtrip.kind == K::log_probs)
    return ctc_loss(roundtrip.tensor, std::span<const int>(original.units), roundtrip.tensor.dim(0), roundtrip.blank);
  throw ConfigError("cc: operand kinds are not comparable");
}

}  // namespace dplx
