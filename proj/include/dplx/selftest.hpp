#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "dplx/diffusion.hpp"
#include "dplx/losses.hpp"
#include "dplx/rdc.hpp"

namespace dplx::selftest {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Max-abs error of f←(f→(x)) for one seeded stack and input, eval mode.
template <class S>
double stack_roundtrip_error(std::size_t layers, std::size_t width, std::size_t time, std::uint64_t seed) {
  Rng rng(seed);
  StackShape sh;
  sh.width = width;
  sh.layers = layers;
  sh.heads = 4;
  sh.kernel = 7;
  sh.max_len = std::max<std::size_t>(time, 1);
  DuplexStack<S> stack(sh, rng);
  NoGradGuard ng;
  RunContext<S> eval;
  const auto x = randn<S>({time, width}, rng);
  const auto back = stack_reverse(stack_forward(SplitState<S>::split(x), stack, eval), stack, eval).merge();
  double err = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    err = std::max(err, std::abs(static_cast<double>(back[i]) - static_cast<double>(x[i])));
  return err;
}

/// `draws` seeded configurations cycling through L ∈ {2,4,8,12}, h ∈ {32,64},
/// time ∈ {8,32}; returns the worst error per precision.
inline std::pair<double, double> invertibility_sweep(std::size_t draws, std::uint64_t seed = 2024) {
  static constexpr std::size_t Ls[] = {2, 4, 8, 12}, Hs[] = {32, 64}, Ts[] = {8, 32};
  double worst_d = 0, worst_f = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::size_t L = Ls[i % 4], h = Hs[(i / 4) % 2], T = Ts[(i / 8) % 2];
    const auto s = splitmix64(seed + i);
    worst_d = std::max(worst_d, stack_roundtrip_error<double>(L, h, T, s));
    worst_f = std::max(worst_f, stack_roundtrip_error<float>(L, h, T, s));
  }
  return {worst_d, worst_f};
}

/// Sub-module traces of f→ and f← for an L-layer stack.
inline std::pair<std::string, std::string> chain_traces(std::size_t layers, std::size_t width = 16, std::size_t time = 4) {
  Rng rng(7);
  StackShape sh;
  sh.width = width;
  sh.layers = layers;
  sh.heads = 1;
  sh.kernel = 3;
  sh.max_len = time;
  DuplexStack<double> stack(sh, rng);
  NoGradGuard ng;
  std::string fwd, rev;
  RunContext<double> a, b;
  a.trace = &fwd;
  b.trace = &rev;
  const auto x = SplitState<double>::split(randn<double>({time, width}, rng));
  stack_forward(x, stack, a);
  stack_reverse(x, stack, b);
  return {fwd, rev};
}

/// Worst |(1 − ᾱ_t) − (α_t(1 − ᾱ_{t−1}) + β_t)| over every step.
inline double schedule_identity_error(const DiffusionSchedule& s) {
  double err = 0;
  for (std::size_t t = 1; t <= s.steps(); ++t)
    err = std::max(err, std::abs((1.0 - s.alpha_bar(t)) - (s.alpha(t) * (1.0 - s.alpha_bar_prev(t)) + s.beta(t))));
  return err;
}

/// −log Σ over every frame labeling that collapses to `target`.
inline double ctc_enumerate(const std::vector<double>& log_probs, std::size_t T, std::size_t C,
                            const std::vector<int>& target, int blank) {
  std::vector<int> path(T, 0);
  double total = 0;
  std::size_t combos = 1;
  for (std::size_t i = 0; i < T; ++i) combos *= C;
  for (std::size_t n = 0; n < combos; ++n) {
    std::size_t r = n;
    for (std::size_t i = 0; i < T; ++i) {
      path[i] = static_cast<int>(r % C);
      r /= C;
    }
    std::vector<int> collapsed;
    int prev = -1;
    for (int u : path) {
      if (u != blank && u != prev) collapsed.push_back(u);
      prev = u;
    }
    if (collapsed != target) continue;
    double lp = 0;
    for (std::size_t i = 0; i < T; ++i) lp += log_probs[i * C + static_cast<std::size_t>(path[i])];
    total += std::exp(lp);
  }
  return -std::log(total);
}

/// Worst DP-vs-enumeration gap over seeded random log-probs for T ≤ tmax,
/// label alphabets up to `vmax`, and targets up to length `ymax`.
inline double ctc_oracle_gap(std::size_t tmax = 6, std::size_t vmax = 3, std::size_t ymax = 3, std::uint64_t seed = 11) {
  Rng rng(seed);
  double worst = 0;
  for (std::size_t V = 1; V <= vmax; ++V) {
    const std::size_t C = V + 1;
    const int blank = static_cast<int>(V);
    for (std::size_t T = 1; T <= tmax; ++T) {
      auto logits = randn<double>({T, C}, rng);
      const auto lp = log_softmax_rows(logits);
      for (std::size_t len = 1; len <= ymax; ++len) {
        std::vector<int> y(len, 0);
        std::size_t combos = 1;
        for (std::size_t i = 0; i < len; ++i) combos *= V;
        for (std::size_t n = 0; n < combos; ++n) {
          std::size_t r = n;
          for (auto& u : y) {
            u = static_cast<int>(r % V);
            r /= V;
          }
          if (ctc_min_frames(y) > T) continue;
          const double dp = ctc_loss(lp, std::span<const int>(y), T, blank).item();
          worst = std::max(worst, std::abs(dp - ctc_enumerate(lp.data(), T, C, y, blank)));
        }
      }
    }
  }
  return worst;
}

/// The suites `selftest` runs: invertibility, palindrome chains, schedule
/// identities and the CTC enumeration oracle.
inline std::vector<Check> run_all(std::size_t invert_draws = 100) {
  std::vector<Check> out;
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.3g", v);
    return std::string(b);
  };

  const auto t0 = std::chrono::steady_clock::now();
  const auto [ed, ef] = invertibility_sweep(invert_draws);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.push_back({"invertibility", ed <= 1e-8 && ef <= 1e-4,
                 "double " + num(ed) + ", single " + num(ef) + ", " + num(secs) + " s"});

  bool pal = true;
  for (std::size_t L : {2, 4, 6, 8, 12}) {
    auto [f, r] = chain_traces(L);
    pal = pal && f == std::string(r.rbegin(), r.rend());
  }
  out.push_back({"palindrome", pal, "L in {2,4,6,8,12}"});

  double sched = 0;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::scaled_linear})
    for (std::size_t T : {1, 50, 1000})
      sched = std::max(sched, schedule_identity_error(DiffusionSchedule::build(kind, T, 8.5e-4, 1.2e-2)));
  const auto ref = DiffusionSchedule::reference_preset();
  out.push_back({"schedule-identity", sched <= 1e-12 && ref.beta_tilde(1) == 0.0, "max error " + num(sched)});

  const double gap = ctc_oracle_gap();
  out.push_back({"ctc-oracle", gap <= 1e-10, "max gap " + num(gap)});
  return out;
}

}  // namespace dplx::selftest
