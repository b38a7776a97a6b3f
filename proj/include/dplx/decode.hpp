#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "dplx/losses.hpp"

namespace dplx {

struct Hypothesis {
  UnitSequence units;
  double score = 0;  // log probability of the collapsed labeling
};

/// Per-frame argmax, collapse repeats, strip blanks.
template <class S>
UnitSequence ctc_greedy(const Tensor<S>& log_probs, int blank) {
  detail::require_2d(log_probs, "ctc_greedy");
  const std::size_t T = log_probs.dim(0), C = log_probs.dim(1);
  UnitSequence out;
  int prev = -1;
  for (std::size_t t = 0; t < T; ++t) {
    const S* row = log_probs.data().data() + t * C;
    const int best = static_cast<int>(std::max_element(row, row + C) - row);
    if (best != blank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

/// CTC prefix beam search. Alignments collapsing to the same prefix have their
/// probability mass summed; the result is sorted by score, best first.
template <class S>
std::vector<Hypothesis> ctc_beam(const Tensor<S>& log_probs, int blank, std::size_t beam) {
  if (beam < 1) throw ConfigError("beam width must be >= 1");
  detail::require_2d(log_probs, "ctc_beam");
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  const std::size_t T = log_probs.dim(0), C = log_probs.dim(1);
  struct Mass {
    double blank = -std::numeric_limits<double>::infinity();
    double label = -std::numeric_limits<double>::infinity();
    double total() const { return detail::log_add(blank, label); }
  };
  std::map<UnitSequence, Mass> beams;
  beams[{}] = Mass{0.0, ninf};

  for (std::size_t t = 0; t < T; ++t) {
    auto lp = [&](std::size_t k) { return static_cast<double>(log_probs[t * C + k]); };
    std::map<UnitSequence, Mass> next;
    for (auto& [prefix, m] : beams) {
      auto& same = next[prefix];
      same.blank = detail::log_add(same.blank, m.total() + lp(static_cast<std::size_t>(blank)));
      for (std::size_t k = 0; k < C; ++k) {
        if (static_cast<int>(k) == blank) continue;
        const int u = static_cast<int>(k);
        UnitSequence ext = prefix;
        ext.push_back(u);
        auto& e = next[ext];
        if (!prefix.empty() && prefix.back() == u) {
          auto& stay = next[prefix];
          stay.label = detail::log_add(stay.label, m.label + lp(k));
          e.label = detail::log_add(e.label, m.blank + lp(k));
        } else {
          e.label = detail::log_add(e.label, m.total() + lp(k));
        }
      }
    }
    std::vector<std::pair<UnitSequence, Mass>> ranked(next.begin(), next.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second.total() > b.second.total(); });
    if (ranked.size() > beam) ranked.resize(beam);
    beams = std::map<UnitSequence, Mass>(ranked.begin(), ranked.end());
  }

  std::vector<Hypothesis> out;
  for (auto& [prefix, m] : beams) out.push_back({prefix, m.total()});
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
  return out;
}

// ---------------------------------------------------------------------------
// BLEU

namespace detail {

inline std::map<UnitSequence, std::size_t> ngram_counts(const UnitSequence& s, std::size_t n) {
  std::map<UnitSequence, std::size_t> out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[UnitSequence(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                                     s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

struct BleuStats {
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};
  std::size_t hyp_len = 0, ref_len = 0;

  void add(const UnitSequence& hyp, const UnitSequence& ref) {
    hyp_len += hyp.size();
    ref_len += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      auto h = ngram_counts(hyp, n);
      auto r = ngram_counts(ref, n);
      for (auto& [g, c] : h) {
        totals[n - 1] += c;
        auto it = r.find(g);
        if (it != r.end()) matches[n - 1] += std::min(c, it->second);
      }
    }
  }
};

/// Geometric mean of modified precisions with brevity penalty, in percent.
/// Orders for which the hypotheses contain no n-grams at all are left out of
/// the mean; `add_one` smooths orders n ≥ 2.
inline double bleu_from_stats(const BleuStats& st, bool add_one) {
  if (st.hyp_len == 0) return 0.0;
  double log_sum = 0;
  int orders = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(st.matches[n]), t = static_cast<double>(st.totals[n]);
    if (add_one && n > 0) {
      m += 1;
      t += 1;
    }
    if (t == 0) continue;
    if (m == 0) return 0.0;
    log_sum += std::log(m / t);
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double c = static_cast<double>(st.hyp_len), r = static_cast<double>(st.ref_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_sum / orders);
}

}  // namespace detail

/// Corpus-level 4-gram BLEU over unit tokens, no smoothing.
inline double unit_bleu(const std::vector<UnitSequence>& hyps, const std::vector<UnitSequence>& refs) {
  if (hyps.size() != refs.size()) throw DataError("bleu: hypothesis and reference counts differ");
  if (hyps.empty()) throw DataError("bleu: empty corpus");
  detail::BleuStats st;
  for (std::size_t i = 0; i < hyps.size(); ++i) st.add(hyps[i], refs[i]);
  return detail::bleu_from_stats(st, false);
}

/// Sentence-level BLEU with add-one smoothing on n ≥ 2.
inline double sentence_bleu_add_one(const UnitSequence& hyp, const UnitSequence& ref) {
  detail::BleuStats st;
  st.add(hyp, ref);
  return detail::bleu_from_stats(st, true);
}

inline std::size_t edit_distance(const UnitSequence& a, const UnitSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// 1 − edit_distance / |ref|, floored at 0.
inline double token_accuracy(const UnitSequence& hyp, const UnitSequence& ref) {
  if (ref.empty()) return hyp.empty() ? 1.0 : 0.0;
  const double e = static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
  return std::max(0.0, 1.0 - e);
}

}  // namespace dplx
