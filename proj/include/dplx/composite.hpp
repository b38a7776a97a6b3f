#pragma once

#include <vector>

#include "dplx/decode.hpp"
#include "dplx/losses.hpp"
#include "dplx/model.hpp"

namespace dplx {

enum class LossMode { unit, mel };

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "unit") return LossMode::unit;
  if (s == "mel") return LossMode::mel;
  throw ConfigError("unknown loss mode '" + s + "' (expected unit or mel)");
}

inline std::string to_string(LossMode m) { return m == LossMode::unit ? "unit" : "mel"; }

/// Linear time-axis resampling (align-corners); used only on stop-gradient
/// representations whose length differs from their partner's.
template <class S>
Tensor<S> resample_rows(const Tensor<S>& x, std::size_t rows) {
  const std::size_t T = x.rows(), h = x.cols();
  if (T == rows) return x.detach();
  std::vector<S> out(rows * h);
  for (std::size_t i = 0; i < rows; ++i) {
    const double pos = rows == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(T - 1) / static_cast<double>(rows - 1);
    const std::size_t lo = static_cast<std::size_t>(pos), hi = std::min(lo + 1, T - 1);
    const double f = pos - static_cast<double>(lo);
    for (std::size_t j = 0; j < h; ++j)
      out[i * h + j] = static_cast<S>((1.0 - f) * static_cast<double>(x[lo * h + j]) + f * static_cast<double>(x[hi * h + j]));
  }
  return Tensor<S>({rows, h}, std::move(out));
}

/// Each row repeated twice: the frame-rate-doubled dense target.
template <class S>
Tensor<S> repeat_rows2(const Tensor<S>& x) {
  return interleave_rows(x, x);
}

template <class S>
struct CompositeTerms {
  Tensor<S> total;
  double term[6] = {0, 0, 0, 0, 0, 0};  // same order as LossWeights
  bool active[6] = {false, false, false, false, false, false};
};

namespace detail {

template <class S>
std::vector<Tensor<S>> merged_boundaries(const PassResult<S>& pass, std::size_t first, std::size_t count) {
  std::vector<Tensor<S>> out;
  for (std::size_t l = first; l < first + count; ++l) out.push_back(pass.boundaries[l].merge());
  return out;
}

/// fba terms for every pair of a pass: boundaries [first, first+L) of `dir`
/// against the stop-gradient eval-mode replay of the opposite direction.
template <class S>
std::vector<Tensor<S>> fba_for(DuplexModel<S>& m, const PassResult<S>& pass, Direction dir,
                               const std::vector<UnitSequence>& other_units) {
  const std::size_t L = m.stack.layers.size();
  const std::size_t first = dir == Direction::forward ? 1 : 0;
  std::vector<Tensor<S>> theirs_packed;
  std::vector<std::size_t> theirs_lengths = DuplexModel<S>::upsampled_lengths(other_units);
  {
    NoGradGuard ng;
    RunContext<S> eval;
    const Direction opposite = dir == Direction::forward ? Direction::reverse : Direction::forward;
    std::vector<SplitState<S>> replay;
    m.run_stack(SplitState<S>::split(m.end_input_batch(other_units, opposite), theirs_lengths), opposite, eval, &replay);
    for (std::size_t l = first; l < first + L; ++l) theirs_packed.push_back(replay[l].merge());
  }
  const auto mine_packed = merged_boundaries(pass, first, L);
  std::vector<Tensor<S>> out;
  std::size_t off = 0;
  for (std::size_t i = 0; i < pass.count(); ++i) {
    std::vector<Tensor<S>> mine, theirs;
    for (std::size_t l = 0; l < L; ++l) {
      mine.push_back(pass.rows_of(mine_packed[l], i));
      NoGradGuard ng;
      theirs.push_back(resample_rows(slice_rows(theirs_packed[l], off, off + theirs_lengths[i]), pass.lengths[i]));
    }
    off += theirs_lengths[i];
    out.push_back(fba_loss(mine, theirs));
  }
  return out;
}

/// Unit-level cycle for every pair: decode the pass greedily, re-embed the
/// hypotheses on the other end, translate back, and score against the
/// original units by CTC. Entries stay undefined where the hypothesis cannot
/// align to the original.
template <class S>
std::vector<Tensor<S>> unit_cycle(DuplexModel<S>& m, const PassResult<S>& pass, Direction dir,
                                  const std::vector<UnitSequence>& originals, const RunContext<S>& ctx) {
  std::vector<Tensor<S>> out(pass.count());
  std::vector<UnitSequence> hyps;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < pass.count(); ++i) {
    auto hyp = ctc_greedy(pass.log_probs_of(i), m.blank());
    if (hyp.empty() || hyp.size() > m.config().max_units || ctc_min_frames(originals[i]) > 2 * hyp.size()) continue;
    hyps.push_back(std::move(hyp));
    which.push_back(i);
  }
  if (hyps.empty()) return out;
  const Direction back = dir == Direction::forward ? Direction::reverse : Direction::forward;
  const auto round = m.translate_batch(hyps, back, ctx);
  for (std::size_t k = 0; k < which.size(); ++k)
    out[which[k]] = cc_loss(CcOperand<S>::of_units(originals[which[k]]),
                            CcOperand<S>::of_log_probs(round.log_probs_of(k), m.blank()));
  return out;
}

}  // namespace detail

/// Weighted six-term objective, averaged over the pairs of a batch.
///   unit: w1·CTC(y|x) + w2·CTC(x|y) + w3·fba(y|x) + w4·fba(x|y) + w5·cc(y) + w6·cc(x)
///   mel:  the CTC terms become MSE against frame-doubled dense targets and the
///         cycle terms compare dense representations.
/// The batch runs packed through the stack. Terms with zero weight are not
/// evaluated; `term` reports each active term's mean over the pairs where it
/// was defined.
template <class S>
CompositeTerms<S> composite_loss(DuplexModel<S>& m, const std::vector<ParallelPair>& batch, const LossWeights& w,
                                 LossMode mode, const RunContext<S>& ctx) {
  w.validate();
  if (batch.empty()) throw DataError("composite_loss: empty batch");
  const std::size_t B = batch.size();
  std::vector<UnitSequence> srcs, tgts;
  for (auto& p : batch) {
    if (mode == LossMode::mel && p.src.size() != p.tgt.size())
      throw ConfigError("mel mode needs equal source and target lengths");
    srcs.push_back(p.src);
    tgts.push_back(p.tgt);
  }

  CompositeTerms<S> out;
  std::vector<Tensor<S>> terms;
  std::vector<S> weights;
  std::size_t counts[6] = {0, 0, 0, 0, 0, 0};
  auto push = [&](std::size_t k, const Tensor<S>& t) {
    if (!t.defined()) return;
    out.term[k] += static_cast<double>(t.item());
    out.active[k] = true;
    ++counts[k];
    terms.push_back(t);
    weights.push_back(static_cast<S>(w.w[k] / static_cast<double>(B)));
  };
  auto push_all = [&](std::size_t k, const std::vector<Tensor<S>>& ts) {
    for (auto& t : ts) push(k, t);
  };

  const bool need_fwd = w.w[0] > 0 || w.w[2] > 0 || w.w[5] > 0;
  const bool need_rev = w.w[1] > 0 || w.w[3] > 0 || w.w[4] > 0;
  PassResult<S> fwd, rev;
  if (need_fwd) fwd = m.translate_batch(srcs, Direction::forward, ctx, w.w[2] > 0);
  if (need_rev) rev = m.translate_batch(tgts, Direction::reverse, ctx, w.w[3] > 0);

  if (mode == LossMode::unit) {
    if (w.w[0] > 0)
      for (std::size_t i = 0; i < B; ++i) {
        const auto lp = fwd.log_probs_of(i);
        push(0, ctc_loss(lp, std::span<const int>(tgts[i]), lp.dim(0), m.blank()));
      }
    if (w.w[1] > 0)
      for (std::size_t i = 0; i < B; ++i) {
        const auto lp = rev.log_probs_of(i);
        push(1, ctc_loss(lp, std::span<const int>(srcs[i]), lp.dim(0), m.blank()));
      }
  } else {
    auto target = [&](const std::vector<UnitSequence>& u, Direction side) {
      NoGradGuard ng;
      return repeat_rows2(m.embed_batch(u, side)).detach();
    };
    if (w.w[0] > 0) {
      const auto pred = m.mel_y(fwd.output.merge());
      const auto ref = target(tgts, Direction::reverse);
      for (std::size_t i = 0; i < B; ++i) push(0, mse_loss(fwd.rows_of(pred, i), fwd.rows_of(ref, i)));
    }
    if (w.w[1] > 0) {
      const auto pred = m.mel_x(rev.output.merge());
      const auto ref = target(srcs, Direction::forward);
      for (std::size_t i = 0; i < B; ++i) push(1, mse_loss(rev.rows_of(pred, i), rev.rows_of(ref, i)));
    }
  }

  if (w.w[2] > 0) push_all(2, detail::fba_for(m, fwd, Direction::forward, tgts));
  if (w.w[3] > 0) push_all(3, detail::fba_for(m, rev, Direction::reverse, srcs));

  if (mode == LossMode::unit) {
    if (w.w[4] > 0) push_all(4, detail::unit_cycle(m, rev, Direction::reverse, tgts, ctx));
    if (w.w[5] > 0) push_all(5, detail::unit_cycle(m, fwd, Direction::forward, srcs, ctx));
  } else {
    if (w.w[4] > 0) {
      const auto back = m.run_stack(rev.output, Direction::forward, ctx).merge();
      for (std::size_t i = 0; i < B; ++i)
        push(4, cc_loss(CcOperand<S>::dense(rev.rows_of(rev.input, i)), CcOperand<S>::dense(rev.rows_of(back, i))));
    }
    if (w.w[5] > 0) {
      const auto back = m.run_stack(fwd.output, Direction::reverse, ctx).merge();
      for (std::size_t i = 0; i < B; ++i)
        push(5, cc_loss(CcOperand<S>::dense(fwd.rows_of(fwd.input, i)), CcOperand<S>::dense(fwd.rows_of(back, i))));
    }
  }

  for (int k = 0; k < 6; ++k)
    if (counts[k]) out.term[k] /= static_cast<double>(counts[k]);
  out.total = terms.empty() ? Tensor<S>::scalar(S(0)) : weighted_sum(terms, weights);
  return out;
}

/// The objective for a single pair.
template <class S>
CompositeTerms<S> composite_pair_loss(DuplexModel<S>& m, const ParallelPair& pair, const LossWeights& w, LossMode mode,
                                      const RunContext<S>& ctx) {
  return composite_loss(m, std::vector<ParallelPair>{pair}, w, mode, ctx);
}

}  // namespace dplx
