#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dplx/composite.hpp"
#include "dplx/decode.hpp"
#include "dplx/model.hpp"

namespace dplx {

/// Decodes the opposite end of each input sequence; beam 1 is greedy.
template <class S>
std::vector<UnitSequence> decode_all(DuplexModel<S>& m, const std::vector<UnitSequence>& inputs, Direction dir,
                                     std::size_t beam = 1) {
  NoGradGuard ng;
  RunContext<S> eval;
  std::vector<UnitSequence> out;
  out.reserve(inputs.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t b = 0; b < inputs.size(); b += chunk) {
    const std::vector<UnitSequence> part(inputs.begin() + b, inputs.begin() + std::min(inputs.size(), b + chunk));
    const auto pass = m.translate_batch(part, dir, eval);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto lp = pass.log_probs_of(i);
      out.push_back(beam <= 1 ? ctc_greedy(lp, m.blank()) : ctc_beam(lp, m.blank(), beam).front().units);
    }
  }
  return out;
}

inline std::vector<UnitSequence> sources(const std::vector<ParallelPair>& pairs) {
  std::vector<UnitSequence> s;
  for (auto& p : pairs) s.push_back(p.src);
  return s;
}

inline std::vector<UnitSequence> targets(const std::vector<ParallelPair>& pairs) {
  std::vector<UnitSequence> s;
  for (auto& p : pairs) s.push_back(p.tgt);
  return s;
}

/// Mean greedy token accuracy of one direction over held-out pairs.
template <class S>
double heldout_accuracy(DuplexModel<S>& m, const std::vector<ParallelPair>& pairs, Direction dir) {
  if (pairs.empty()) throw DataError("heldout_accuracy: no pairs");
  const bool fwd = dir == Direction::forward;
  const auto hyps = decode_all(m, fwd ? sources(pairs) : targets(pairs), dir);
  double acc = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) acc += token_accuracy(hyps[i], fwd ? pairs[i].tgt : pairs[i].src);
  return acc / static_cast<double>(pairs.size());
}

struct DirectionReport {
  double accuracy = 0;
  double exact_match = 0;
  double bleu = 0;
};

/// Accuracy, exact match and corpus BLEU of one direction at the given beam.
template <class S>
DirectionReport evaluate_direction(DuplexModel<S>& m, const std::vector<ParallelPair>& pairs, Direction dir,
                                   std::size_t beam) {
  if (pairs.empty()) throw DataError("evaluate: no pairs");
  const bool fwd = dir == Direction::forward;
  const auto refs = fwd ? targets(pairs) : sources(pairs);
  const auto hyps = decode_all(m, fwd ? sources(pairs) : targets(pairs), dir, beam);
  DirectionReport r;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    r.accuracy += token_accuracy(hyps[i], refs[i]);
    r.exact_match += hyps[i] == refs[i] ? 1.0 : 0.0;
  }
  r.accuracy /= static_cast<double>(pairs.size());
  r.exact_match /= static_cast<double>(pairs.size());
  r.bleu = unit_bleu(hyps, refs);
  return r;
}

enum class RoundTrip { xyx, yxy };

inline RoundTrip parse_roundtrip(const std::string& s) {
  if (s == "xyx") return RoundTrip::xyx;
  if (s == "yxy") return RoundTrip::yxy;
  throw ConfigError("unknown round-trip order '" + s + "' (expected xyx or yxy)");
}

struct RoundTripReport {
  double representation_error = 0;  // max |input − f⁻¹(f(input))| over the corpus
  double exact_match = 0;           // fraction of sequences decoded back unchanged
  double bleu = 0;
};

/// Round trip through both directions. The representation error runs the
/// opposite stack on the exact output; the unit-level score re-encodes the
/// greedy hypothesis of the first leg and decodes the second leg.
template <class S>
RoundTripReport roundtrip_eval(DuplexModel<S>& m, const std::vector<ParallelPair>& pairs, RoundTrip order) {
  if (pairs.empty()) throw DataError("roundtrip: no pairs");
  NoGradGuard ng;
  RunContext<S> eval;
  const Direction first = order == RoundTrip::xyx ? Direction::forward : Direction::reverse;
  const Direction second = order == RoundTrip::xyx ? Direction::reverse : Direction::forward;
  RoundTripReport r;
  std::vector<UnitSequence> hyps, refs;
  for (auto& p : pairs) {
    const auto& start = order == RoundTrip::xyx ? p.src : p.tgt;
    const auto pass = m.translate(start, first, eval);
    const auto back = m.run_stack(pass.output, second, eval).merge();
    for (std::size_t i = 0; i < back.size(); ++i)
      r.representation_error =
          std::max(r.representation_error, std::abs(static_cast<double>(back[i]) - static_cast<double>(pass.input[i])));
    const auto mid = ctc_greedy(pass.log_probs, m.blank());
    UnitSequence end;
    if (!mid.empty() && mid.size() <= m.config().max_units)
      end = ctc_greedy(m.translate(mid, second, eval).log_probs, m.blank());
    r.exact_match += end == start ? 1.0 : 0.0;
    hyps.push_back(end);
    refs.push_back(start);
  }
  r.exact_match /= static_cast<double>(pairs.size());
  r.bleu = unit_bleu(hyps, refs);
  return r;
}

/// Max-abs error of f←(f→(x)) and f→(f←(y)) on upsampled end inputs.
template <class S>
double cycle_error(DuplexModel<S>& m, const std::vector<ParallelPair>& pairs) {
  NoGradGuard ng;
  RunContext<S> eval;
  double err = 0;
  for (auto& p : pairs)
    for (auto dir : {Direction::forward, Direction::reverse}) {
      const auto in = m.end_input(dir == Direction::forward ? p.src : p.tgt, dir);
      const auto out = m.run_stack(SplitState<S>::split(in), dir, eval);
      const auto back =
          m.run_stack(out, dir == Direction::forward ? Direction::reverse : Direction::forward, eval).merge();
      for (std::size_t i = 0; i < in.size(); ++i)
        err = std::max(err, std::abs(static_cast<double>(back[i]) - static_cast<double>(in[i])));
    }
  return err;
}

/// Maps a dense end representation back to units: each row, minus its
/// position features, goes to the nearest row of that end's encoder table.
template <class S>
UnitSequence nearest_units(const DuplexModel<S>& m, const Tensor<S>& rep, Direction side) {
  const auto& table = m.encoder(side).table;
  const std::size_t T = rep.rows(), h = rep.cols(), V = table.dim(0);
  std::vector<S> pos(T * h, S(0));
  if (m.config().position_features) pos = position_features<S>(T, h).data();
  UnitSequence out(T);
  for (std::size_t i = 0; i < T; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < V; ++u) {
      double d = 0;
      for (std::size_t j = 0; j < h; ++j) {
        const double e = static_cast<double>(rep[i * h + j]) - static_cast<double>(pos[i * h + j]) -
                         static_cast<double>(table[u * h + j]);
        d += e * e;
      }
      if (d < best) {
        best = d;
        out[i] = static_cast<int>(u);
      }
    }
  }
  return out;
}

}  // namespace dplx
