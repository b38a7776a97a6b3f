#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dplx/losses.hpp"
#include "dplx/rdc.hpp"
#include "dplx/rng.hpp"

namespace dplx {

enum class Difficulty { copy, shift, reverse_shift, local_swap_stretch };

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "copy") return Difficulty::copy;
  if (s == "shift") return Difficulty::shift;
  if (s == "reverse_shift") return Difficulty::reverse_shift;
  if (s == "local_swap_stretch") return Difficulty::local_swap_stretch;
  throw ConfigError("unknown difficulty '" + s + "'");
}

inline std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::copy: return "copy";
    case Difficulty::shift: return "shift";
    case Difficulty::reverse_shift: return "reverse_shift";
    case Difficulty::local_swap_stretch: return "local_swap_stretch";
  }
  return "?";
}

struct ParallelPair {
  UnitSequence src, tgt;
  bool operator==(const ParallelPair&) const = default;
};

/// Ground-truth mapping G for each task:
///   copy               identity
///   shift              u ↦ (u + k) mod V
///   reverse_shift      reverse, then shift
///   local_swap_stretch swap positions (0,1), (2,3), …; then every unit with
///                      u mod 3 == 0 is followed by (u + 1) mod V
inline UnitSequence apply_mapping(Difficulty d, const UnitSequence& src, int vocab, int shift = 1) {
  UnitSequence out = src;
  auto shifted = [&](int u) { return ((u + shift) % vocab + vocab) % vocab; };
  switch (d) {
    case Difficulty::copy: break;
    case Difficulty::shift:
      for (auto& u : out) u = shifted(u);
      break;
    case Difficulty::reverse_shift:
      std::reverse(out.begin(), out.end());
      for (auto& u : out) u = shifted(u);
      break;
    case Difficulty::local_swap_stretch: {
      for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
      UnitSequence stretched;
      for (int u : out) {
        stretched.push_back(u);
        if (u % 3 == 0) stretched.push_back((u + 1) % vocab);
      }
      out = std::move(stretched);
      break;
    }
  }
  return out;
}

struct CorpusSpec {
  std::size_t pairs = 1000;
  int vocab = 100;
  std::size_t max_len = 24;
  Difficulty difficulty = Difficulty::copy;
  std::uint64_t seed = 0;
  int shift = 1;

  void validate() const {
    if (vocab < 2) throw ConfigError("vocabulary size must be >= 2");
    if (max_len < 2) throw ConfigError("max_len must be >= 2");
  }
};

/// Pairs whose target stays within max_len and admits a CTC alignment from the
/// 2×-upsampled opposite side in both directions.
inline bool pair_is_trainable(const ParallelPair& p, std::size_t max_len) {
  if (p.src.empty() || p.tgt.empty() || p.src.size() > max_len || p.tgt.size() > max_len) return false;
  return ctc_min_frames(p.tgt) <= 2 * p.src.size() && ctc_min_frames(p.src) <= 2 * p.tgt.size();
}

/// Deterministic per seed. Source lengths are uniform in [1, max_len]; pairs
/// violating the length or alignment bounds are redrawn.
inline std::vector<ParallelPair> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(RngStreams::derive_seed(spec.seed, "data"));
  std::uniform_int_distribution<std::size_t> len_dist(1, spec.max_len);
  std::uniform_int_distribution<int> unit_dist(0, spec.vocab - 1);
  std::vector<ParallelPair> out;
  out.reserve(spec.pairs);
  while (out.size() < spec.pairs) {
    ParallelPair p;
    p.src.resize(len_dist(rng));
    for (auto& u : p.src) u = unit_dist(rng);
    p.tgt = apply_mapping(spec.difficulty, p.src, spec.vocab, spec.shift);
    if (pair_is_trainable(p, spec.max_len)) out.push_back(std::move(p));
  }
  return out;
}

inline std::uint64_t sequence_hash(const UnitSequence& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int u : s) h = fnv1a(std::to_string(u) + ",", h);
  return h;
}

struct CorpusSplits {
  std::vector<ParallelPair> train, dev, test;
};

/// Assigns each pair by the hash of its source sequence, so identical sources
/// never straddle two splits.
inline CorpusSplits split_by_hash(const std::vector<ParallelPair>& pairs, unsigned dev_percent = 10,
                                  unsigned test_percent = 10) {
  CorpusSplits s;
  for (auto& p : pairs) {
    const auto bucket = splitmix64(sequence_hash(p.src)) % 100;
    if (bucket < dev_percent)
      s.dev.push_back(p);
    else if (bucket < dev_percent + test_percent)
      s.test.push_back(p);
    else
      s.train.push_back(p);
  }
  return s;
}

inline void write_corpus(const std::string& path, const std::vector<ParallelPair>& pairs) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (auto& p : pairs) os << nlohmann::json{{"src", p.src}, {"tgt", p.tgt}}.dump() << '\n';
}

inline std::vector<ParallelPair> read_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open corpus '" + path + "'");
  std::vector<ParallelPair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("src").get<UnitSequence>(), j.at("tgt").get<UnitSequence>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corpus line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Re-checks every pair against the ground-truth mapping; returns the count of
/// violations.
inline std::size_t count_mapping_violations(const std::vector<ParallelPair>& pairs, Difficulty d, int vocab, int shift = 1) {
  std::size_t bad = 0;
  for (auto& p : pairs)
    if (apply_mapping(d, p.src, vocab, shift) != p.tgt) ++bad;
  return bad;
}

// ---------------------------------------------------------------------------
// stand-in encoders

/// Learned embedding table standing in for a pretrained speech encoder.
template <class S>
struct StandInEncoder {
  Tensor<S> table;  // [V×h]

  StandInEncoder() = default;
  StandInEncoder(std::size_t vocab, std::size_t width, bool trainable, Rng& rng)
      : table(randn<S>({vocab, width}, rng, S(1), trainable)) {}

  std::size_t vocab() const { return table.dim(0); }
  std::size_t width() const { return table.dim(1); }
  void visit(const std::string& p, ParamVisitor<S>& v) { v.param(p + ".table", table); }
};

template <class S>
Tensor<S> encode(const UnitSequence& seq, const StandInEncoder<S>& enc) {
  if (seq.empty()) throw DataError("encode: empty unit sequence");
  for (int u : seq)
    if (u < 0 || static_cast<std::size_t>(u) >= enc.vocab())
      throw DataError("encode: unit " + std::to_string(u) + " outside vocabulary of " + std::to_string(enc.vocab()));
  return gather_rows(enc.table, std::span<const int>(seq));
}

// ---------------------------------------------------------------------------
// batching

struct PaddedBatch {
  std::vector<std::size_t> index;  // positions in the input pair list
  std::vector<UnitSequence> src, tgt;
  std::vector<std::vector<bool>> src_mask, tgt_mask;
  std::size_t src_width = 0, tgt_width = 0;

  std::size_t size() const { return index.size(); }
  std::size_t valid_tokens() const {
    std::size_t n = 0;
    for (auto& m : src_mask) n += static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    for (auto& m : tgt_mask) n += static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    return n;
  }
};

/// Length-bucketed batches: pairs are sorted by (source, target) length, packed
/// while batch_size × padded width stays within max_batch_tokens, padded to the
/// bucket maximum, and the batch order is shuffled by `seed`.
inline std::vector<PaddedBatch> make_batches(const std::vector<ParallelPair>& pairs, int pad_unit,
                                             std::size_t max_batch_tokens, std::uint64_t seed) {
  if (pairs.empty()) throw DataError("batch: empty pair list");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(pairs[a].src.size(), pairs[a].tgt.size()) < std::pair(pairs[b].src.size(), pairs[b].tgt.size());
  });
  auto width = [&](std::size_t i) { return std::max(pairs[i].src.size(), pairs[i].tgt.size()); };

  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> cur;
  std::size_t cur_w = 0;
  for (auto i : order) {
    if (width(i) > max_batch_tokens)
      throw DataError("batch: pair " + std::to_string(i) + " with " + std::to_string(width(i)) +
                      " tokens exceeds max_batch_tokens " + std::to_string(max_batch_tokens));
    const std::size_t w = std::max(cur_w, width(i));
    if (!cur.empty() && w * (cur.size() + 1) > max_batch_tokens) {
      groups.push_back(std::move(cur));
      cur.clear();
      cur_w = 0;
    }
    cur.push_back(i);
    cur_w = std::max(cur_w, width(i));
  }
  if (!cur.empty()) groups.push_back(std::move(cur));

  Rng rng(RngStreams::derive_seed(seed, "batches"));
  std::shuffle(groups.begin(), groups.end(), rng);

  std::vector<PaddedBatch> out;
  out.reserve(groups.size());
  for (auto& g : groups) {
    PaddedBatch b;
    b.index = g;
    for (auto i : g) {
      b.src_width = std::max(b.src_width, pairs[i].src.size());
      b.tgt_width = std::max(b.tgt_width, pairs[i].tgt.size());
    }
    for (auto i : g) {
      auto pad = [&](const UnitSequence& s, std::size_t w, std::vector<UnitSequence>& seqs,
                     std::vector<std::vector<bool>>& masks) {
        UnitSequence padded = s;
        padded.resize(w, pad_unit);
        std::vector<bool> m(w, false);
        std::fill_n(m.begin(), s.size(), true);
        seqs.push_back(std::move(padded));
        masks.push_back(std::move(m));
      };
      pad(pairs[i].src, b.src_width, b.src, b.src_mask);
      pad(pairs[i].tgt, b.tgt_width, b.tgt, b.tgt_mask);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// Mixed-length groups for packed training: pairs are shuffled by `seed` and
/// taken in order while the summed width max(|src|, |tgt|) stays within
/// max_batch_tokens. Returns indices into `pairs`.
inline std::vector<std::vector<std::size_t>> make_packed_batches(const std::vector<ParallelPair>& pairs,
                                                                 std::size_t max_batch_tokens, std::uint64_t seed) {
  if (pairs.empty()) throw DataError("batch: empty pair list");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(RngStreams::derive_seed(seed, "batches"));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::size_t used = 0;
  for (auto i : order) {
    const std::size_t w = std::max(pairs[i].src.size(), pairs[i].tgt.size());
    if (w > max_batch_tokens)
      throw DataError("batch: pair " + std::to_string(i) + " with " + std::to_string(w) +
                      " tokens exceeds max_batch_tokens " + std::to_string(max_batch_tokens));
    if (!cur.empty() && used + w > max_batch_tokens) {
      out.push_back(std::move(cur));
      cur.clear();
      used = 0;
    }
    cur.push_back(i);
    used += w;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Strips padding from row `r` of a batch side.
inline UnitSequence unpad(const UnitSequence& seq, const std::vector<bool>& mask) {
  UnitSequence out;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (mask[i]) out.push_back(seq[i]);
  return out;
}

}  // namespace dplx
