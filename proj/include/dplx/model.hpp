#pragma once

#include <map>
#include <string>
#include <vector>

#include "dplx/data.hpp"
#include "dplx/diffusion.hpp"
#include "dplx/rdc.hpp"

namespace dplx {

enum class Direction { forward, reverse };

inline std::string to_string(Direction d) { return d == Direction::forward ? "fwd" : "rev"; }

struct ModelConfig {
  int vocab = 12;
  std::size_t max_units = 24;  // longest unit sequence on either side
  std::size_t width = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t kernel = 7;
  std::size_t ffn_mult = 4;
  double dropout = 0.0;
  bool encoders_trainable = true;
  bool position_features = true;

  /// Relative-position reach covers the 2×-upsampled sequences.
  StackShape stack_shape() const {
    StackShape s;
    s.width = width;
    s.layers = layers;
    s.heads = heads;
    s.kernel = kernel;
    s.ffn_mult = ffn_mult;
    s.max_len = 2 * max_units;
    s.dropout = dropout;
    return s;
  }

  void validate() const {
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
    if (max_units < 1) throw ConfigError("max_units must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    stack_shape().validate();
  }

  /// Closed-form trainable parameter count of the full duplex model.
  std::size_t parameter_count() const {
    const std::size_t h = width, c = width / 2, V = static_cast<std::size_t>(vocab);
    const std::size_t encoders = encoders_trainable ? 2 * V * h : 0;
    const std::size_t ups = 2 * Upsampler<double>::parameter_count(h);
    const std::size_t unit_heads = 2 * (h * (V + 1) + V + 1);
    const std::size_t mel_heads = 2 * (h * h + h);
    const std::size_t time = h * h + h;
    const std::size_t cross = layers * (2 * c + 2 * h + (c * c + c) + 2 * (h * c + c) + (c * c + c));
    const std::size_t eps_heads = 2 * (h * h + h);
    return encoders + ups + stack_shape().parameter_count() + unit_heads + mel_heads + time + cross + eps_heads;
  }

  /// Conformer-Large-sized preset; only used for parameter-count checks.
  static ModelConfig paper_large() {
    ModelConfig m;
    m.vocab = 100;
    m.max_units = 512;
    m.width = 1024;
    m.layers = 18;
    m.heads = 8;
    m.kernel = 31;
    return m;
  }
};

/// Fixed sinusoidal features: the first half of the channels encodes the index
/// counted from the start, the second half the index counted from the end.
template <class S>
Tensor<S> position_features(std::size_t time, std::size_t width) {
  std::vector<S> v(time * width, S(0));
  const std::size_t half = width / 2, q = half / 2;
  for (std::size_t i = 0; i < time; ++i) {
    const double pos[2] = {static_cast<double>(i), static_cast<double>(time - 1 - i)};
    for (std::size_t side = 0; side < 2; ++side)
      for (std::size_t j = 0; j < q; ++j) {
        const double freq = std::exp(-std::log(100.0) * static_cast<double>(j) / static_cast<double>(q));
        v[i * width + side * half + j] = static_cast<S>(std::sin(pos[side] * freq));
        v[i * width + side * half + q + j] = static_cast<S>(std::cos(pos[side] * freq));
      }
  }
  return Tensor<S>({time, width}, std::move(v));
}

/// Fixed features for a packed batch: one block per sequence length.
template <class S>
Tensor<S> packed_position_features(std::span<const std::size_t> lengths, std::size_t width) {
  std::vector<S> v;
  for (auto n : lengths) {
    const auto f = position_features<S>(n, width);
    v.insert(v.end(), f.data().begin(), f.data().end());
  }
  const std::size_t rows = v.size() / width;
  return Tensor<S>({rows, width}, std::move(v));
}

/// One pass over a packed batch. Row blocks follow `lengths`.
template <class S>
struct PassResult {
  Tensor<S> input;                          // upsampled end inputs, [Σ2T×h]
  SplitState<S> output;                     // opposite-end representations
  std::vector<SplitState<S>> boundaries;    // L+1 layer boundary states (optional)
  Tensor<S> log_probs;                      // [Σ2T×(V+1)] over the opposite end's units + blank
  std::vector<std::size_t> lengths;         // 2T per sequence

  std::size_t count() const { return lengths.size(); }
  std::pair<std::size_t, std::size_t> range(std::size_t i) const {
    std::size_t b = 0;
    for (std::size_t k = 0; k < i; ++k) b += lengths[k];
    return {b, b + lengths[i]};
  }
  Tensor<S> rows_of(const Tensor<S>& t, std::size_t i) const {
    const auto [b, e] = range(i);
    return slice_rows(t, b, e);
  }
  Tensor<S> log_probs_of(std::size_t i) const { return rows_of(log_probs, i); }
};

/// Parameter set θ: stand-in encoders, upsamplers, the reversible stack, unit
/// and dense projection heads, and the diffusion conditioner (time embedding,
/// per-layer cross-attention, noise heads).
template <class S>
class DuplexModel {
 public:
  DuplexModel() = default;
  DuplexModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t h = cfg.width, c = h / 2, V = static_cast<std::size_t>(cfg.vocab);
    enc_x = StandInEncoder<S>(V, h, cfg.encoders_trainable, rng);
    enc_y = StandInEncoder<S>(V, h, cfg.encoders_trainable, rng);
    up_x = Upsampler<S>(h, rng);
    up_y = Upsampler<S>(h, rng);
    stack = DuplexStack<S>(cfg.stack_shape(), rng);
    head_x = Linear<S>(h, V + 1, rng);
    head_y = Linear<S>(h, V + 1, rng);
    mel_x = Linear<S>(h, h, rng);
    mel_y = Linear<S>(h, h, rng);
    time_proj = Linear<S>(h, h, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      cross.push_back(MhsaParams<S>::cross(c, h, cfg.heads, static_cast<S>(cfg.dropout), rng));
    eps_x = Linear<S>(h, h, rng);
    eps_y = Linear<S>(h, h, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  int blank() const { return cfg_.vocab; }
  std::size_t width() const { return cfg_.width; }

  StandInEncoder<S> enc_x, enc_y;
  Upsampler<S> up_x, up_y;
  DuplexStack<S> stack;
  Linear<S> head_x, head_y;
  Linear<S> mel_x, mel_y;
  Linear<S> time_proj;
  std::vector<MhsaParams<S>> cross;
  Linear<S> eps_x, eps_y;

  void visit(ParamVisitor<S>& v) {
    enc_x.visit("enc_x", v);
    enc_y.visit("enc_y", v);
    up_x.visit("up_x", v);
    up_y.visit("up_y", v);
    stack.visit("stack", v);
    head_x.visit("head_x", v);
    head_y.visit("head_y", v);
    mel_x.visit("mel_x", v);
    mel_y.visit("mel_y", v);
    time_proj.visit("time_proj", v);
    for (std::size_t l = 0; l < cross.size(); ++l) cross[l].visit("cross.layer" + std::to_string(l), v);
    eps_x.visit("eps_x", v);
    eps_y.visit("eps_y", v);
  }

  /// Trainable tensors in registration order.
  std::vector<std::pair<std::string, Tensor<S>>> parameters() {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    ParamVisitor<S> v{[&](const std::string& n, Tensor<S>& t) {
                        if (t.requires_grad()) out.emplace_back(n, t);
                      },
                      [](const std::string&, std::vector<S>&, std::size_t) {}};
    visit(v);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [_, t] : parameters()) n += t.size();
    return n;
  }

  /// Names of diffusion-only parameters (time embedding, conditioner
  /// cross-attention, noise heads).
  static bool is_diffusion_param(const std::string& name) {
    return name.rfind("time_proj", 0) == 0 || name.rfind("cross.", 0) == 0 || name.rfind("eps_", 0) == 0;
  }

  /// Every parameter and persistent buffer, copied.
  NamedTensors<S> state() {
    NamedTensors<S> out;
    ParamVisitor<S> v{[&](const std::string& n, Tensor<S>& t) { out.emplace_back(n, Tensor<S>(t.shape(), t.data())); },
                      [&](const std::string& n, std::vector<S>& b, std::size_t len) {
                        out.emplace_back(n, Tensor<S>({len}, b));
                      }};
    visit(v);
    return out;
  }

  void load_state(const NamedTensors<S>& items) {
    std::map<std::string, const Tensor<S>*> by_name;
    for (auto& [n, t] : items) by_name[n] = &t;
    std::size_t used = 0;
    auto fetch = [&](const std::string& n) -> const Tensor<S>& {
      auto it = by_name.find(n);
      if (it == by_name.end()) throw FormatError("state is missing tensor '" + n + "'");
      ++used;
      return *it->second;
    };
    ParamVisitor<S> v{[&](const std::string& n, Tensor<S>& t) {
                        const auto& src = fetch(n);
                        if (src.shape() != t.shape())
                          throw FormatError("tensor '" + n + "' has shape " + shape_str(src.shape()) + ", model expects " +
                                            shape_str(t.shape()));
                        t.data() = src.data();
                      },
                      [&](const std::string& n, std::vector<S>& b, std::size_t len) {
                        const auto& src = fetch(n);
                        if (src.size() != len) throw FormatError("buffer '" + n + "' has the wrong length");
                        b = src.data();
                      }};
    visit(v);
    if (used != items.size()) throw FormatError("state carries tensors unknown to this model");
  }

  // -------------------------------------------------------------------------
  // translation passes

  const StandInEncoder<S>& encoder(Direction input_side) const {
    return input_side == Direction::forward ? enc_x : enc_y;
  }

  /// E(units) plus optional position features, [T×h].
  Tensor<S> embed(const UnitSequence& units, Direction input_side) const { return embed_batch({units}, input_side); }

  /// Packed E(units) for several sequences, [ΣT×h].
  Tensor<S> embed_batch(const std::vector<UnitSequence>& seqs, Direction input_side) const {
    if (seqs.empty()) throw DataError("embed: empty batch");
    UnitSequence all;
    std::vector<std::size_t> lengths;
    for (auto& u : seqs) {
      if (u.empty()) throw DataError("encode: empty unit sequence");
      all.insert(all.end(), u.begin(), u.end());
      lengths.push_back(u.size());
    }
    auto e = encode(all, encoder(input_side));
    if (cfg_.position_features) e = add(e, packed_position_features<S>(lengths, cfg_.width));
    return e;
  }

  /// up(E(units)), the 2×-length stack input for the given input end.
  Tensor<S> end_input(const UnitSequence& units, Direction dir) const { return end_input_batch({units}, dir); }

  Tensor<S> end_input_batch(const std::vector<UnitSequence>& seqs, Direction dir) const {
    return upsample_source(embed_batch(seqs, dir), dir == Direction::forward ? up_x : up_y);
  }

  static std::vector<std::size_t> upsampled_lengths(const std::vector<UnitSequence>& seqs) {
    std::vector<std::size_t> out;
    for (auto& u : seqs) out.push_back(2 * u.size());
    return out;
  }

  SplitState<S> run_stack(const SplitState<S>& s, Direction dir, const RunContext<S>& ctx,
                          std::vector<SplitState<S>>* boundaries = nullptr) {
    return dir == Direction::forward ? stack_forward(s, stack, ctx, boundaries) : stack_reverse(s, stack, ctx, boundaries);
  }

  /// Forward: x-units → f→ → y-side unit log-probs; reverse: y-units → f← → x-side.
  PassResult<S> translate(const UnitSequence& units, Direction dir, const RunContext<S>& ctx, bool keep_boundaries = false) {
    return translate_batch({units}, dir, ctx, keep_boundaries);
  }

  /// Packed pass over several sequences; attention and convolution stay within
  /// each sequence, batch normalization sees the whole batch.
  PassResult<S> translate_batch(const std::vector<UnitSequence>& seqs, Direction dir, const RunContext<S>& ctx,
                                bool keep_boundaries = false) {
    PassResult<S> r;
    r.input = end_input_batch(seqs, dir);
    r.lengths = upsampled_lengths(seqs);
    r.output = run_stack(SplitState<S>::split(r.input, r.lengths), dir, ctx, keep_boundaries ? &r.boundaries : nullptr);
    const auto& head = dir == Direction::forward ? head_y : head_x;
    r.log_probs = log_softmax_rows(head(r.output.merge()));
    return r;
  }

  // -------------------------------------------------------------------------
  // diffusion conditioner

  /// ε̂ for a noisy sequence of one end, conditioned on the clean encoding of the
  /// other end through per-layer cross-attention. `dir` names the mapping the
  /// prediction serves: forward predicts target-side noise given x0, reverse
  /// predicts source-side noise given y0.
  Tensor<S> denoise(const Tensor<S>& noisy, std::size_t t, const Tensor<S>& memory, Direction dir,
                    const RunContext<S>& ctx, std::vector<std::size_t> noisy_lengths = {},
                    std::vector<std::size_t> memory_lengths = {}) {
    if (noisy.cols() != cfg_.width || memory.cols() != cfg_.width)
      throw DimensionError("denoise: inputs " + shape_str(noisy.shape()) + ", " + shape_str(memory.shape()) +
                           " vs model width " + std::to_string(cfg_.width));
    const auto temb = time_proj(timestep_embedding<S>(t, cfg_.width));
    const auto h = add_rowvec(noisy, temb);
    std::vector<CrossMemory<S>> mem(cross.size());
    for (std::size_t l = 0; l < cross.size(); ++l) mem[l] = {&memory, &cross[l], memory_lengths};
    const auto s = SplitState<S>::split(h, noisy_lengths);
    const auto out = dir == Direction::forward ? stack_forward<S>(s, stack, ctx, nullptr, mem.data())
                                               : stack_reverse<S>(s, stack, ctx, nullptr, mem.data());
    return (dir == Direction::forward ? eps_y : eps_x)(out.merge());
  }

  NoisePredictor<S> predictor(Direction dir, const RunContext<S>& ctx, std::vector<std::size_t> noisy_lengths = {},
                              std::vector<std::size_t> memory_lengths = {}) {
    return [this, dir, ctx, noisy_lengths, memory_lengths](const Tensor<S>& xt, std::size_t t, const Tensor<S>& mem) {
      return denoise(xt, t, mem, dir, ctx, noisy_lengths, memory_lengths);
    };
  }

 private:
  ModelConfig cfg_;
};

}  // namespace dplx
