#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dplx/ops.hpp"
#include "dplx/rng.hpp"
#include "dplx/serialize.hpp"

namespace dplx {

/// Per-call execution state: training flag, dropout generator, and an optional
/// sink that records the sub-module invocation chain over {f, m, c}.
template <class S>
struct RunContext {
  bool training = false;
  Rng* dropout_rng = nullptr;
  std::string* trace = nullptr;

  void mark(char op) const {
    if (trace) trace->push_back(op);
  }
};

template <class S>
Tensor<S> apply_dropout(const Tensor<S>& x, S p, const RunContext<S>& ctx) {
  if (!ctx.training || p == S(0)) return x;
  if (!ctx.dropout_rng) throw ConfigError("training-mode dropout needs a generator");
  return dropout(x, p, true, *ctx.dropout_rng);
}

/// Parameter registration: every learnable tensor and every persistent buffer
/// is visited with a stable dotted name.
template <class S>
struct ParamVisitor {
  std::function<void(const std::string&, Tensor<S>&)> param;
  std::function<void(const std::string&, std::vector<S>&, std::size_t)> buffer;
};

template <class S>
struct Linear {
  Tensor<S> w;  // [in×out]
  Tensor<S> b;  // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const S bound = S(1) / std::sqrt(S(in));
    w = rand_uniform<S>({in, out}, rng, -bound, bound, true);
    b = Tensor<S>::zeros({out}, true);
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, w, b); }
  void visit(const std::string& p, ParamVisitor<S>& v) {
    v.param(p + ".w", w);
    v.param(p + ".b", b);
  }
  void zero() {
    std::fill(w.data().begin(), w.data().end(), S(0));
    std::fill(b.data().begin(), b.data().end(), S(0));
  }
};

template <class S>
struct LayerNormParams {
  Tensor<S> gain, bias;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t h) : gain(Tensor<S>::full({h}, S(1), true)), bias(Tensor<S>::zeros({h}, true)) {}
  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain, bias); }
  void visit(const std::string& p, ParamVisitor<S>& v) {
    v.param(p + ".gain", gain);
    v.param(p + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// sub-modules

template <class S>
struct FfnParams {
  LayerNormParams<S> ln;
  Linear<S> w1, w2;
  S p1 = S(0), p2 = S(0);

  FfnParams() = default;
  FfnParams(std::size_t c, std::size_t mult, S dropout, Rng& rng)
      : ln(c), w1(c, mult * c, rng), w2(mult * c, c, rng), p1(dropout), p2(dropout) {}
  void visit(const std::string& p, ParamVisitor<S>& v) {
    ln.visit(p + ".ln", v);
    w1.visit(p + ".w1", v);
    w2.visit(p + ".w2", v);
  }
};

/// p2 ∘ W2 ∘ p1 ∘ SiLU ∘ W1 ∘ LN
template <class S>
Tensor<S> ffn(const Tensor<S>& x, const FfnParams<S>& prm, const RunContext<S>& ctx) {
  if (x.cols() != prm.ln.gain.size())
    throw DimensionError("ffn: input " + shape_str(x.shape()) + " vs width " + std::to_string(prm.ln.gain.size()));
  ctx.mark('f');
  auto h = silu(prm.w1(prm.ln(x)));
  h = apply_dropout(h, prm.p1, ctx);
  return apply_dropout(prm.w2(h), prm.p2, ctx);
}

template <class S>
struct MhsaParams {
  std::size_t heads = 1;
  std::size_t max_dist = 0;  // 0: no relative-position bias
  LayerNormParams<S> ln;
  std::optional<LayerNormParams<S>> ln_memory;  // set for cross-attention
  Linear<S> q, k, v, o;
  Tensor<S> rel;  // [heads×(2·max_dist−1)]
  S p = S(0);

  MhsaParams() = default;
  /// Self-attention over width c with a relative-position bias table.
  MhsaParams(std::size_t c, std::size_t n_heads, std::size_t max_len, S dropout, Rng& rng)
      : heads(n_heads), max_dist(max_len), ln(c), q(c, c, rng), k(c, c, rng), v(c, c, rng), o(c, c, rng), p(dropout) {
    check(c);
    rel = randn<S>({heads, 2 * max_dist - 1}, rng, S(0.02), true);
  }
  /// Cross-attention: queries of width c, memory of width mem_width.
  static MhsaParams cross(std::size_t c, std::size_t mem_width, std::size_t n_heads, S dropout, Rng& rng) {
    MhsaParams m;
    m.heads = n_heads;
    m.ln = LayerNormParams<S>(c);
    m.ln_memory = LayerNormParams<S>(mem_width);
    m.q = Linear<S>(c, c, rng);
    m.k = Linear<S>(mem_width, c, rng);
    m.v = Linear<S>(mem_width, c, rng);
    m.o = Linear<S>(c, c, rng);
    m.p = dropout;
    m.check(c);
    return m;
  }
  void check(std::size_t c) const {
    if (heads == 0 || c % heads != 0)
      throw ConfigError("mhsa: width " + std::to_string(c) + " not divisible by head count " + std::to_string(heads));
  }
  void visit(const std::string& pre, ParamVisitor<S>& vis) {
    ln.visit(pre + ".ln", vis);
    if (ln_memory) ln_memory->visit(pre + ".ln_mem", vis);
    q.visit(pre + ".q", vis);
    k.visit(pre + ".k", vis);
    v.visit(pre + ".v", vis);
    o.visit(pre + ".o", vis);
    if (rel.defined()) vis.param(pre + ".rel", rel);
  }
};

/// Scaled dot-product attention for one head with an explicit additive bias
/// matrix [tq×tk] (may be undefined) and an optional key-validity mask.
template <class S>
Tensor<S> attend_head(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& bias,
                      std::span<const bool> key_valid = {}) {
  auto scores = scale(matmul_nt(q, k), S(1) / std::sqrt(S(q.cols())));
  if (bias.defined()) scores = add(scores, bias);
  return matmul(softmax_rows(scores, key_valid), v);
}

/// p ∘ Attention ∘ LN. Self-attention when `kv` is the query tensor itself and
/// the params carry no memory norm; cross-attention otherwise. Output length
/// always equals the query length. Packed inputs attend only within their own
/// segment: query segment i sees key segment i (or the whole memory when the
/// memory is a single segment).
template <class S>
Tensor<S> mhsa(const Tensor<S>& x, const Tensor<S>& kv, const MhsaParams<S>& prm, const RunContext<S>& ctx,
               std::span<const bool> key_valid = {}, std::span<const std::size_t> q_segments = {},
               std::span<const std::size_t> kv_segments = {}) {
  const std::size_t c = prm.ln.gain.size();
  if (x.cols() != c) throw DimensionError("mhsa: query " + shape_str(x.shape()) + " vs width " + std::to_string(c));
  ctx.mark('m');
  const bool self = kv.node() == x.node();
  const auto xq = prm.ln(x);
  Tensor<S> xkv;
  if (prm.ln_memory) {
    if (kv.cols() != prm.ln_memory->gain.size())
      throw DimensionError("mhsa: memory " + shape_str(kv.shape()) + " vs width " +
                           std::to_string(prm.ln_memory->gain.size()));
    xkv = (*prm.ln_memory)(kv);
  } else {
    if (kv.cols() != c) throw DimensionError("mhsa: key/value " + shape_str(kv.shape()) + " vs width " + std::to_string(c));
    xkv = self ? xq : prm.ln(kv);
  }
  if (!key_valid.empty() && key_valid.size() != kv.rows())
    throw DimensionError("mhsa: key mask covers " + std::to_string(key_valid.size()) + " of " +
                         std::to_string(kv.rows()) + " keys");
  const auto qs = segment_ranges(q_segments, x.rows());
  const auto ks = segment_ranges(self && kv_segments.empty() ? q_segments : kv_segments, kv.rows());
  if (ks.size() != 1 && ks.size() != qs.size())
    throw DimensionError("mhsa: " + std::to_string(qs.size()) + " query segments vs " + std::to_string(ks.size()) +
                         " memory segments");

  const auto Q = prm.q(xq), K = prm.k(xkv), V = prm.v(xkv);
  const std::size_t d = c / prm.heads;
  std::vector<Tensor<S>> rows;
  rows.reserve(qs.size());
  for (std::size_t sgm = 0; sgm < qs.size(); ++sgm) {
    const auto [qb, qe] = qs[sgm];
    const auto [kb, ke] = ks.size() == 1 ? ks[0] : ks[sgm];
    const auto mask = key_valid.empty() ? key_valid : key_valid.subspan(kb, ke - kb);
    std::vector<Tensor<S>> heads;
    heads.reserve(prm.heads);
    for (std::size_t h = 0; h < prm.heads; ++h) {
      Tensor<S> bias;
      if (prm.rel.defined()) bias = relative_bias(prm.rel, h, qe - qb, ke - kb, prm.max_dist);
      heads.push_back(attend_head(slice_block(Q, qb, qe, h * d, (h + 1) * d), slice_block(K, kb, ke, h * d, (h + 1) * d),
                                  slice_block(V, kb, ke, h * d, (h + 1) * d), bias, mask));
    }
    rows.push_back(prm.heads == 1 ? heads[0] : concat_cols(heads));
  }
  return apply_dropout(prm.o(concat_rows(rows)), prm.p, ctx);
}

template <class S>
struct CnnParams {
  LayerNormParams<S> ln;
  Linear<S> pw1;  // c → 2c
  Tensor<S> dw;   // [c×k]
  Tensor<S> bn_gamma, bn_beta;
  BatchNormStats<S> bn;
  Linear<S> pw2;  // c → c
  S p = S(0);

  CnnParams() = default;
  CnnParams(std::size_t c, std::size_t kernel, S dropout, Rng& rng)
      : ln(c), pw1(c, 2 * c, rng), bn_gamma(Tensor<S>::full({c}, S(1), true)), bn_beta(Tensor<S>::zeros({c}, true)),
        bn(c), pw2(c, c, rng), p(dropout) {
    if (kernel % 2 == 0) throw ConfigError("cnn: depthwise kernel width must be odd, got " + std::to_string(kernel));
    const S bound = S(1) / std::sqrt(S(kernel));
    dw = rand_uniform<S>({c, kernel}, rng, -bound, bound, true);
  }
  void visit(const std::string& pre, ParamVisitor<S>& v) {
    ln.visit(pre + ".ln", v);
    pw1.visit(pre + ".pw1", v);
    v.param(pre + ".dw", dw);
    v.param(pre + ".bn.gamma", bn_gamma);
    v.param(pre + ".bn.beta", bn_beta);
    v.buffer(pre + ".bn.running_mean", bn.mean, bn.mean.size());
    v.buffer(pre + ".bn.running_var", bn.var, bn.var.size());
    pw2.visit(pre + ".pw2", v);
  }
};

/// p ∘ PW2 ∘ Swish ∘ BN ∘ DW ∘ Glu ∘ PW1 ∘ LN
template <class S>
Tensor<S> cnn(const Tensor<S>& x, CnnParams<S>& prm, const RunContext<S>& ctx,
              std::span<const std::size_t> segments = {}) {
  if (x.cols() != prm.ln.gain.size())
    throw DimensionError("cnn: input " + shape_str(x.shape()) + " vs width " + std::to_string(prm.ln.gain.size()));
  if (prm.dw.dim(1) % 2 == 0) throw ConfigError("cnn: depthwise kernel width must be odd");
  ctx.mark('c');
  auto h = glu(prm.pw1(prm.ln(x)));
  h = conv1d_depthwise(h, prm.dw, segments);
  h = batch_norm(h, prm.bn_gamma, prm.bn_beta, prm.bn, ctx.training);
  h = prm.pw2(silu(h));
  return apply_dropout(h, prm.p, ctx);
}

// ---------------------------------------------------------------------------
// reversible blocks

template <class S>
struct SplitState {
  Tensor<S> h1, h2;
  std::vector<std::size_t> lengths;

  SplitState() = default;
  SplitState(Tensor<S> a, Tensor<S> b) : h1(std::move(a)), h2(std::move(b)) {
    if (h1.shape() != h2.shape())
      throw DimensionError("split state halves differ: " + shape_str(h1.shape()) + " vs " + shape_str(h2.shape()));
    lengths = {h1.rows()};
  }

  /// `lengths` segments a packed batch; empty means one sequence.
  static SplitState split(const Tensor<S>& x, std::vector<std::size_t> lengths = {}) {
    if (x.cols() % 2 != 0) throw ConfigError("model width must be even, got " + std::to_string(x.cols()));
    const std::size_t c = x.cols() / 2;
    SplitState s(slice_cols(x, 0, c), slice_cols(x, c, 2 * c));
    if (!lengths.empty()) {
      segment_ranges(lengths, x.rows());
      s.lengths = std::move(lengths);
    }
    return s;
  }
  Tensor<S> merge() const { return concat_cols(h1, h2); }
  std::size_t time() const { return h1.rows(); }
};

template <class S>
struct RdcLayer {
  FfnParams<S> ffn_a, ffn_b;
  MhsaParams<S> mhsa;
  CnnParams<S> cnn;

  void visit(const std::string& p, ParamVisitor<S>& v) {
    ffn_a.visit(p + ".ffn_a", v);
    mhsa.visit(p + ".mhsa", v);
    cnn.visit(p + ".cnn", v);
    ffn_b.visit(p + ".ffn_b", v);
  }
};

/// Replaces in-block self-attention with attention over an external memory.
template <class S>
struct CrossMemory {
  const Tensor<S>* memory = nullptr;
  const MhsaParams<S>* attn = nullptr;
  std::span<const std::size_t> lengths = {};  // memory segments, paired with the query segments
};

template <class S>
Tensor<S> block_attention(const Tensor<S>& y1, const RdcLayer<S>& layer, const RunContext<S>& ctx,
                          const CrossMemory<S>* cross, std::span<const std::size_t> segments) {
  if (cross) return mhsa(y1, *cross->memory, *cross->attn, ctx, {}, segments, cross->lengths);
  return mhsa(y1, y1, layer.mhsa, ctx, {}, segments);
}

template <class S>
void check_block_width(const SplitState<S>& s, const RdcLayer<S>& layer) {
  const auto c = layer.ffn_a.ln.gain.size();
  if (s.h1.cols() != c || s.h2.cols() != c)
    throw DimensionError("block: split width " + std::to_string(s.h1.cols()) + " vs layer width " + std::to_string(c));
}

/// y1 = x1 + ½FFN_a(x2); y2 = x2 + MHSA(y1); z1 = y1 + CNN(y2); z2 = y2 + ½FFN_b(z1)
template <class S>
SplitState<S> block_forward(const SplitState<S>& s, RdcLayer<S>& layer, const RunContext<S>& ctx,
                            const CrossMemory<S>* cross = nullptr) {
  check_block_width(s, layer);
  const std::span<const std::size_t> seg(s.lengths);
  auto y1 = add(s.h1, scale(ffn(s.h2, layer.ffn_a, ctx), S(0.5)));
  auto y2 = add(s.h2, block_attention(y1, layer, ctx, cross, seg));
  auto z1 = add(y1, cnn(y2, layer.cnn, ctx, seg));
  auto z2 = add(y2, scale(ffn(z1, layer.ffn_b, ctx), S(0.5)));
  SplitState<S> out(z1, z2);
  out.lengths = s.lengths;
  return out;
}

/// y2 = z2 − ½FFN_b(z1); y1 = z1 − CNN(y2); x2 = y2 − MHSA(y1); x1 = y1 − ½FFN_a(x2)
template <class S>
SplitState<S> block_reverse(const SplitState<S>& s, RdcLayer<S>& layer, const RunContext<S>& ctx,
                            const CrossMemory<S>* cross = nullptr) {
  check_block_width(s, layer);
  const std::span<const std::size_t> seg(s.lengths);
  auto y2 = sub(s.h2, scale(ffn(s.h1, layer.ffn_b, ctx), S(0.5)));
  auto y1 = sub(s.h1, cnn(y2, layer.cnn, ctx, seg));
  auto x2 = sub(y2, block_attention(y1, layer, ctx, cross, seg));
  auto x1 = sub(y1, scale(ffn(x2, layer.ffn_a, ctx), S(0.5)));
  SplitState<S> out(x1, x2);
  out.lengths = s.lengths;
  return out;
}

// ---------------------------------------------------------------------------
// palindrome stack

struct StackShape {
  std::size_t width = 64;       // h
  std::size_t layers = 4;       // L
  std::size_t heads = 4;
  std::size_t kernel = 7;
  std::size_t ffn_mult = 4;
  std::size_t max_len = 48;     // relative-position reach
  double dropout = 0.0;

  void validate() const {
    if (layers == 0 || layers % 2 != 0) throw ConfigError("layer count must be even and positive, got " + std::to_string(layers));
    if (width == 0 || width % 2 != 0) throw ConfigError("model width must be even, got " + std::to_string(width));
    if ((width / 2) % heads != 0) throw ConfigError("half width must be divisible by the head count");
    if (kernel % 2 == 0) throw ConfigError("depthwise kernel width must be odd");
    if (max_len == 0) throw ConfigError("max_len must be positive");
  }

  /// Closed-form trainable parameter count of the stack.
  std::size_t parameter_count() const {
    const std::size_t c = width / 2, f = ffn_mult;
    const std::size_t ffn = 2 * c + (c * f * c + f * c) + (f * c * c + c);
    const std::size_t att = 2 * c + 4 * (c * c + c) + heads * (2 * max_len - 1);
    const std::size_t conv = 2 * c + (c * 2 * c + 2 * c) + c * kernel + 2 * c + (c * c + c);
    return layers * (2 * ffn + att + conv);
  }
};

template <class S>
struct DuplexStack {
  StackShape shape;
  std::vector<RdcLayer<S>> layers;

  DuplexStack() = default;
  DuplexStack(const StackShape& sh, Rng& rng) : shape(sh) {
    sh.validate();
    const std::size_t c = sh.width / 2;
    const auto p = static_cast<S>(sh.dropout);
    layers.reserve(sh.layers);
    for (std::size_t l = 0; l < sh.layers; ++l) {
      RdcLayer<S> layer;
      layer.ffn_a = FfnParams<S>(c, sh.ffn_mult, p, rng);
      layer.mhsa = MhsaParams<S>(c, sh.heads, sh.max_len, p, rng);
      layer.cnn = CnnParams<S>(c, sh.kernel, p, rng);
      layer.ffn_b = FfnParams<S>(c, sh.ffn_mult, p, rng);
      layers.push_back(std::move(layer));
    }
  }

  void visit(const std::string& p, ParamVisitor<S>& v) {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit(p + ".layer" + std::to_string(l), v);
  }
};

template <class S>
void check_even(const DuplexStack<S>& stack) {
  if (stack.layers.empty() || stack.layers.size() % 2 != 0)
    throw ConfigError("duplex stack needs an even, positive layer count, got " + std::to_string(stack.layers.size()));
}

/// f→ = F_L ∘ … ∘ F_{L/2+1} ∘ F_{L/2}⁻¹ ∘ … ∘ F_1⁻¹. When `boundaries` is given it
/// receives the L+1 states, index l holding the state after layer l.
template <class S>
SplitState<S> stack_forward(const SplitState<S>& x, DuplexStack<S>& stack, const RunContext<S>& ctx,
                            std::vector<SplitState<S>>* boundaries = nullptr,
                            const CrossMemory<S>* cross_per_layer = nullptr) {
  check_even(stack);
  const std::size_t L = stack.layers.size();
  if (boundaries) boundaries->assign(L + 1, {});
  SplitState<S> s = x;
  if (boundaries) (*boundaries)[0] = s;
  for (std::size_t l = 0; l < L; ++l) {
    const auto* cross = cross_per_layer ? &cross_per_layer[l] : nullptr;
    s = l < L / 2 ? block_reverse(s, stack.layers[l], ctx, cross) : block_forward(s, stack.layers[l], ctx, cross);
    if (boundaries) (*boundaries)[l + 1] = s;
  }
  return s;
}

/// f← = F_1 ∘ … ∘ F_{L/2} ∘ F_{L/2+1}⁻¹ ∘ … ∘ F_L⁻¹, the exact inverse of f→.
template <class S>
SplitState<S> stack_reverse(const SplitState<S>& z, DuplexStack<S>& stack, const RunContext<S>& ctx,
                            std::vector<SplitState<S>>* boundaries = nullptr,
                            const CrossMemory<S>* cross_per_layer = nullptr) {
  check_even(stack);
  const std::size_t L = stack.layers.size();
  if (boundaries) boundaries->assign(L + 1, {});
  SplitState<S> s = z;
  if (boundaries) (*boundaries)[L] = s;
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t l = L - 1 - i;
    const auto* cross = cross_per_layer ? &cross_per_layer[l] : nullptr;
    s = l >= L / 2 ? block_reverse(s, stack.layers[l], ctx, cross) : block_forward(s, stack.layers[l], ctx, cross);
    if (boundaries) (*boundaries)[l] = s;
  }
  return s;
}

// ---------------------------------------------------------------------------
// length upsampling

/// Stride-2 transposed convolution with kernel width 2:
/// out[2i+j] = x[i]·W_j + b, j ∈ {0, 1}.
template <class S>
struct Upsampler {
  Tensor<S> w0, w1, b;

  Upsampler() = default;
  Upsampler(std::size_t h, Rng& rng) {
    const S bound = S(1) / std::sqrt(S(h));
    w0 = rand_uniform<S>({h, h}, rng, -bound, bound, true);
    w1 = rand_uniform<S>({h, h}, rng, -bound, bound, true);
    b = Tensor<S>::zeros({h}, true);
  }
  void visit(const std::string& p, ParamVisitor<S>& v) {
    v.param(p + ".w0", w0);
    v.param(p + ".w1", w1);
    v.param(p + ".b", b);
  }
  static std::size_t parameter_count(std::size_t h) { return 2 * h * h + h; }
};

template <class S>
Tensor<S> upsample_source(const Tensor<S>& x, const Upsampler<S>& up) {
  return add_rowvec(interleave_rows(matmul(x, up.w0), matmul(x, up.w1)), up.b);
}

}  // namespace dplx
