#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <random>
#include <span>

#include "dplx/tensor.hpp"

namespace dplx {

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

template <class S>
CMapMat<S> cmat(const std::vector<S>& v, std::size_t r, std::size_t c) {
  return CMapMat<S>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class S>
MapMat<S> mmat(std::vector<S>& v, std::size_t r, std::size_t c) {
  return MapMat<S>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class S>
void require_same(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
void require_2d(const Tensor<S>& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

template <class S>
S sigmoid(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a, b, "add");
  std::vector<S> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
    for (auto& p : n.parents)
      if (p->requires_grad)
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a, b, "sub");
  std::vector<S> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a, b, "mul");
  std::vector<S> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  std::vector<S> out(a.data());
  for (auto& v : out) v *= s;
  return Tensor<S>::make_result(a.shape(), std::move(out), {a}, [s](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += s * n.grad[i];
  });
}

/// x[m×n] + b[n], broadcast over rows.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  const std::size_t n = x.cols();
  if (b.size() != n)
    throw DimensionError("add_rowvec: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<S> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  return Tensor<S>::make_result(x.shape(), std::move(out), {x, b}, [n](Node<S>& node) {
    auto& px = node.parents[0];
    auto& pb = node.parents[1];
    if (px->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) px->grad[i] += node.grad[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) pb->grad[i % n] += node.grad[i];
  });
}

/// x[m×n] ⊙ g[n], broadcast over rows.
template <class S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& g) {
  const std::size_t n = x.cols();
  if (g.size() != n)
    throw DimensionError("mul_rowvec: gain " + shape_str(g.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<S> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= g[i % n];
  return Tensor<S>::make_result(x.shape(), std::move(out), {x, g}, [n](Node<S>& node) {
    auto& px = node.parents[0];
    auto& pg = node.parents[1];
    if (px->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) px->grad[i] += node.grad[i] * pg->data[i % n];
    if (pg->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) pg->grad[i % n] += node.grad[i] * px->data[i];
  });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(x[i]);
  return Tensor<S>::make_result(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * n.data[i] * (S(1) - n.data[i]);
  });
}

/// x·σ(x). Also used as Swish.
template <class S>
Tensor<S> silu(const Tensor<S>& x) {
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * detail::sigmoid(x[i]);
  return Tensor<S>::make_result(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S s = detail::sigmoid(p->data[i]);
      p->grad[i] += n.grad[i] * (s + p->data[i] * s * (S(1) - s));
    }
  });
}

/// First half of the last axis gated by the sigmoid of the second half.
template <class S>
Tensor<S> glu(const Tensor<S>& x) {
  const std::size_t w = x.cols();
  if (w % 2 != 0) throw DimensionError("glu: last extent must be even, got " + shape_str(x.shape()));
  const std::size_t c = w / 2, r = x.size() / w;
  Shape shape = x.shape();
  shape.back() = c;
  std::vector<S> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * w + j] * detail::sigmoid(x[i * w + c + j]);
  return Tensor<S>::make_result(std::move(shape), std::move(out), {x}, [r, c, w](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const S a = p->data[i * w + j];
        const S s = detail::sigmoid(p->data[i * w + c + j]);
        const S g = n.grad[i * c + j];
        p->grad[i * w + j] += g * s;
        p->grad[i * w + c + j] += g * a * s * (S(1) - s);
      }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  std::vector<S> out(m * n);
  detail::mmat(out, m, n).noalias() = detail::cmat(a.data(), m, k) * detail::cmat(b.data(), k, n);
  return Tensor<S>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& node) {
    auto& pa = node.parents[0];
    auto& pb = node.parents[1];
    auto g = detail::cmat(node.grad, m, n);
    if (pa->requires_grad) detail::mmat(pa->grad, m, k).noalias() += g * detail::cmat(pb->data, k, n).transpose();
    if (pb->requires_grad) detail::mmat(pb->grad, k, n).noalias() += detail::cmat(pa->data, m, k).transpose() * g;
  });
}

/// a[m×k] · b[n×k]ᵀ.
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()) + "ᵀ");
  std::vector<S> out(m * n);
  detail::mmat(out, m, n).noalias() = detail::cmat(a.data(), m, k) * detail::cmat(b.data(), n, k).transpose();
  return Tensor<S>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& node) {
    auto& pa = node.parents[0];
    auto& pb = node.parents[1];
    auto g = detail::cmat(node.grad, m, n);
    if (pa->requires_grad) detail::mmat(pa->grad, m, k).noalias() += g * detail::cmat(pb->data, n, k);
    if (pb->requires_grad) detail::mmat(pb->grad, n, k).noalias() += g.transpose() * detail::cmat(pa->data, m, k);
  });
}

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// normalization

/// Per-row normalization over the last axis, then affine.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-5)) {
  const std::size_t h = x.cols();
  if (h == 0) throw DimensionError("layer_norm: empty normalization axis");
  if (gain.size() != h || bias.size() != h)
    throw DimensionError("layer_norm: affine " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t r = x.size() / h;
  std::vector<S> out(x.size()), xhat(x.size()), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = x.data().data() + i * h;
    S mean = 0;
    for (std::size_t j = 0; j < h; ++j) mean += row[j];
    mean /= S(h);
    S var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(h);
    inv_std[i] = S(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      xhat[i * h + j] = (row[j] - mean) * inv_std[i];
      out[i * h + j] = xhat[i * h + j] * gain[j] + bias[j];
    }
  }
  return Tensor<S>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [r, h, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        for (std::size_t i = 0; i < r; ++i) {
          const S* g = n.grad.data() + i * h;
          const S* xh = xhat.data() + i * h;
          if (pg->requires_grad)
            for (std::size_t j = 0; j < h; ++j) pg->grad[j] += g[j] * xh[j];
          if (pb->requires_grad)
            for (std::size_t j = 0; j < h; ++j) pb->grad[j] += g[j];
          if (px->requires_grad) {
            S sum_d = 0, sum_dx = 0;
            for (std::size_t j = 0; j < h; ++j) {
              const S d = g[j] * pg->data[j];
              sum_d += d;
              sum_dx += d * xh[j];
            }
            for (std::size_t j = 0; j < h; ++j) {
              const S d = g[j] * pg->data[j];
              px->grad[i * h + j] += inv_std[i] * (d - sum_d / S(h) - xh[j] * sum_dx / S(h));
            }
          }
        }
      });
}

/// Running statistics for batch normalization over the time axis.
template <class S>
struct BatchNormStats {
  std::vector<S> mean;
  std::vector<S> var;
  S momentum = S(0.1);

  explicit BatchNormStats(std::size_t channels = 0) : mean(channels, S(0)), var(channels, S(1)) {}
};

/// Training mode normalizes with the statistics of the rows of `x` and folds
/// them into `stats`; eval mode uses the stored statistics.
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, BatchNormStats<S>& stats,
                     bool training, S eps = S(1e-5)) {
  detail::require_2d(x, "batch_norm");
  const std::size_t t = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c || stats.mean.size() != c)
    throw DimensionError("batch_norm: channel count mismatch for input " + shape_str(x.shape()));
  std::vector<S> mean(c, S(0)), inv_std(c);
  if (training) {
    std::vector<S> var(c, S(0));
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += x[i * c + j];
    for (auto& m : mean) m /= S(t);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) var[j] += (x[i * c + j] - mean[j]) * (x[i * c + j] - mean[j]);
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= S(t);
      inv_std[j] = S(1) / std::sqrt(var[j] + eps);
      const S unbiased = t > 1 ? var[j] * S(t) / S(t - 1) : var[j];
      stats.mean[j] = (S(1) - stats.momentum) * stats.mean[j] + stats.momentum * mean[j];
      stats.var[j] = (S(1) - stats.momentum) * stats.var[j] + stats.momentum * unbiased;
    }
  } else {
    mean = stats.mean;
    for (std::size_t j = 0; j < c; ++j) inv_std[j] = S(1) / std::sqrt(stats.var[j] + eps);
  }
  std::vector<S> xhat(x.size()), out(x.size());
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x[i * c + j] - mean[j]) * inv_std[j];
      out[i * c + j] = xhat[i * c + j] * gamma[j] + beta[j];
    }
  return Tensor<S>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [t, c, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        std::vector<S> sum_d(c, S(0)), sum_dx(c, S(0));
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const S g = n.grad[i * c + j];
            if (pg->requires_grad) pg->grad[j] += g * xhat[i * c + j];
            if (pb->requires_grad) pb->grad[j] += g;
            const S d = g * pg->data[j];
            sum_d[j] += d;
            sum_dx[j] += d * xhat[i * c + j];
          }
        if (!px->requires_grad) return;
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const S d = n.grad[i * c + j] * pg->data[j];
            px->grad[i * c + j] += training
                                       ? inv_std[j] * (d - sum_d[j] / S(t) - xhat[i * c + j] * sum_dx[j] / S(t))
                                       : inv_std[j] * d;
          }
      });
}

// ---------------------------------------------------------------------------
// convolution

/// Per-channel 1-D convolution over time with zero "same" padding.
/// x: [time×h], kernel: [h×k] with k odd.
/// Row ranges [begin, end) of consecutive segments; an empty list means one
/// segment covering all `rows`.
inline std::vector<std::pair<std::size_t, std::size_t>> segment_ranges(std::span<const std::size_t> lengths,
                                                                       std::size_t rows) {
  if (lengths.empty()) return {{0, rows}};
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t at = 0;
  for (auto n : lengths) {
    if (n == 0) throw DimensionError("segment lengths must be positive");
    out.emplace_back(at, at + n);
    at += n;
  }
  if (at != rows)
    throw DimensionError("segment lengths sum to " + std::to_string(at) + " but the tensor has " + std::to_string(rows) +
                         " rows");
  return out;
}

/// Same-length depthwise convolution, x: [time×h], kernel: [h×k]. Zero padding
/// applies at every segment boundary, so packed sequences never mix.
template <class S>
Tensor<S> conv1d_depthwise(const Tensor<S>& x, const Tensor<S>& kernel, std::span<const std::size_t> segments = {}) {
  detail::require_2d(x, "conv1d_depthwise");
  detail::require_2d(kernel, "conv1d_depthwise");
  const std::size_t t = x.dim(0), h = x.dim(1), k = kernel.dim(1);
  if (k % 2 == 0) throw ConfigError("conv1d_depthwise: kernel width must be odd, got " + std::to_string(k));
  if (kernel.dim(0) != h)
    throw DimensionError("conv1d_depthwise: kernel " + shape_str(kernel.shape()) + " vs input " + shape_str(x.shape()));
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<std::ptrdiff_t> lo(t), hi(t);
  for (auto [b, e] : segment_ranges(segments, t))
    for (std::size_t i = b; i < e; ++i) {
      lo[i] = static_cast<std::ptrdiff_t>(b);
      hi[i] = static_cast<std::ptrdiff_t>(e);
    }
  const auto T = static_cast<std::ptrdiff_t>(t);
  std::vector<S> out(t * h, S(0));
  for (std::ptrdiff_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = i + static_cast<std::ptrdiff_t>(j) - half;
      if (src < lo[i] || src >= hi[i]) continue;
      for (std::size_t c = 0; c < h; ++c) out[i * h + c] += kernel[c * k + j] * x[src * h + c];
    }
  return Tensor<S>::make_result({t, h}, std::move(out), {x, kernel},
                                [T, h, k, half, lo = std::move(lo), hi = std::move(hi)](Node<S>& n) {
    auto& px = n.parents[0];
    auto& pk = n.parents[1];
    for (std::ptrdiff_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = i + static_cast<std::ptrdiff_t>(j) - half;
        if (src < lo[i] || src >= hi[i]) continue;
        for (std::size_t c = 0; c < h; ++c) {
          const S g = n.grad[i * h + c];
          if (px->requires_grad) px->grad[src * h + c] += g * pk->data[c * k + j];
          if (pk->requires_grad) pk->grad[c * k + j] += g * px->data[src * h + c];
        }
      }
  });
}

/// Per-timestep linear map, x: [time×h], w: [h×h'].
template <class S>
Tensor<S> conv1d_pointwise(const Tensor<S>& x, const Tensor<S>& w) {
  return matmul(x, w);
}

// ---------------------------------------------------------------------------
// stochastic

/// Inverted dropout. Eval mode (or p == 0) returns the input tensor itself.
template <class S, class Rng>
Tensor<S> dropout(const Tensor<S>& x, S p, bool training, Rng& rng) {
  if (!(p >= S(0) && p < S(1))) throw ConfigError("dropout: probability must lie in [0, 1)");
  if (!training || p == S(0)) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const S inv = S(1) / (S(1) - p);
  std::vector<S> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? inv : S(0);
  std::vector<S> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tensor<S>::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// softmax family

/// Row-wise softmax. Entries with key_valid[j] == false are excluded; a row with
/// no valid entries yields zeros.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x, std::span<const bool> key_valid = {}) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (!key_valid.empty() && key_valid.size() != c)
    throw DimensionError("softmax_rows: mask length " + std::to_string(key_valid.size()) + " vs " + shape_str(x.shape()));
  std::vector<S> out(x.size(), S(0));
  for (std::size_t i = 0; i < r; ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (key_valid.empty() || key_valid[j]) mx = std::max(mx, x[i * c + j]);
    if (mx == -std::numeric_limits<S>::infinity()) continue;
    S z = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (key_valid.empty() || key_valid[j]) z += (out[i * c + j] = std::exp(x[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return Tensor<S>::make_result({r, c}, std::move(out), {x}, [r, c](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < r; ++i) {
      S dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += n.data[i * c + j] * (n.grad[i * c + j] - dot);
    }
  });
}

template <class S>
Tensor<S> log_softmax_rows(const Tensor<S>& x) {
  detail::require_2d(x, "log_softmax_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    S mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    S z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] - mx);
    const S lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] - lz;
  }
  return Tensor<S>::make_result({r, c}, std::move(out), {x}, [r, c](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < r; ++i) {
      S gs = 0;
      for (std::size_t j = 0; j < c; ++j) gs += n.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += n.grad[i * c + j] - std::exp(n.data[i * c + j]) * gs;
    }
  });
}

// ---------------------------------------------------------------------------
// shape manipulation

template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t c0, std::size_t c1) {
  detail::require_2d(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1), w = c1 - c0;
  if (c0 >= c1 || c1 > c) throw DimensionError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  std::vector<S> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(i * c + c0), w, out.begin() + static_cast<std::ptrdiff_t>(i * w));
  return Tensor<S>::make_result({r, w}, std::move(out), {x}, [r, c, w, c0](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) p->grad[i * c + c0 + j] += n.grad[i * w + j];
  });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> offs;
  for (auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.dim(0) != r) throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    offs.push_back(total);
    total += p.dim(1);
  }
  std::vector<S> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].dim(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(parts[k].data().begin() + static_cast<std::ptrdiff_t>(i * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + offs[k]));
  }
  return Tensor<S>::make_result({r, total}, std::move(out), parts, [r, total, offs](Node<S>& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = n.parents[k];
      if (!p->requires_grad) continue;
      const std::size_t w = p->shape[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += n.grad[i * total + offs[k] + j];
    }
  });
}

/// Rows [r0, r1) and columns [c0, c1) of a matrix.
template <class S>
Tensor<S> slice_block(const Tensor<S>& x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  detail::require_2d(x, "slice_block");
  const std::size_t c = x.dim(1), h = r1 - r0, w = c1 - c0;
  if (r0 >= r1 || r1 > x.dim(0) || c0 >= c1 || c1 > c)
    throw DimensionError("slice: range out of bounds for " + shape_str(x.shape()));
  std::vector<S> out(h * w);
  for (std::size_t i = 0; i < h; ++i)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((r0 + i) * c + c0), w,
                out.begin() + static_cast<std::ptrdiff_t>(i * w));
  return Tensor<S>::make_result({h, w}, std::move(out), {x}, [h, w, c, r0, c0](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) p->grad[(r0 + i) * c + c0 + j] += n.grad[i * w + j];
  });
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, std::size_t r0, std::size_t r1) {
  detail::require_2d(x, "slice_rows");
  if (r0 == 0 && r1 == x.dim(0)) return x;
  return slice_block(x, r0, r1, 0, x.dim(1));
}

/// Stacks matrices of equal width along the time axis.
template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  if (parts.size() == 1) return parts[0];
  const std::size_t w = parts[0].cols();
  std::size_t rows = 0;
  for (auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.dim(1) != w) throw DimensionError("concat_rows: width mismatch " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<S> out;
  out.reserve(rows * w);
  for (auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<S>::make_result({rows, w}, std::move(out), parts, [](Node<S>& n) {
    std::size_t at = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += n.grad[at + i];
      at += p->data.size();
    }
  });
}

template <class S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  return concat_cols(std::vector<Tensor<S>>{a, b});
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x) {
  detail::require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor<S>::make_result({c, r}, std::move(out), {x}, [r, c](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += n.grad[j * r + i];
  });
}

/// Rows of `table` selected by `ids`.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const int> ids) {
  detail::require_2d(table, "gather_rows");
  const std::size_t v = table.dim(0), h = table.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<S> out(ids.size() * h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw DataError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) + " rows");
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * h), h,
                out.begin() + static_cast<std::ptrdiff_t>(i * h));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return Tensor<S>::make_result({ids.size(), h}, std::move(out), {table}, [h, idx = std::move(idx)](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < h; ++j) p->grad[static_cast<std::size_t>(idx[i]) * h + j] += n.grad[i * h + j];
  });
}

/// Interleaves rows: out[2i] = a[i], out[2i+1] = b[i].
template <class S>
Tensor<S> interleave_rows(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a, b, "interleave_rows");
  detail::require_2d(a, "interleave_rows");
  const std::size_t t = a.dim(0), h = a.dim(1);
  std::vector<S> out(2 * t * h);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < h; ++j) {
      out[(2 * i) * h + j] = a[i * h + j];
      out[(2 * i + 1) * h + j] = b[i * h + j];
    }
  return Tensor<S>::make_result({2 * t, h}, std::move(out), {a, b}, [t, h](Node<S>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < h; ++j) {
        if (pa->requires_grad) pa->grad[i * h + j] += n.grad[(2 * i) * h + j];
        if (pb->requires_grad) pb->grad[i * h + j] += n.grad[(2 * i + 1) * h + j];
      }
  });
}

/// Relative-position bias matrix out[i][j] = table[row][clip(j - i) + max_dist - 1],
/// with offsets clipped to [-(max_dist-1), max_dist-1].
template <class S>
Tensor<S> relative_bias(const Tensor<S>& table, std::size_t row, std::size_t tq, std::size_t tk, std::size_t max_dist) {
  detail::require_2d(table, "relative_bias");
  const std::size_t width = table.dim(1);
  if (width != 2 * max_dist - 1 || row >= table.dim(0))
    throw DimensionError("relative_bias: table " + shape_str(table.shape()) + " does not cover max distance " +
                         std::to_string(max_dist));
  const auto lim = static_cast<std::ptrdiff_t>(max_dist) - 1;
  std::vector<std::size_t> idx(tq * tk);
  std::vector<S> out(tq * tk);
  for (std::size_t i = 0; i < tq; ++i)
    for (std::size_t j = 0; j < tk; ++j) {
      auto off = std::clamp(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i), -lim, lim);
      idx[i * tk + j] = row * width + static_cast<std::size_t>(off + lim);
      out[i * tk + j] = table[idx[i * tk + j]];
    }
  return Tensor<S>::make_result({tq, tk}, std::move(out), {table}, [idx = std::move(idx)](Node<S>& n) {
    auto& p = n.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) p->grad[idx[i]] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S s = 0;
  for (auto v : x.data()) s += v;
  return Tensor<S>::make_result({1}, {s}, {x}, [](Node<S>& n) {
    auto& p = n.parents[0];
    for (auto& g : p->grad) g += n.grad[0];
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / S(x.size()));
}

/// Weighted sum of scalar tensors.
template <class S>
Tensor<S> weighted_sum(const std::vector<Tensor<S>>& terms, const std::vector<S>& weights) {
  if (terms.size() != weights.size() || terms.empty())
    throw DimensionError("weighted_sum: term/weight count mismatch");
  S s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (!terms[i].is_scalar()) throw DimensionError("weighted_sum: terms must be scalars");
    s += weights[i] * terms[i].item();
  }
  return Tensor<S>::make_result({1}, {s}, terms, [weights](Node<S>& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i)
      if (n.parents[i]->requires_grad) n.parents[i]->grad[0] += weights[i] * n.grad[0];
  });
}

/// Mean squared element difference.
template <class S>
Tensor<S> mse(const Tensor<S>& pred, const Tensor<S>& ref) {
  detail::require_same(pred, ref, "mse");
  const std::size_t n = pred.size();
  S s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (pred[i] - ref[i]) * (pred[i] - ref[i]);
  return Tensor<S>::make_result({1}, {s / S(n)}, {pred, ref}, [n](Node<S>& node) {
    auto& pp = node.parents[0];
    auto& pr = node.parents[1];
    const S g = node.grad[0] * S(2) / S(n);
    for (std::size_t i = 0; i < n; ++i) {
      const S d = g * (pp->data[i] - pr->data[i]);
      if (pp->requires_grad) pp->grad[i] += d;
      if (pr->requires_grad) pr->grad[i] -= d;
    }
  });
}

/// Cosine similarity of the flattened tensors; 0 when either has zero norm.
template <class S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a, b, "cosine_similarity");
  S dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const bool degenerate = na == S(0) || nb == S(0);
  const S cos = degenerate ? S(0) : dot / (na * nb);
  return Tensor<S>::make_result({1}, {cos}, {a, b}, [degenerate, dot, na, nb, cos](Node<S>& n) {
    if (degenerate) return;
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    const S g = n.grad[0];
    for (std::size_t i = 0; i < pa->data.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += g * (pb->data[i] / (na * nb) - cos * pa->data[i] / (na * na));
      if (pb->requires_grad) pb->grad[i] += g * (pa->data[i] / (na * nb) - cos * pb->data[i] / (nb * nb));
    }
    (void)dot;
  });
}

}  // namespace dplx
