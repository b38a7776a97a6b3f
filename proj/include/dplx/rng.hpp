#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "dplx/tensor.hpp"

namespace dplx {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

/// A master seed fanned out into independent named generators. Each stream's
/// initial state depends only on (master seed, name).
class RngStreams {
 public:
  explicit RngStreams(std::uint64_t master = 0) : master_(master) {}

  std::uint64_t master() const { return master_; }

  Rng& operator[](const std::string& name) {
    auto it = streams_.find(name);
    if (it == streams_.end()) it = streams_.emplace(name, Rng(derive_seed(master_, name))).first;
    return it->second;
  }

  static std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
    return splitmix64(master ^ fnv1a(name));
  }

  std::map<std::string, std::string> save() const {
    std::map<std::string, std::string> out;
    for (auto& [k, g] : streams_) {
      std::ostringstream os;
      os << g;
      out[k] = os.str();
    }
    return out;
  }

  void restore(const std::map<std::string, std::string>& states) {
    streams_.clear();
    for (auto& [k, s] : states) {
      Rng g;
      std::istringstream is(s);
      is >> g;
      if (!is) throw DataError("corrupt RNG state for stream '" + k + "'");
      streams_.emplace(k, g);
    }
  }

 private:
  std::uint64_t master_;
  std::map<std::string, Rng> streams_;
};

/// Fills a tensor of the given shape with standard normal draws.
template <class S>
Tensor<S> randn(const Shape& shape, Rng& rng, S stddev = S(1), bool requires_grad = false) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<S> v(numel(shape));
  for (auto& x : v) x = static_cast<S>(nd(rng)) * stddev;
  return Tensor<S>(shape, std::move(v), requires_grad);
}

template <class S>
Tensor<S> rand_uniform(const Shape& shape, Rng& rng, S lo, S hi, bool requires_grad = false) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<S> v(numel(shape));
  for (auto& x : v) x = static_cast<S>(ud(rng));
  return Tensor<S>(shape, std::move(v), requires_grad);
}

}  // namespace dplx
