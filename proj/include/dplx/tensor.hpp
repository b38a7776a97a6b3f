#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dplx {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// One recorded primitive application. `seq` orders records by creation, so
/// replaying adjoints in descending `seq` visits them in reverse recording order.
template <class S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  using Scalar = S;
  using NodePtr = std::shared_ptr<Node<S>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<S> data, bool requires_grad = false) : node_(std::make_shared<Node<S>>()) {
    if (numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::sequence_counter().fetch_add(1);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
  }
  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, value), requires_grad);
  }
  static Tensor scalar(S value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }
  bool is_scalar() const { return size() == 1; }

  std::vector<S>& data() { return node_->data; }
  const std::vector<S>& data() const { return node_->data; }
  S item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  S operator[](std::size_t i) const { return node_->data[i]; }
  S at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const { return node_->grad; }
  std::vector<S>& grad_mut() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Rows/cols for 2-D tensors; a 1-D tensor is one row.
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  Tensor detach() const { return Tensor(shape(), data(), false); }
  Tensor clone() const { return Tensor(shape(), data(), requires_grad()); }

  const NodePtr& node() const { return node_; }

  /// Builds the output of a primitive. Records the adjoint only if grad mode is
  /// on and some input requires grad.
  static Tensor make_result(Shape shape, std::vector<S> data, std::vector<Tensor> inputs,
                            std::function<void(Node<S>&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    if (!grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& t : inputs) out.node_->parents.push_back(t.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  NodePtr node_;
};

/// Populates grad on every requires_grad ancestor of `loss`. Leaf grads
/// accumulate across calls; interior adjoints are recomputed each call.
template <class S>
void backward(const Tensor<S>& loss) {
  if (!loss.is_scalar()) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](const Node<S>* a, const Node<S>* b) { return a->seq > b->seq; });

  for (auto* n : order)
    if (n->backward) n->grad.assign(n->data.size(), S(0));
  Node<S>* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += S(1);

  for (auto* n : order) {
    if (!n->backward) continue;
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward(*n);
  }
}

}  // namespace dplx
