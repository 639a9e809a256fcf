#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A BasicTensor is a cheap handle onto a shared node. Operations on tensors
// that require gradients record their inputs and a backward rule; calling
// backward() on a scalar result sweeps the recorded graph in reverse
// topological order and accumulates gradients into every node that requires
// them. The scalar type is a template parameter so the same network code can
// run in float for training and in double inside gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "suitein/errors.hpp"

namespace suitein::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : node_(std::make_shared<Node<T>>()) { node_->data.assign(1, T(0)); }

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    if (numel_of(shape) != data.size()) {
      throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(numel_of(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false) {
    return BasicTensor(shape, std::vector<T>(numel_of(shape), T(0)), requires_grad);
  }
  static BasicTensor full(const Shape& shape, T value) {
    return BasicTensor(shape, std::vector<T>(numel_of(shape), value));
  }
  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
  }
  static BasicTensor vector(std::vector<T> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return BasicTensor(std::move(shape), std::move(values), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const T> data() const { return node_->data; }
  // Writing through this on a non-leaf invalidates recorded gradients.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }
  bool is_leaf() const { return node_->parents.empty(); }

  /// Copy of the values with no graph attachment.
  BasicTensor detach() const { return BasicTensor(shape(), node_->data); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>(shape(), std::move(out), requires_grad());
  }

  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<BasicTensor<T>>& inputs,
                           const char* op, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs && ad::grad_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<BasicTensor<T>> inputs,
                           const char* op, std::function<void(Node<T>&)> backward_fn) {
  return make_result<T>(std::move(shape), std::move(data), std::vector<BasicTensor<T>>(inputs), op,
                        std::move(backward_fn));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

}  // namespace detail

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1 || rank() != 0) {
    throw ContractError("backward() needs a scalar root, got shape " + to_string(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order; each node once.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b^T, b stored [n x k]. Transposes b first so the
// inner loop runs over contiguous memory.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// c[m x n] += a^T * b, a stored [k x m], b [k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// Matrix product of a[m x k] and b[k x n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    const T* g = self.grad.data();
    if (na.requires_grad) detail::gemm_nt(m, k, n, g, nb.data.data(), na.grad_buffer().data());
    if (nb.requires_grad) {
      T* gb = nb.grad_buffer().data();
      const T* pa = na.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = pa[i * k + p];
          T* gbrow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

/// Adds bias[n] to every length-n row of x[..., n].
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.extent(0)) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " +
                         to_string(x.shape()));
  }
  const std::size_t n = bias.extent(0);
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.values());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.data()[j];
  return detail::make_result<T>(x.shape(), std::move(out), {x, bias}, "add_bias", [rows, n](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    if (nx.requires_grad) {
      auto& gx = nx.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[r * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.data()[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, op, [deriv](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    auto& gx = nx.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(nx.data[i], self.data[i]);
  });
}

}  // namespace detail

// NaN passes through so bad inputs surface in the loss.
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v < T(0) ? T(0) : v; }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return detail::unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x.data()[i] > T(0))) {
      throw DomainError("log: non-positive input " + std::to_string(double(x.data()[i])) + " at index " +
                        std::to_string(i));
    }
  }
  return detail::unary(
      x, "log", [](T v) { return std::log(v); }, [](T in, T) { return T(1) / in; });
}

/// log(1 + x), accurate for tiny x; needs x > -1.
template <typename T>
BasicTensor<T> log1p(const BasicTensor<T>& x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x.data()[i] > T(-1))) {
      throw DomainError("log1p: input " + std::to_string(double(x.data()[i])) + " <= -1 at index " +
                        std::to_string(i));
    }
  }
  return detail::unary(
      x, "log1p", [](T v) { return std::log1p(v); }, [](T in, T) { return T(1) / (T(1) + in); });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, std::type_identity_t<T> factor) {
  return detail::unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      auto& g = parent->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    // Read both inputs before writing: a and b may be the same node.
    if (na.requires_grad) {
      std::vector<T> delta(self.grad.size());
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = self.grad[i] * nb.data[i];
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
    }
    if (nb.requires_grad) {
      std::vector<T> delta(self.grad.size());
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = self.grad[i] * na.data[i];
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result<T>(std::move(shape), x.values(), {x}, "reshape", [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// For every output flat index, the flat index of the source element.
inline std::vector<std::size_t> permutation_map(const Shape& in_shape, const std::vector<std::size_t>& axes) {
  const std::size_t rank = in_shape.size();
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    src_stride[i] = in_strides[axes[i]];
  }
  const std::size_t total = numel_of(in_shape);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

/// Reorders axes: output axis i is input axis axes[i].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> sorted(axes);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted.size() != rank || sorted[i] != i) {
      throw DimensionError("permute: invalid axis order for tensor " + to_string(x.shape()));
    }
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.extent(axes[i]);
  auto map = std::make_shared<std::vector<std::size_t>>(detail::permutation_map(x.shape(), axes));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[(*map)[i]];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "permute", [map](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

/// Contiguous range [start, start + length) along one axis.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.extent(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t extent = shape[axis];
  Shape out_shape = shape;
  out_shape[axis] = length;
  std::vector<T> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "slice",
                                [outer, inner, extent, start, length](Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < length * inner; ++i)
                                      g[(o * extent + start) * inner + i] += self.grad[o * length * inner + i];
                                });
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
BasicTensor<T> stack(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw DegenerateInputError("stack: no tensors given");
  const Shape& shape = parts.front().shape();
  for (const auto& p : parts) detail::require_same_shape(parts.front(), p, "stack");
  const std::size_t block = parts.front().numel();
  std::vector<T> out;
  out.reserve(block * parts.size());
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), shape.begin(), shape.end());
  return detail::make_result<T>(std::move(out_shape), std::move(out), parts, "stack", [block](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!self.parents[k]->requires_grad) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[k * block + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduction { kSum, kMean };

/// Reduces one axis away.
template <typename T>
BasicTensor<T> reduce(const BasicTensor<T>& x, Reduction kind, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  const auto& shape = x.shape();
  const std::size_t extent = shape[axis];
  if (extent == 0) throw DegenerateInputError("reduce: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out_shape.push_back(shape[i]);
  const T factor = kind == Reduction::kMean ? T(1) / T(extent) : T(1);
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x.data()[(o * extent + e) * inner + i];
  if (kind == Reduction::kMean)
    for (auto& v : out) v *= factor;
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x},
                                kind == Reduction::kMean ? "mean" : "sum",
                                [outer, extent, inner, factor](Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t e = 0; e < extent; ++e)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        g[(o * extent + e) * inner + i] += factor * self.grad[o * inner + i];
                                });
}

/// Sum of every element, as a scalar.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  return reduce(reshape(x, Shape{x.numel()}), Reduction::kSum, 0);
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return reduce(reshape(x, Shape{x.numel()}), Reduction::kMean, 0);
}

// ---------------------------------------------------------------------------
// Similarity

/// Norms below this are clamped so zero vectors give a defined similarity of 0.
inline constexpr double kCosineEps = 1e-8;

/// Cosine similarity along the last axis; [..., d] x [..., d] -> [...].
template <typename T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "cosine_similarity");
  if (a.rank() == 0) throw DimensionError("cosine_similarity: needs at least one axis");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  // Per row: dot, |a|, |b|.
  auto stats = std::make_shared<std::vector<T>>(rows * 3);
  std::vector<T> out(rows);
  const T eps = T(kCosineEps);
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const T av = a.data()[r * d + i], bv = b.data()[r * d + i];
      dot += av * bv;
      aa += av * av;
      bb += bv * bv;
    }
    const T na = std::sqrt(aa), nb = std::sqrt(bb);
    (*stats)[3 * r] = dot;
    (*stats)[3 * r + 1] = na;
    (*stats)[3 * r + 2] = nb;
    out[r] = dot / (std::max(na, eps) * std::max(nb, eps));
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a, b}, "cosine", [stats, d, rows, eps](Node<T>& self) {
    Node<T>& na_node = *self.parents[0];
    Node<T>& nb_node = *self.parents[1];
    std::vector<T> ga(rows * d, T(0)), gb(rows * d, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = self.grad[r];
      const T c = self.data[r];
      const T na = (*stats)[3 * r + 1], nb = (*stats)[3 * r + 2];
      const T inv = T(1) / (std::max(na, eps) * std::max(nb, eps));
      const T* av = na_node.data.data() + r * d;
      const T* bv = nb_node.data.data() + r * d;
      const T ka = na > eps ? c / (na * na) : T(0);
      const T kb = nb > eps ? c / (nb * nb) : T(0);
      for (std::size_t i = 0; i < d; ++i) {
        ga[r * d + i] = g * (bv[i] * inv - ka * av[i]);
        gb[r * d + i] = g * (av[i] * inv - kb * bv[i]);
      }
    }
    if (na_node.requires_grad) {
      auto& g = na_node.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ga[i];
    }
    if (nb_node.requires_grad) {
      auto& g = nb_node.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Temporal convolution and pooling

/// Cross-correlation along the last (temporal) axis with kernels of shape
/// [C_out x C_in x 1 x K], K odd, zero "same" padding. x is [C_in x H x W] or
/// [B x C_in x H x W]; the sensor axis H is never mixed. bias, when given, is
/// [C_out].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>* bias = nullptr) {
  const bool batched = x.rank() == 4;
  if (!(x.rank() == 3 || batched) || kernels.rank() != 4) {
    throw DimensionError("conv2d: expected input [C_in x H x W] or [B x C_in x H x W] and kernels "
                         "[C_out x C_in x 1 x K], got " +
                         to_string(x.shape()) + " and " + to_string(kernels.shape()));
  }
  const std::size_t batch = batched ? x.extent(0) : 1;
  const std::size_t cin = x.extent(batched ? 1 : 0);
  const std::size_t height = x.extent(batched ? 2 : 1);
  const std::size_t width = x.extent(batched ? 3 : 2);
  const std::size_t cout = kernels.extent(0);
  const std::size_t ksize = kernels.extent(3);
  if (kernels.extent(1) != cin) {
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels but kernels " +
                         to_string(kernels.shape()) + " expect " + std::to_string(kernels.extent(1)));
  }
  if (kernels.extent(2) != 1 || ksize % 2 == 0) {
    throw DimensionError("conv2d: kernels must be 1 along the sensor axis with odd temporal extent, got " +
                         to_string(kernels.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->extent(0) != cout)) {
    throw DimensionError("conv2d: bias " + to_string(bias->shape()) + " does not match " + std::to_string(cout) +
                         " output channels");
  }
  const std::size_t pad = ksize / 2;
  const std::size_t rows = cin * ksize, plane = height * width;

  // im2col: per batch, a [cin*K x H*W] matrix of shifted input rows.
  auto cols = std::make_shared<std::vector<T>>(batch * rows * plane, T(0));
  const T* px = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t t = 0; t < ksize; ++t) {
        T* dst = cols->data() + (b * rows + ci * ksize + t) * plane;
        const T* src = px + (b * cin + ci) * plane;
        const std::size_t lo = t < pad ? pad - t : 0;
        const std::size_t hi = t > pad ? width - std::min(width, t - pad) : width;
        for (std::size_t h = 0; h < height; ++h)
          for (std::size_t w = lo; w < hi; ++w) dst[h * width + w] = src[h * width + w + t - pad];
      }
    }
  }

  Shape out_shape = batched ? Shape{batch, cout, height, width} : Shape{cout, height, width};
  std::vector<T> out(batch * cout * plane, T(0));
  const T* pk = kernels.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* ob = out.data() + b * cout * plane;
    if (bias) {
      for (std::size_t co = 0; co < cout; ++co) std::fill_n(ob + co * plane, plane, bias->data()[co]);
    }
    detail::gemm_nn(cout, rows, plane, pk, cols->data() + b * rows * plane, ob);
  }

  std::vector<BasicTensor<T>> inputs{x, kernels};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), inputs, "conv2d",
      [=](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        Node<T>& nk = *self.parents[1];
        const T* g = self.grad.data();
        std::vector<T> gcol(nx.requires_grad ? rows * plane : 0);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* gb = g + b * cout * plane;
          const T* cb = cols->data() + b * rows * plane;
          if (nk.requires_grad) detail::gemm_nt(cout, rows, plane, gb, cb, nk.grad_buffer().data());
          if (nx.requires_grad) {
            std::fill(gcol.begin(), gcol.end(), T(0));
            detail::gemm_tn(rows, cout, plane, nk.data.data(), gb, gcol.data());
            T* gx = nx.grad_buffer().data();
            for (std::size_t ci = 0; ci < cin; ++ci) {
              T* dst = gx + (b * cin + ci) * plane;
              for (std::size_t t = 0; t < ksize; ++t) {
                const T* src = gcol.data() + (ci * ksize + t) * plane;
                const std::size_t lo = t < pad ? pad - t : 0;
                const std::size_t hi = t > pad ? width - std::min(width, t - pad) : width;
                for (std::size_t h = 0; h < height; ++h)
                  for (std::size_t w = lo; w < hi; ++w) dst[h * width + w + t - pad] += src[h * width + w];
              }
            }
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gbias = self.parents[2]->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
              const T* g_plane = g + (b * cout + co) * plane;
              T acc = T(0);
              for (std::size_t i = 0; i < plane; ++i) acc += g_plane[i];
              gbias[co] += acc;
            }
        }
      });
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>& bias) {
  return conv2d(x, kernels, &bias);
}

/// Max over non-overlapping groups of `window` along the last axis; a
/// trailing remainder is dropped. Ties route the gradient to the earliest
/// element.
template <typename T>
BasicTensor<T> maxpool_temporal(const BasicTensor<T>& x, std::size_t window = 2) {
  if (x.rank() == 0 || window == 0 || x.shape().back() < window) {
    throw DegenerateInputError("maxpool_temporal: temporal extent of " + to_string(x.shape()) +
                               " is shorter than the pooling window " + std::to_string(window));
  }
  const std::size_t width = x.shape().back();
  const std::size_t out_w = width / window;
  const std::size_t rows = x.numel() / width;
  Shape out_shape = x.shape();
  out_shape.back() = out_w;
  auto argmax = std::make_shared<std::vector<std::size_t>>(rows * out_w);
  std::vector<T> out(rows * out_w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_w; ++o) {
      std::size_t best = r * width + o * window;
      for (std::size_t k = 1; k < window; ++k) {
        const std::size_t idx = r * width + o * window + k;
        if (x.data()[idx] > x.data()[best] || std::isnan(x.data()[idx])) best = idx;
      }
      (*argmax)[r * out_w + o] = best;
      out[r * out_w + o] = x.data()[best];
    }
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "maxpool", [argmax](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

}  // namespace suitein::ad
