#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Var is a shared handle to a node of the computation graph. Every op builds
// a new node holding its forward value, its parents and a closure that pushes
// the node's gradient into those parents. backward() sweeps the graph in
// reverse topological order. Leaf gradients accumulate across calls; interior
// gradients are rebuilt on every sweep.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fkaconv/error.hpp"
#include "fkaconv/tensor.hpp"

namespace fkac::ad {

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::string op;
  std::vector<NodePtr<T>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = next_node_id();

  bool is_leaf() const noexcept { return parents.empty(); }

  Tensor<T>& ensure_grad() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  const Tensor<T>& grad() const {
    if (!node_->has_grad) throw GradientError("gradient not populated for node '" + node_->op + "'");
    return node_->grad;
  }
  void zero_grad() {
    if (node_->has_grad) node_->grad.fill(T(0));
  }
  T item() const { return node_->value.item(); }
  const std::string& op() const { return node_->op; }
  std::uint64_t id() const { return node_->id; }
  const NodePtr<T>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr<T> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = "constant";
  return Var<T>(std::move(n));
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = "parameter";
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

/// Builds an interior node. When no parent needs a gradient the node is cut
/// from the graph so constant subexpressions do not keep their inputs alive.
template <class T>
Var<T> make_node(Tensor<T> value, std::string op, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.rank(), b.rank());
  std::vector<std::size_t> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.rank() ? 1 : a[i - (r - a.rank())];
    const std::size_t db = i < r - b.rank() ? 1 : b[i - (r - b.rank())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("shapes " + a.str() + " and " + b.str() + " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return Shape(std::move(out));
}

// Flat index into `in` for every flat index of `out`, where `in` broadcasts to `out`.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t r = out.rank();
  const std::size_t pad = r - in.rank();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > pad;) {
    const std::size_t d = in[i - pad];
    in_stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  std::vector<std::size_t> map(out.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      off += in_stride[i];
      if (idx[i] < out[i]) break;
      off -= in_stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return map;
}

template <class T>
void accumulate(Node<T>& parent, std::span<const T> g) {
  if (!parent.requires_grad) return;
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  std::vector<std::size_t> d;
  for (std::size_t i = 0; i < s.rank(); ++i)
    if (i != axis) d.push_back(s[i]);
  if (d.empty()) d.push_back(1);
  return Shape(std::move(d));
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) a.inner *= s[i];
  return a;
}

enum class Binary { kAdd, kSub, kMul };

template <class T>
Var<T> binary(const Var<T>& a, const Var<T>& b, Binary kind) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const bool same_a = a.shape() == out_shape;
  const bool same_b = b.shape() == out_shape;
  auto ma = std::make_shared<std::vector<std::size_t>>(same_a ? std::vector<std::size_t>{}
                                                                : broadcast_map(out_shape, a.shape()));
  auto mb = std::make_shared<std::vector<std::size_t>>(same_b ? std::vector<std::size_t>{}
                                                                : broadcast_map(out_shape, b.shape()));
  const auto ia = [ma, same_a](std::size_t i) { return same_a ? i : (*ma)[i]; };
  const auto ib = [mb, same_b](std::size_t i) { return same_b ? i : (*mb)[i]; };

  Tensor<T> out(out_shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T x = av[ia(i)], y = bv[ib(i)];
    out[i] = kind == Binary::kAdd ? x + y : kind == Binary::kSub ? x - y : x * y;
  }
  const char* tag = kind == Binary::kAdd ? "add" : kind == Binary::kSub ? "sub" : "mul";
  return make_node<T>(std::move(out), tag, {a, b}, [ia, ib, kind](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[ia(i)] += kind == Binary::kMul ? g[i] * pb.value[ib(i)] : g[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i)
        gb[ib(i)] += kind == Binary::kAdd   ? g[i]
                     : kind == Binary::kSub ? -g[i]
                                            : g[i] * pa.value[ia(i)];
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

/// Operands broadcast numpy-style (right-aligned, extent 1 stretches).
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::Binary::kAdd);
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::Binary::kSub);
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::Binary::kMul);
}
template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= c;
  return make_node<T>(std::move(out), "scale", {x}, [c](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += c * self.grad[i];
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_node<T>(std::move(out), "relu", {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = detail::sigmoid_scalar(v);
  return make_node<T>(std::move(out), "sigmoid", {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

/// Euclidean norm over the trailing axis. The gradient at a zero vector is 0.
template <class T>
Var<T> norm_last(const Var<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  Tensor<T> out(detail::drop_axis(x.shape(), x.shape().rank() - 1));
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv[r * c + j] * xv[r * c + j];
    out[r] = std::sqrt(s);
  }
  return make_node<T>(std::move(out), "norm", {x}, [c, rows](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T n = self.value[r];
      if (n == T(0)) continue;
      const T k = self.grad[r] / n;
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += k * p.value[r * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

// c[m×n] += a[m×k] · b[k×n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m×k] += a[m×n] · b[k×n]ᵀ
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T* ai = a + i * n;
      const T* bp = b + p * n;
      // eight independent partial sums so the loop vectorizes
      T acc[8] = {};
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += ai[j + l] * bp[j + l];
      T s = 0;
      for (; j < n; ++j) s += ai[j] * bp[j];
      for (T v : acc) s += v;
      c[i * k + p] += s;
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: cannot multiply " + a.shape().str() + " by " + b.shape().str());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out(Shape{m, n});
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_node<T>(std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(pa.value.data(), self.grad.data(), pb.ensure_grad().data(), m, k, n);
  });
}

/// Batched product of [B×m×k] and [B×k×n].
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.rank() != 3 || sb.rank() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw DimensionError("bmm: cannot multiply " + sa.str() + " by " + sb.str());
  const std::size_t B = sa[0], m = sa[1], k = sa[2], n = sb[2];
  Tensor<T> out(Shape{B, m, n});
  for (std::size_t s = 0; s < B; ++s)
    detail::gemm_nn(a.value().data() + s * m * k, b.value().data() + s * k * n, out.data() + s * m * n, m, k, n);
  return make_node<T>(std::move(out), "bmm", {a, b}, [B, m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    for (std::size_t s = 0; s < B; ++s) {
      const T* g = self.grad.data() + s * m * n;
      if (ga) detail::gemm_nt(g, pb.value.data() + s * k * n, ga + s * m * k, m, n, k);
      if (gb) detail::gemm_tn(pa.value.data() + s * m * k, g, gb + s * k * n, m, k, n);
    }
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <class T>
Var<T> transpose_last2(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.rank() < 2 || s.rank() > 3) throw DimensionError("transpose_last2 needs rank 2 or 3, got " + s.str());
  const std::size_t B = s.rank() == 3 ? s[0] : 1;
  const std::size_t r = s[s.rank() - 2], c = s[s.rank() - 1];
  Shape os = s.rank() == 3 ? Shape{B, c, r} : Shape{c, r};
  Tensor<T> out(os);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x.value()[b * r * c + i * c + j];
  return make_node<T>(std::move(out), "transpose", {x}, [B, r, c](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
  });
}

/// x·W + b over the trailing axis of x.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& W, const Var<T>& b) {
  const auto& xs = x.shape();
  if (W.shape().rank() != 2 || xs.back() != W.shape()[0])
    throw DimensionError("linear: input " + xs.str() + " incompatible with weight " + W.shape().str());
  const std::size_t fin = W.shape()[0], fout = W.shape()[1];
  if (b.numel() != fout) throw DimensionError("linear: bias " + b.shape().str() + " does not match " + W.shape().str());
  const std::size_t rows = x.numel() / fin;
  auto dims = xs.dims();
  dims.back() = fout;
  Tensor<T> out{Shape(dims)};
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(b.value().data(), b.value().data() + fout, out.data() + r * fout);
  detail::gemm_nn(x.value().data(), W.value().data(), out.data(), rows, fin, fout);
  return make_node<T>(std::move(out), "linear", {x, W, b}, [rows, fin, fout](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const T* g = self.grad.data();
    if (px.requires_grad) detail::gemm_nt(g, pw.value.data(), px.ensure_grad().data(), rows, fout, fin);
    if (pw.requires_grad) detail::gemm_tn(px.value.data(), g, pw.ensure_grad().data(), rows, fin, fout);
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < fout; ++j) gb[j] += g[r * fout + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape.numel() != x.numel())
    throw DimensionError("reshape: " + x.shape().str() + " to " + shape.str() + " changes element count");
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_node<T>(std::move(out), "reshape", {x}, [](Node<T>& self) {
    detail::accumulate<T>(*self.parents[0], self.grad.values());
  });
}

template <class T>
Var<T> broadcast_to(const Var<T>& x, Shape shape) {
  if (detail::broadcast_shape(x.shape(), shape) != shape)
    throw DimensionError("broadcast_to: " + x.shape().str() + " cannot expand to " + shape.str());
  auto map = std::make_shared<std::vector<std::size_t>>(detail::broadcast_map(shape, x.shape()));
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[(*map)[i]];
  return make_node<T>(std::move(out), "broadcast", {x}, [map](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const auto& s0 = xs[0].shape();
  if (axis >= s0.rank()) throw DimensionError("concat: axis out of range for " + s0.str());
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    bool ok = s.rank() == s0.rank();
    for (std::size_t i = 0; ok && i < s.rank(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: shape " + s.str() + " incompatible with " + s0.str());
    extents.push_back(s[axis]);
    total += s[axis];
  }
  auto dims = s0.dims();
  dims[axis] = total;
  const auto split = detail::split_at(s0, axis);
  Tensor<T> out{Shape(dims)};
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::size_t off = o * total * split.inner;
    for (std::size_t p = 0; p < xs.size(); ++p) {
      const std::size_t len = extents[p] * split.inner;
      std::copy_n(xs[p].value().data() + o * len, len, out.data() + off);
      off += len;
    }
  }
  return make_node<T>(std::move(out), "concat", std::vector<Var<T>>(xs),
                      [extents, total, split](Node<T>& self) {
                        for (std::size_t o = 0; o < split.outer; ++o) {
                          std::size_t off = o * total * split.inner;
                          for (std::size_t p = 0; p < extents.size(); ++p) {
                            const std::size_t len = extents[p] * split.inner;
                            auto& parent = *self.parents[p];
                            if (parent.requires_grad) {
                              auto& g = parent.ensure_grad();
                              for (std::size_t i = 0; i < len; ++i) g[o * len + i] += self.grad[off + i];
                            }
                            off += len;
                          }
                        }
                      });
}

/// Row gather from a [N×F] tensor. Repeated indices accumulate gradient.
template <class T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> rows) {
  if (x.shape().rank() != 2) throw DimensionError("gather_rows needs a rank-2 input, got " + x.shape().str());
  const std::size_t n = x.shape()[0], f = x.shape()[1];
  for (auto r : rows)
    if (r >= n) throw DimensionError("gather_rows: index " + std::to_string(r) + " out of range " + x.shape().str());
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor<T> out(Shape{rows.size(), f});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.value().data() + rows[i] * f, f, out.data() + i * f);
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return make_node<T>(std::move(out), "gather", {x}, [idx, f](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < f; ++j) g[(*idx)[i] * f + j] += self.grad[i * f + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
struct MaxResult {
  Var<T> values;
  std::vector<std::size_t> argmax;  // position along the reduced axis, per output element
};

/// Max along `axis`; the axis is removed. Ties resolve to the lowest index and
/// the gradient flows only to the winning position.
template <class T>
MaxResult<T> max_over_axis(const Var<T>& x, std::size_t axis) {
  if (axis >= x.shape().rank()) throw DimensionError("max_over_axis: axis out of range for " + x.shape().str());
  const auto sp = detail::split_at(x.shape(), axis);
  Tensor<T> out(detail::drop_axis(x.shape(), axis));
  std::vector<std::size_t> arg(sp.outer * sp.inner, 0);
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const T* base = xv + o * sp.extent * sp.inner + i;
      std::size_t best = 0;
      for (std::size_t e = 1; e < sp.extent; ++e)
        if (base[e * sp.inner] > base[best * sp.inner]) best = e;
      out[o * sp.inner + i] = base[best * sp.inner];
      arg[o * sp.inner + i] = best;
    }
  auto shared_arg = std::make_shared<std::vector<std::size_t>>(arg);
  auto v = make_node<T>(std::move(out), "max", {x}, [shared_arg, sp](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t k = o * sp.inner + i;
        g[o * sp.extent * sp.inner + (*shared_arg)[k] * sp.inner + i] += self.grad[k];
      }
  });
  return {std::move(v), std::move(arg)};
}

template <class T>
Var<T> mean_over_axis(const Var<T>& x, std::size_t axis) {
  if (axis >= x.shape().rank()) throw DimensionError("mean_over_axis: axis out of range for " + x.shape().str());
  const auto sp = detail::split_at(x.shape(), axis);
  Tensor<T> out(detail::drop_axis(x.shape(), axis));
  const T inv = T(1) / static_cast<T>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x.value()[(o * sp.extent + e) * sp.inner + i] * inv;
  return make_node<T>(std::move(out), "mean", {x}, [sp, inv](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
  });
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
  T s = 0;
  for (auto v : x.value().values()) s += v;
  return make_node<T>(Tensor<T>::scalar(s), "sum", {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g.values()) v += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Normalization and loss
// ---------------------------------------------------------------------------

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t features = 1)
      : running_mean(Shape{features}, T(0)), running_var(Shape{features}, T(1)) {}
};

/// Per-feature normalization of [B×F]. Training mode uses batch statistics and
/// folds them into the running estimates; eval mode uses the running estimates.
template <class T>
Var<T> batch_norm(const Var<T>& x, BatchNormState<T>& state, const Var<T>& gamma, const Var<T>& beta,
                  bool training) {
  if (x.shape().rank() != 2) throw DimensionError("batch_norm expects [B x F], got " + x.shape().str());
  const std::size_t B = x.shape()[0], F = x.shape()[1];
  if (gamma.numel() != F || beta.numel() != F || state.running_mean.numel() != F)
    throw DimensionError("batch_norm: parameter extent does not match " + x.shape().str());
  if (training && B < 2) throw DimensionError("batch_norm: degenerate batch of size 1 in training mode");

  std::vector<T> mean(F, T(0)), invstd(F, T(0));
  const auto& xv = x.value();
  if (training) {
    std::vector<T> var(F, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < F; ++j) mean[j] += xv[b * F + j];
    for (auto& m : mean) m /= static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < F; ++j) {
        const T d = xv[b * F + j] - mean[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < F; ++j) {
      const T biased = var[j] / static_cast<T>(B);
      invstd[j] = T(1) / std::sqrt(biased + state.eps);
      const T m = state.momentum;
      state.running_mean[j] = (T(1) - m) * state.running_mean[j] + m * mean[j];
      state.running_var[j] = (T(1) - m) * state.running_var[j] + m * var[j] / static_cast<T>(B - 1);
    }
  } else {
    for (std::size_t j = 0; j < F; ++j) {
      mean[j] = state.running_mean[j];
      invstd[j] = T(1) / std::sqrt(state.running_var[j] + state.eps);
    }
  }

  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < F; ++j) {
      const T h = (xv[b * F + j] - mean[j]) * invstd[j];
      (*xhat)[b * F + j] = h;
      out[b * F + j] = gamma.value()[j] * h + beta.value()[j];
    }

  return make_node<T>(std::move(out), "batch_norm", {x, gamma, beta},
                      [xhat, invstd = std::move(invstd), B, F, training](Node<T>& self) {
                        auto& px = *self.parents[0];
                        auto& pg = *self.parents[1];
                        auto& pb = *self.parents[2];
                        const auto& g = self.grad;
                        std::vector<T> sum_g(F, T(0)), sum_gh(F, T(0));
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t j = 0; j < F; ++j) {
                            sum_g[j] += g[b * F + j];
                            sum_gh[j] += g[b * F + j] * (*xhat)[b * F + j];
                          }
                        if (pg.requires_grad) {
                          auto& gg = pg.ensure_grad();
                          for (std::size_t j = 0; j < F; ++j) gg[j] += sum_gh[j];
                        }
                        if (pb.requires_grad) {
                          auto& gb = pb.ensure_grad();
                          for (std::size_t j = 0; j < F; ++j) gb[j] += sum_g[j];
                        }
                        if (!px.requires_grad) return;
                        auto& gx = px.ensure_grad();
                        const T invB = T(1) / static_cast<T>(B);
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t j = 0; j < F; ++j) {
                            const T gam = pg.value[j];
                            const T gi = g[b * F + j];
                            if (training) {
                              gx[b * F + j] += gam * invstd[j] * invB *
                                               (static_cast<T>(B) * gi - sum_g[j] - (*xhat)[b * F + j] * sum_gh[j]);
                            } else {
                              gx[b * F + j] += gam * invstd[j] * gi;
                            }
                          }
                      });
}

/// Mean negative log-softmax at the true class of each row of [B×C].
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  if (logits.shape().rank() != 2) throw DimensionError("cross_entropy expects [B x C], got " + logits.shape().str());
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != B)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + logits.shape().str());
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C)
      throw LabelError("label " + std::to_string(l) + " outside [0, " + std::to_string(C) + ")");
  auto probs = std::make_shared<std::vector<T>>(B * C);
  T loss = 0;
  const auto& z = logits.value();
  for (std::size_t b = 0; b < B; ++b) {
    T m = z[b * C];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[b * C + c]);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[b * C + c] - m);
    const T lse = m + std::log(s);
    loss += lse - z[b * C + labels[b]];
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] = std::exp(z[b * C + c] - lse);
  }
  loss /= static_cast<T>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_node<T>(Tensor<T>::scalar(loss), "cross_entropy", {logits},
                      [probs, lab = std::move(lab), B, C](Node<T>& self) {
                        auto& g = self.parents[0]->ensure_grad();
                        const T k = self.grad[0] / static_cast<T>(B);
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t c = 0; c < C; ++c) {
                            const T onehot = static_cast<int>(c) == lab[b] ? T(1) : T(0);
                            g[b * C + c] += k * ((*probs)[b * C + c] - onehot);
                          }
                      });
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

template <class T>
std::vector<Node<T>*> topological_order(const Var<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Populates the gradient of every requires_grad ancestor of `loss`.
template <class T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) throw DimensionError("backward: root must be scalar, got " + loss.shape().str());
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  for (auto* n : order)
    if (!n->is_leaf()) {
      n->ensure_grad();
      n->grad.fill(T(0));
    }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf() && (*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------------------
// Parameters and optimization
// ---------------------------------------------------------------------------

/// Glorot-style uniform bound ±sqrt(6 / (fan_in + fan_out)).
template <class T, class Rng>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
class ParamRegistry {
 public:
  void add(const std::string& name, const Var<T>& p) {
    if (!p.requires_grad()) throw ParameterError("parameter '" + name + "' does not require grad");
    if (index_.count(name)) throw ParameterError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, p});
    velocity_.emplace_back(p.shape());
  }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("unknown parameter '" + name + "'");
    return params_[it->second].var;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const noexcept { return params_.size(); }
  std::uint64_t iteration() const noexcept { return iteration_; }

  struct Entry {
    std::string name;
    Var<T> var;
  };
  const std::vector<Entry>& entries() const noexcept { return params_; }

  void zero_grad() {
    for (auto& e : params_) e.var.zero_grad();
  }

  /// v ← momentum·v + grad, p ← p − lr·v, then grads are zeroed.
  void sgd_step(T lr, T momentum) {
    for (const auto& e : params_)
      if (!e.var.has_grad()) throw GradientError("uninitialized gradient for parameter '" + e.name + "'");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& node = *params_[i].var.node();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < v.numel(); ++j) {
        v[j] = momentum * v[j] + node.grad[j];
        node.value[j] -= lr * v[j];
      }
      node.grad.fill(T(0));
    }
    ++iteration_;
  }

  void reset_velocity() {
    for (auto& v : velocity_) v.fill(T(0));
  }

  Tensor<T>& velocity(std::size_t i) { return velocity_.at(i); }
  void set_iteration(std::uint64_t it) noexcept { iteration_ = it; }

 private:
  std::vector<Entry> params_;
  std::vector<Tensor<T>> velocity_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t iteration_ = 0;
};

template <class T>
void sgd_step(ParamRegistry<T>& registry, T lr, T momentum) {
  registry.sgd_step(lr, momentum);
}

}  // namespace fkac::ad
