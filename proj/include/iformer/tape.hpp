#pragma once

// Tape-based reverse-mode automatic differentiation. A Tape owns one
// forward's worth of nodes; Var is a cheap handle into it. Ops append a node
// holding the result value and a closure that scatters the node's gradient
// into its parents. backward() walks the tape once in reverse creation
// order, which is a reverse topological order by construction.
//
// Gradients are materialized lazily (empty until first accumulation), so
// forward-only use costs no gradient memory. Repeated backward() calls
// accumulate into existing gradients; use a fresh tape per forward (the
// intended pattern) to reset.

#include <algorithm>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "iformer/common.hpp"
#include "iformer/tensor.hpp"

namespace iformer {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int32_t id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const std::vector<int64_t>& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf node (input or parameter); no backward function.
  Var<T> leaf(Tensor<T> value) { return append(std::move(value), nullptr); }

  // Id the next append() will get; ops capture it in their backward closure.
  int32_t next_id() const { return static_cast<int32_t>(nodes_.size()); }

  Var<T> append(Tensor<T> value, std::function<void(Tape&)> backward_fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, std::move(backward_fn)});
    return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(int32_t id) const { return nodes_[id].value; }

  // Gradient buffer, created as zeros on first access.
  Tensor<T>& grad_ref(int32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(int32_t id) const { return !nodes_[id].grad.empty(); }

  // Copy of the gradient; zeros if the node never received a contribution.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor<T>::zeros(n.value.shape()) : n.grad;
  }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  // Leaf gradients accumulate across calls; interior buffers are per-sweep
  // scratch and are reset here, otherwise a second sweep would re-propagate
  // the first sweep's contributions on top of its own.
  void backward(Var<T> root) {
    if (root.tape != this) throw UsageError("backward: root belongs to a different tape");
    if (value(root.id).numel() != 1) {
      throw UsageError("backward requires a scalar root, got shape " +
                       shape_str(value(root.id).shape()));
    }
    for (Node& n : nodes_) {
      if (n.backward_fn && !n.grad.empty()) n.grad = Tensor<T>{};
    }
    grad_ref(root.id)[0] += T(1);
    for (int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.grad.empty() && n.backward_fn) n.backward_fn(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until touched
    std::function<void(Tape&)> backward_fn;
  };
  // Deque, not vector: composite ops hold value()/shape() references while
  // appending child nodes, so growth must not move existing nodes.
  std::deque<Node> nodes_;
};

namespace detail {

// True if `small` equals a trailing suffix of `big` (bias-style broadcast).
inline bool is_trailing_suffix(const std::vector<int64_t>& big,
                               const std::vector<int64_t>& small) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i) {
    if (big[off + i] != small[i]) return false;
  }
  return true;
}

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw UsageError("operands live on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly, or b must be a trailing
// suffix of a (bias broadcast); no other broadcasting exists.
// ---------------------------------------------------------------------------

enum class BinOp { add, sub, mul };

template <typename T>
Var<T> elementwise_binary(BinOp op, Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = tape.value(a.id);
  const Tensor<T>& bv = tape.value(b.id);
  if (!av.same_shape(bv) && !detail::is_trailing_suffix(av.shape(), bv.shape())) {
    throw ShapeError("elementwise op on non-broadcastable shapes " +
                     shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const int64_t n = av.numel();
  const int64_t bn = bv.numel();
  Tensor<T> out(av.shape());
  switch (op) {
    case BinOp::add:
      for (int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % bn];
      break;
    case BinOp::sub:
      for (int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % bn];
      break;
    case BinOp::mul:
      for (int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % bn];
      break;
  }
  const int32_t aid = a.id, bid = b.id, oid = tape.next_id();
  return tape.append(std::move(out), [op, aid, bid, oid, n, bn](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& ga = t.grad_ref(aid);
    Tensor<T>& gb = t.grad_ref(bid);
    switch (op) {
      case BinOp::add:
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        for (int64_t i = 0; i < n; ++i) gb[i % bn] += g[i];
        break;
      case BinOp::sub:
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        for (int64_t i = 0; i < n; ++i) gb[i % bn] -= g[i];
        break;
      case BinOp::mul: {
        const Tensor<T>& av2 = t.value(aid);
        const Tensor<T>& bv2 = t.value(bid);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv2[i % bn];
        for (int64_t i = 0; i < n; ++i) gb[i % bn] += g[i] * av2[i];
        break;
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return elementwise_binary(BinOp::add, a, b); }
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) { return elementwise_binary(BinOp::sub, a, b); }
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) { return elementwise_binary(BinOp::mul, a, b); }

// Multiplication by a compile-time-known scalar (attention scaling etc).
template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = tape.value(a.id);
  Tensor<T> out(av.shape());
  const int64_t n = av.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = av[i] * c;
  const int32_t aid = a.id, oid = tape.next_id();
  return tape.append(std::move(out), [aid, oid, c, n](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& ga = t.grad_ref(aid);
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
  });
}

// ---------------------------------------------------------------------------
// Batched matrix product. a is [..., M, K] and b is [..., K, P] with equal
// leading dims, or b is a plain [K, P] shared across all of a's batches.
// ---------------------------------------------------------------------------

namespace detail {

// C[M,P] += A[M,K] * B[K,P]
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * p;
    const T* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T aik = arow[kk];
      const T* brow = b + kk * p;
      for (int64_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

// dA[M,K] += G[M,P] * B^T   (row-dot form, no explicit transpose)
template <typename T>
void matmul_grad_a(const T* g, const T* b, T* da, int64_t m, int64_t k, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const T* grow = g + i * p;
    T* darow = da + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * p;
      T acc = T(0);
      for (int64_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
      darow[kk] += acc;
    }
  }
}

// dB[K,P] += A^T * G
template <typename T>
void matmul_grad_b(const T* a, const T* g, T* db, int64_t m, int64_t k, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * p;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T aik = arow[kk];
      T* dbrow = db + kk * p;
      for (int64_t j = 0; j < p; ++j) dbrow[j] += aik * grow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = tape.value(a.id);
  const Tensor<T>& bv = tape.value(b.id);
  if (av.rank() < 2 || bv.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + shape_str(av.shape()) +
                     " and " + shape_str(bv.shape()));
  }
  const bool shared_b = bv.rank() == 2 && av.rank() > 2;
  const auto& as = av.shape();
  const auto& bs = bv.shape();
  const int64_t m = as[as.size() - 2];
  const int64_t k = as[as.size() - 1];
  const int64_t kb = bs[bs.size() - 2];
  const int64_t p = bs[bs.size() - 1];
  bool batch_ok = shared_b || (as.size() == bs.size() &&
                               std::equal(as.begin(), as.end() - 2, bs.begin()));
  if (k != kb || !batch_ok) {
    throw ShapeError("matmul shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  int64_t batches = 1;
  for (size_t i = 0; i + 2 < as.size(); ++i) batches *= as[i];
  std::vector<int64_t> out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(p);
  Tensor<T> out(out_shape);
  {
    const T* ap = av.data();
    const T* bp = bv.data();
    T* op = out.data();
    parallel_for(batches, [&](int64_t n) {
      detail::matmul_acc(ap + n * m * k, shared_b ? bp : bp + n * k * p,
                         op + n * m * p, m, k, p);
    });
  }
  const int32_t aid = a.id, bid = b.id, oid = tape.next_id();
  return tape.append(std::move(out),
                     [aid, bid, oid, m, k, p, batches, shared_b](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& av2 = t.value(aid);
    const Tensor<T>& bv2 = t.value(bid);
    Tensor<T>& ga = t.grad_ref(aid);
    Tensor<T>& gb = t.grad_ref(bid);
    for (int64_t n = 0; n < batches; ++n) {
      const T* gp = g.data() + n * m * p;
      const T* bp = shared_b ? bv2.data() : bv2.data() + n * k * p;
      const T* ap = av2.data() + n * m * k;
      detail::matmul_grad_a(gp, bp, ga.data() + n * m * k, m, k, p);
      detail::matmul_grad_b(ap, gp, shared_b ? gb.data() : gb.data() + n * k * p,
                            m, k, p);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int64_t> new_shape) {
  Tape<T>& tape = *a.tape;
  Tensor<T> out = tape.value(a.id).reshaped(std::move(new_shape));
  const int32_t aid = a.id, oid = tape.next_id();
  const int64_t n = out.numel();
  return tape.append(std::move(out), [aid, oid, n](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& ga = t.grad_ref(aid);
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

// General axis permutation; out dim i = in dim axes[i].
template <typename T>
Var<T> permute(Var<T> a, std::vector<int> axes) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = tape.value(a.id);
  const auto& as = av.shape();
  const size_t r = as.size();
  if (axes.size() != r) throw ShapeError("permute axes rank mismatch for " + shape_str(as));
  std::vector<int64_t> out_shape(r), in_strides(r), out_strides(r);
  int64_t s = 1;
  for (size_t i = r; i-- > 0;) { in_strides[i] = s; s *= as[i]; }
  for (size_t i = 0; i < r; ++i) out_shape[i] = as[axes[i]];
  s = 1;
  for (size_t i = r; i-- > 0;) { out_strides[i] = s; s *= out_shape[i]; }
  // Map each output flat index back to the source flat index.
  const int64_t n = av.numel();
  std::vector<int64_t> src_index(n);
  std::vector<int64_t> idx(r, 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[axes[i]];
    src_index[o] = src;
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < n; ++o) out[o] = av[src_index[o]];
  const int32_t aid = a.id, oid = tape.next_id();
  return tape.append(std::move(out),
                     [aid, oid, n, src_index = std::move(src_index)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& ga = t.grad_ref(aid);
    for (int64_t o = 0; o < n; ++o) ga[src_index[o]] += g[o];
  });
}

// [..., M, N] -> [..., N, M]
template <typename T>
Var<T> transpose_last2(Var<T> a) {
  const size_t r = a.value().rank();
  std::vector<int> axes(r);
  for (size_t i = 0; i < r; ++i) axes[i] = static_cast<int>(i);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, std::move(axes));
}

// ---------------------------------------------------------------------------
// Channel concat/split along the last axis. split(concat(parts), sizes)
// returns the original parts bitwise.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: empty part list");
  Tape<T>& tape = *parts[0].tape;
  const auto& s0 = parts[0].shape();
  const size_t r = s0.size();
  int64_t c_total = 0;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p);
    const auto& s = p.shape();
    if (s.size() != r || !std::equal(s.begin(), s.end() - 1, s0.begin())) {
      throw ShapeError("concat_channels: incompatible part shapes " +
                       shape_str(s0) + " vs " + shape_str(s));
    }
    c_total += s.back();
  }
  int64_t rows = 1;
  for (size_t i = 0; i + 1 < r; ++i) rows *= s0[i];
  std::vector<int64_t> out_shape(s0.begin(), s0.end() - 1);
  out_shape.push_back(c_total);
  Tensor<T> out(out_shape);
  std::vector<int32_t> ids;
  std::vector<int64_t> widths;
  int64_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    const int64_t w = pv.shape().back();
    for (int64_t rix = 0; rix < rows; ++rix) {
      std::copy_n(pv.data() + rix * w, w, out.data() + rix * c_total + off);
    }
    ids.push_back(p.id);
    widths.push_back(w);
    off += w;
  }
  const int32_t oid = tape.next_id();
  return tape.append(std::move(out), [oid, rows, c_total, ids = std::move(ids),
                                      widths = std::move(widths)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    int64_t off2 = 0;
    for (size_t pi = 0; pi < ids.size(); ++pi) {
      Tensor<T>& gp = t.grad_ref(ids[pi]);
      const int64_t w = widths[pi];
      for (int64_t rix = 0; rix < rows; ++rix) {
        const T* src = g.data() + rix * c_total + off2;
        T* dst = gp.data() + rix * w;
        for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
      }
      off2 += w;
    }
  });
}

template <typename T>
std::vector<Var<T>> split_channels(Var<T> x, const std::vector<int64_t>& sizes) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  const auto& s = xv.shape();
  const int64_t c = s.back();
  int64_t sum = 0;
  for (int64_t w : sizes) {
    if (w <= 0) throw ShapeError("split_channels: non-positive slice width");
    sum += w;
  }
  if (sum != c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(sum) +
                     " but channel count is " + std::to_string(c));
  }
  int64_t rows = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  // Slice everything first: appending nodes can reallocate the tape's
  // storage, which would invalidate xv and s.
  std::vector<Tensor<T>> slices;
  slices.reserve(sizes.size());
  int64_t off = 0;
  for (int64_t w : sizes) {
    std::vector<int64_t> part_shape(s.begin(), s.end() - 1);
    part_shape.push_back(w);
    Tensor<T> part(part_shape);
    for (int64_t rix = 0; rix < rows; ++rix) {
      std::copy_n(xv.data() + rix * c + off, w, part.data() + rix * w);
    }
    slices.push_back(std::move(part));
    off += w;
  }
  std::vector<Var<T>> out;
  off = 0;
  for (size_t k = 0; k < sizes.size(); ++k) {
    const int64_t w = sizes[k];
    const int32_t xid = x.id, oid = tape.next_id();
    const int64_t o = off;
    out.push_back(tape.append(std::move(slices[k]), [xid, oid, rows, c, w, o](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oid);
      Tensor<T>& gx = t.grad_ref(xid);
      for (int64_t rix = 0; rix < rows; ++rix) {
        const T* src = g.data() + rix * w;
        T* dst = gx.data() + rix * c + o;
        for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
      }
    }));
    off += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

// Sum of all elements -> shape [1].
template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = tape.value(a.id);
  T s = T(0);
  const int64_t n = av.numel();
  for (int64_t i = 0; i < n; ++i) s += av[i];
  Tensor<T> out({1});
  out[0] = s;
  const int32_t aid = a.id, oid = tape.next_id();
  return tape.append(std::move(out), [aid, oid, n](Tape<T>& t) {
    const T g = t.grad_ref(oid)[0];
    Tensor<T>& ga = t.grad_ref(aid);
    for (int64_t i = 0; i < n; ++i) ga[i] += g;
  });
}

// Mean over the spatial axes: [B,H,W,C] -> [B,C].
template <typename T>
Var<T> mean_spatial(Var<T> a) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = tape.value(a.id);
  if (av.rank() != 4) throw ShapeError("mean_spatial expects [B,H,W,C], got " + shape_str(av.shape()));
  const int64_t b = av.dim(0), h = av.dim(1), w = av.dim(2), c = av.dim(3);
  const int64_t hw = h * w;
  Tensor<T> out({b, c});
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t s = 0; s < hw; ++s) {
      const T* src = av.data() + (bi * hw + s) * c;
      T* dst = out.data() + bi * c;
      for (int64_t ci = 0; ci < c; ++ci) dst[ci] += src[ci];
    }
  }
  const T inv = T(1) / static_cast<T>(hw);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= inv;
  const int32_t aid = a.id, oid = tape.next_id();
  return tape.append(std::move(out), [aid, oid, b, hw, c, inv](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& ga = t.grad_ref(aid);
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t s = 0; s < hw; ++s) {
        T* dst = ga.data() + (bi * hw + s) * c;
        const T* src = g.data() + bi * c;
        for (int64_t ci = 0; ci < c; ++ci) dst[ci] += src[ci] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle: central differences per element.
// Independent of the tape machinery; this is what analytic gradients are
// judged against.
// ---------------------------------------------------------------------------

template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T eps) {
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T fp = f(probe);
    probe[i] = orig - eps;
    const T fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (T(2) * eps);
  }
  return grad;
}

}  // namespace iformer
