#pragma once

#include <algorithm>
#include <cmath>
#ifdef _OPENMP
#include <omp.h>
#endif
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dithead/common.hpp"

namespace dithead {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw DimensionError("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Thread-local switch: when disabled, ops do not record the backward graph.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Tensor<T>> parents;                    // graph edges, freed after backward()
  std::function<void(TensorNode<T>&)> backward_fn;   // reads this->grad, accumulates into parents
};

// Value-semantics handle to a node of the autodiff graph. Data is owned by the
// node; copies of a Tensor alias the same storage.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->data) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor with " + std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  T* grad() {
    ensure_grad();
    return node_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return node_->grad; }
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  TensorNode<T>* node() const { return node_.get(); }

  // internal: used by op implementations
  static Tensor make_result(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                            std::function<void(TensorNode<T>&)> backward_fn) {
    Tensor t = from_data(std::move(shape), std::move(data));
    bool track = GradMode::enabled();
    if (track) {
      bool any = false;
      for (const auto& p : parents) any = any || p.requires_grad();
      track = any;
    }
    if (track) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Accumulate g into the grad buffer of a parent tensor, if it tracks grads.
template <typename T>
inline void accumulate_grad(Tensor<T>& parent, const T* g, int64_t n) {
  if (!parent.requires_grad()) return;
  parent.ensure_grad();
  T* dst = parent.grad();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

// Run reverse-mode accumulation from a scalar root, then free the graph edges
// (the per-pass tape). Leaf grads survive for the optimizer.
template <typename T>
inline void backward(Tensor<T> root) {
  if (root.numel() != 1) throw DimensionError("backward: root must be scalar");
  if (!root.requires_grad()) throw StateError("backward: root does not track gradients");

  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* next = node->parents[idx].node();
      ++idx;
      if (next->requires_grad && !seen.count(next)) {
        seen.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.ensure_grad();
  root.grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // free the tape: keep values and leaf grads, drop edges and closures
  for (TensorNode<T>* n : order) {
    n->parents.clear();
    n->backward_fn = nullptr;
    if (!n->requires_grad) n->grad.clear();
  }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

// c[m,n] = (acc ? c : 0) + a[m,k] * b[k,n]
// Register-tiled over n so the accumulators stay local across the k loop.
template <typename T>
inline void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k, int n,
                    bool acc) {
  constexpr int kTile = 64;
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 65536)
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<int64_t>(i) * k;
    T* ci = c + static_cast<int64_t>(i) * n;
    for (int j0 = 0; j0 < n; j0 += kTile) {
      int jn = std::min(kTile, n - j0);
      T accbuf[kTile];
      if (acc)
        std::copy(ci + j0, ci + j0 + jn, accbuf);
      else
        std::fill(accbuf, accbuf + jn, T(0));
      for (int p = 0; p < k; ++p) {
        T av = ai[p];
        const T* bp = b + static_cast<int64_t>(p) * n + j0;
        for (int j = 0; j < jn; ++j) accbuf[j] += av * bp[j];
      }
      std::copy(accbuf, accbuf + jn, ci + j0);
    }
  }
}

// c[m,k] = (acc ? c : 0) + a[m,n] * b[k,n]^T
// Materializes b^T once, then reuses the tiled kernel; b is small (weights or
// per-batch attention blocks) next to the m dimension.
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, int m, int n, int k, bool acc) {
  std::vector<T> bt(static_cast<size_t>(n) * k);
  for (int j = 0; j < k; ++j)
    for (int p = 0; p < n; ++p) bt[static_cast<size_t>(p) * k + j] = b[static_cast<int64_t>(j) * n + p];
  gemm_nn(a, bt.data(), c, m, n, k, acc);
}

// dst[k,n] += a[m0..m1,k]^T * b[m0..m1,n]; m-outer keeps dst cache-hot
template <typename T>
inline void gemm_tn_acc_serial(const T* __restrict a, const T* __restrict b, T* __restrict dst, int64_t m0,
                               int64_t m1, int k, int n) {
  for (int64_t i = m0; i < m1; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (int j = 0; j < k; ++j) {
      T av = ai[j];
      T* dj = dst + static_cast<int64_t>(j) * n;
      for (int p = 0; p < n; ++p) dj[p] += av * bi[p];
    }
  }
}

// c[k,n] = (acc ? c : 0) + a[m,k]^T * b[m,n]
// Threads accumulate disjoint partials, reduced in a fixed order so results
// are reproducible for a fixed thread count.
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
  int64_t cn = static_cast<int64_t>(k) * n;
  if (!acc) std::fill(c, c + cn, T(0));
  int threads = 1;
#ifdef _OPENMP
  if (!omp_in_parallel() && static_cast<int64_t>(m) * k * n > 262144) threads = omp_get_max_threads();
#endif
  if (threads <= 1) {
    gemm_tn_acc_serial(a, b, c, 0, m, k, n);
    return;
  }
  std::vector<T> partials(static_cast<size_t>(threads) * cn, T(0));
#pragma omp parallel num_threads(threads)
  {
#ifdef _OPENMP
    int t = omp_get_thread_num();
#else
    int t = 0;
#endif
    int64_t chunk = (m + threads - 1) / threads;
    int64_t m0 = std::min<int64_t>(static_cast<int64_t>(t) * chunk, m);
    int64_t m1 = std::min<int64_t>(m0 + chunk, m);
    gemm_tn_acc_serial(a, b, partials.data() + static_cast<int64_t>(t) * cn, m0, m1, k, n);
  }
  for (int t = 0; t < threads; ++t) {
    const T* p = partials.data() + static_cast<int64_t>(t) * cn;
    for (int64_t i = 0; i < cn; ++i) c[i] += p[i];
  }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) mutable {
    accumulate_grad(a, self.grad.data(), static_cast<int64_t>(self.grad.size()));
    accumulate_grad(b, self.grad.data(), static_cast<int64_t>(self.grad.size()));
  });
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) mutable {
    accumulate_grad(a, self.grad.data(), static_cast<int64_t>(self.grad.size()));
    if (b.requires_grad()) {
      b.ensure_grad();
      T* gb = b.grad();
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) mutable {
    if (a.requires_grad()) {
      a.ensure_grad();
      T* ga = a.grad();
      const T* pb2 = b.data();
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * pb2[i];
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      T* gb = b.grad();
      const T* pa2 = a.data();
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * pa2[i];
    }
  });
}

template <typename T>
Tensor<T> mul_scalar(Tensor<T> a, T s) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v *= s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [a, s](TensorNode<T>& self) mutable {
    if (a.requires_grad()) {
      a.ensure_grad();
      T* ga = a.grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * s;
    }
  });
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> a, T s) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v += s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [a](TensorNode<T>& self) mutable {
    accumulate_grad(a, self.grad.data(), static_cast<int64_t>(self.grad.size()));
  });
}

template <typename T>
Tensor<T> abs_val(Tensor<T> a) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v = std::abs(v);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [a](TensorNode<T>& self) mutable {
    if (!a.requires_grad()) return;
    a.ensure_grad();
    T* ga = a.grad();
    const T* pa = a.data();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      T sign = pa[i] > T(0) ? T(1) : (pa[i] < T(0) ? T(-1) : T(0));
      ga[i] += self.grad[i] * sign;
    }
  });
}

template <typename T>
Tensor<T> gelu(Tensor<T> x) {
  const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
  const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
  std::vector<T> out(x.vec().size());
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    T v = px[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x, inv_sqrt2, inv_sqrt2pi](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.ensure_grad();
                                  T* gx = x.grad();
                                  const T* px2 = x.data();
                                  for (size_t i = 0; i < self.grad.size(); ++i) {
                                    T v = px2[i];
                                    T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                                    T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                                    gx[i] += self.grad[i] * (cdf + v * pdf);
                                  }
                                });
}

template <typename T>
Tensor<T> leaky_relu(Tensor<T> x, T negative_slope = T(0.1)) {
  std::vector<T> out(x.vec());
  for (auto& v : out)
    if (v < T(0)) v *= negative_slope;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x, negative_slope](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.ensure_grad();
                                  T* gx = x.grad();
                                  const T* px = x.data();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                    gx[i] += self.grad[i] * (px[i] < T(0) ? negative_slope : T(1));
                                });
}

// gradient passes through only where lo < x < hi
template <typename T>
Tensor<T> clamp(Tensor<T> x, T lo, T hi) {
  std::vector<T> out(x.vec());
  for (auto& v : out) v = std::min(hi, std::max(lo, v));
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [x, lo, hi](TensorNode<T>& self) mutable {
    if (!x.requires_grad()) return;
    x.ensure_grad();
    T* gx = x.grad();
    const T* px = x.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (px[i] > lo && px[i] < hi) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum_all(Tensor<T> a) {
  T s = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
  return Tensor<T>::make_result({1}, {s}, {a}, [a](TensorNode<T>& self) mutable {
    if (!a.requires_grad()) return;
    a.ensure_grad();
    T g = self.grad[0];
    T* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
  });
}

template <typename T>
Tensor<T> mean_all(Tensor<T> a) {
  return mul_scalar(sum_all(a), static_cast<T>(1.0 / static_cast<double>(a.numel())));
}

// shares no graph edge with the input; same values
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from_data(a.shape(), a.vec());
}

// a + b where b's shape is a trailing suffix of a's shape (b broadcast over
// the leading dims)
template <typename T>
Tensor<T> add_suffix(Tensor<T> a, Tensor<T> b) {
  if (b.ndim() > a.ndim()) throw DimensionError("add_suffix: rank");
  for (int i = 0; i < b.ndim(); ++i)
    if (b.dim(i) != a.dim(a.ndim() - b.ndim() + i))
      throw DimensionError("add_suffix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t bn = b.numel();
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] += pb[i % bn];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b, bn](TensorNode<T>& self) mutable {
    accumulate_grad(a, self.grad.data(), static_cast<int64_t>(self.grad.size()));
    if (b.requires_grad()) {
      b.ensure_grad();
      T* gb = b.grad();
      for (int64_t i = 0; i < static_cast<int64_t>(self.grad.size()); ++i) gb[i % bn] += self.grad[static_cast<size_t>(i)];
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tensor<T> a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
  return Tensor<T>::make_result(std::move(new_shape), a.vec(), {a}, [a](TensorNode<T>& self) mutable {
    accumulate_grad(a, self.grad.data(), static_cast<int64_t>(self.grad.size()));
  });
}

namespace detail {
inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// out[idx] = in[perm applied to idx]; mapping table from out offset to in offset
inline void permute_offsets(const Shape& in_shape, const std::vector<int>& perm, std::vector<int64_t>& map) {
  size_t nd = in_shape.size();
  Shape out_shape(nd);
  for (size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  auto in_strides = row_major_strides(in_shape);
  int64_t total = shape_numel(out_shape);
  map.resize(static_cast<size_t>(total));
  std::vector<int64_t> idx(nd, 0);
  for (int64_t o = 0; o < total; ++o) {
    int64_t in_off = 0;
    for (size_t i = 0; i < nd; ++i) in_off += idx[i] * in_strides[static_cast<size_t>(perm[i])];
    map[static_cast<size_t>(o)] = in_off;
    for (int i = static_cast<int>(nd) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
}
}  // namespace detail

template <typename T>
Tensor<T> permute(Tensor<T> a, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != a.ndim()) throw DimensionError("permute: rank mismatch");
  std::vector<bool> used(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= a.ndim() || used[static_cast<size_t>(p)]) throw DimensionError("permute: invalid permutation");
    used[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  std::vector<int64_t> map;
  detail::permute_offsets(a.shape(), perm, map);
  std::vector<T> out(map.size());
  const T* pa = a.data();
  for (size_t o = 0; o < map.size(); ++o) out[o] = pa[map[o]];
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {a},
                                [a, map = std::move(map)](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  a.ensure_grad();
                                  T* ga = a.grad();
                                  for (size_t o = 0; o < map.size(); ++o) ga[map[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ParameterError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) throw DimensionError("concat: bad axis");
  int total_axis = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != s0[static_cast<size_t>(i)]) throw DimensionError("concat: shape mismatch");
    total_axis += p.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total_axis;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= s0[static_cast<size_t>(i)];

  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t out_row = static_cast<int64_t>(total_axis) * inner;
  int64_t offset = 0;
  for (const auto& p : parts) {
    int64_t p_row = static_cast<int64_t>(p.dim(axis)) * inner;
    const T* pp = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + offset, pp + o * p_row, static_cast<size_t>(p_row) * sizeof(T));
    offset += p_row;
  }
  auto parts_copy = parts;
  std::vector<int64_t> part_rows;
  for (const auto& p : parts) part_rows.push_back(static_cast<int64_t>(p.dim(axis)) * inner);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), parts_copy,
      [parts_copy, part_rows, outer, out_row](TensorNode<T>& self) mutable {
        const T* g = self.grad.data();
        int64_t offset = 0;
        for (size_t pi = 0; pi < parts_copy.size(); ++pi) {
          Tensor<T>& p = parts_copy[pi];
          int64_t p_row = part_rows[pi];
          if (p.requires_grad()) {
            p.ensure_grad();
            T* gp = p.grad();
            for (int64_t o = 0; o < outer; ++o) {
              const T* src = g + o * out_row + offset;
              T* dst = gp + o * p_row;
              for (int64_t i = 0; i < p_row; ++i) dst[i] += src[i];
            }
          }
          offset += p_row;
        }
      });
}

// slice along one axis: indices [start, start+len)
template <typename T>
Tensor<T> slice(Tensor<T> a, int axis, int start, int len) {
  if (axis < 0 || axis >= a.ndim()) throw DimensionError("slice: bad axis");
  if (start < 0 || len <= 0 || start + len > a.dim(axis)) throw DimensionError("slice: out of range");
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  int64_t in_row = static_cast<int64_t>(a.dim(axis)) * inner;
  int64_t out_row = static_cast<int64_t>(len) * inner;
  std::vector<T> out(static_cast<size_t>(outer * out_row));
  const T* pa = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_row, pa + o * in_row + static_cast<int64_t>(start) * inner,
                static_cast<size_t>(out_row) * sizeof(T));
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {a},
                                [a, axis, start, outer, inner, in_row, out_row](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  a.ensure_grad();
                                  T* ga = a.grad();
                                  for (int64_t o = 0; o < outer; ++o) {
                                    T* dst = ga + o * in_row + static_cast<int64_t>(start) * inner;
                                    const T* src = self.grad.data() + o * out_row;
                                    for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
                                  }
                                });
}

// rows of table selected by indices: out[i,:] = table[idx[i],:]
template <typename T>
Tensor<T> gather_rows(Tensor<T> table, const std::vector<int>& indices) {
  if (table.ndim() != 2) throw DimensionError("gather_rows: table must be 2-d");
  int n = table.dim(0), d = table.dim(1);
  std::vector<T> out(indices.size() * static_cast<size_t>(d));
  const T* pt = table.data();
  for (size_t i = 0; i < indices.size(); ++i) {
    int r = indices[i];
    if (r < 0 || r >= n) throw ParameterError("gather_rows: index out of range");
    std::memcpy(out.data() + i * static_cast<size_t>(d), pt + static_cast<int64_t>(r) * d,
                static_cast<size_t>(d) * sizeof(T));
  }
  Shape out_shape{static_cast<int>(indices.size()), d};
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {table},
                                [table, indices, d](TensorNode<T>& self) mutable {
                                  if (!table.requires_grad()) return;
                                  table.ensure_grad();
                                  T* gt = table.grad();
                                  for (size_t i = 0; i < indices.size(); ++i) {
                                    const T* src = self.grad.data() + i * static_cast<size_t>(d);
                                    T* dst = gt + static_cast<int64_t>(indices[i]) * d;
                                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// a: [..., m, k]; b either [k, n] (shared) or [..., k, n] with matching batch dims
template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.ndim() < 2 || b.ndim() < 2) throw DimensionError("matmul: operands must have rank >= 2");
  int m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  int kb = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  if (k != kb)
    throw DimensionError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  bool shared_b = (b.ndim() == 2 && a.ndim() >= 2);
  int64_t batch = 1;
  for (int i = 0; i < a.ndim() - 2; ++i) batch *= a.dim(i);
  if (!shared_b) {
    if (b.ndim() != a.ndim()) throw DimensionError("matmul: batch rank mismatch");
    for (int i = 0; i < a.ndim() - 2; ++i)
      if (a.dim(i) != b.dim(i)) throw DimensionError("matmul: batch dims mismatch");
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<size_t>(batch) * m * n);
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t l = 0; l < batch; ++l)
    gemm_nn(pa + l * m * k, shared_b ? pb : pb + l * static_cast<int64_t>(k) * n, out.data() + l * m * n, m, k, n,
            false);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, m, k, n, batch, shared_b](TensorNode<T>& self) mutable {
        const T* g = self.grad.data();
        if (a.requires_grad()) {
          a.ensure_grad();
          T* ga = a.grad();
          const T* pb = b.data();
          for (int64_t l = 0; l < batch; ++l)
            gemm_nt(g + l * m * n, shared_b ? pb : pb + l * static_cast<int64_t>(k) * n, ga + l * m * k, m, n, k,
                    true);
        }
        if (b.requires_grad()) {
          b.ensure_grad();
          T* gb = b.grad();
          const T* pa = a.data();
          for (int64_t l = 0; l < batch; ++l)
            gemm_tn(pa + l * m * k, g + l * m * n, shared_b ? gb : gb + l * static_cast<int64_t>(k) * n, m, k, n,
                    true);
        }
      });
}

// y = x W^T + b; x: [..., in], w: [out, in], b: [out] or undefined
template <typename T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b = Tensor<T>()) {
  if (w.ndim() != 2) throw DimensionError("linear: weight must be 2-d");
  int in = w.dim(1), out_dim = w.dim(0);
  if (x.dim(x.ndim() - 1) != in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != out_dim)) throw DimensionError("linear: bias shape");
  int64_t rows = x.numel() / in;
  std::vector<T> out(static_cast<size_t>(rows) * out_dim);
  gemm_nt(x.data(), w.data(), out.data(), static_cast<int>(rows), in, out_dim, false);
  if (b.defined()) {
    const T* pb = b.data();
    for (int64_t r = 0; r < rows; ++r) {
      T* o = out.data() + r * out_dim;
      for (int j = 0; j < out_dim; ++j) o[j] += pb[j];
    }
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<Tensor<T>> parents = b.defined() ? std::vector<Tensor<T>>{x, w, b} : std::vector<Tensor<T>>{x, w};
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), std::move(parents),
      [x, w, b, rows, in, out_dim](TensorNode<T>& self) mutable {
        const T* g = self.grad.data();
        if (x.requires_grad()) {
          x.ensure_grad();
          gemm_nn(g, w.data(), x.grad(), static_cast<int>(rows), out_dim, in, true);
        }
        if (w.requires_grad()) {
          w.ensure_grad();
          gemm_tn(g, x.data(), w.grad(), static_cast<int>(rows), out_dim, in, true);
        }
        if (b.defined() && b.requires_grad()) {
          b.ensure_grad();
          T* gb = b.grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g + r * out_dim;
            for (int j = 0; j < out_dim; ++j) gb[j] += gr[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// normalization / activation over axes
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(Tensor<T> x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim()) throw DimensionError("softmax: bad axis");
  int64_t outer = 1, inner = 1;
  int len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  std::vector<T> out(x.vec().size());
  const T* px = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const T* src = px + o * len * inner + in;
      T* dst = out.data() + o * len * inner + in;
      T mx = src[0];
      for (int i = 1; i < len; ++i) mx = std::max(mx, src[static_cast<int64_t>(i) * inner]);
      T sum = T(0);
      for (int i = 0; i < len; ++i) {
        T e = std::exp(src[static_cast<int64_t>(i) * inner] - mx);
        dst[static_cast<int64_t>(i) * inner] = e;
        sum += e;
      }
      T inv = T(1) / sum;
      for (int i = 0; i < len; ++i) dst[static_cast<int64_t>(i) * inner] *= inv;
    }
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x, outer, inner, len](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.ensure_grad();
                                  T* gx = x.grad();
                                  const T* y = self.data.data();
                                  const T* g = self.grad.data();
                                  for (int64_t o = 0; o < outer; ++o) {
                                    for (int64_t in = 0; in < inner; ++in) {
                                      int64_t base = o * len * inner + in;
                                      T dot = T(0);
                                      for (int i = 0; i < len; ++i) {
                                        int64_t off = base + static_cast<int64_t>(i) * inner;
                                        dot += g[off] * y[off];
                                      }
                                      for (int i = 0; i < len; ++i) {
                                        int64_t off = base + static_cast<int64_t>(i) * inner;
                                        gx[off] += (g[off] - dot) * y[off];
                                      }
                                    }
                                  }
                                });
}

constexpr double kLayerNormEps = 1e-5;

// normalizes the last axis; gain and bias have that axis's length
template <typename T>
Tensor<T> layernorm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias) {
  int len = x.dim(x.ndim() - 1);
  if (gain.numel() != len || bias.numel() != len) throw DimensionError("layernorm: gain/bias length");
  int64_t rows = x.numel() / len;
  std::vector<T> out(x.vec().size());
  auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * 2);  // mean, invstd per row
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = px + r * len;
    T* dst = out.data() + r * len;
    double mean = 0.0;
    for (int i = 0; i < len; ++i) mean += static_cast<double>(src[i]);
    mean /= len;
    double var = 0.0;
    for (int i = 0; i < len; ++i) {
      double d = static_cast<double>(src[i]) - mean;
      var += d * d;
    }
    var /= len;
    double invstd = 1.0 / std::sqrt(var + kLayerNormEps);
    (*stats)[static_cast<size_t>(r) * 2] = static_cast<T>(mean);
    (*stats)[static_cast<size_t>(r) * 2 + 1] = static_cast<T>(invstd);
    for (int i = 0; i < len; ++i) {
      T xhat = static_cast<T>((static_cast<double>(src[i]) - mean) * invstd);
      dst[i] = xhat * pg[i] + pb[i];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, rows, len, stats](TensorNode<T>& self) mutable {
        const T* g = self.grad.data();
        const T* px = x.data();
        const T* pg = gain.data();
        for (int64_t r = 0; r < rows; ++r) {
          T mean = (*stats)[static_cast<size_t>(r) * 2];
          T invstd = (*stats)[static_cast<size_t>(r) * 2 + 1];
          const T* gr = g + r * len;
          const T* xr = px + r * len;
          if (gain.requires_grad() || bias.requires_grad()) {
            if (gain.requires_grad()) gain.ensure_grad();
            if (bias.requires_grad()) bias.ensure_grad();
            for (int i = 0; i < len; ++i) {
              T xhat = (xr[i] - mean) * invstd;
              if (gain.requires_grad()) gain.grad()[i] += gr[i] * xhat;
              if (bias.requires_grad()) bias.grad()[i] += gr[i];
            }
          }
          if (x.requires_grad()) {
            x.ensure_grad();
            T* gx = x.grad() + r * len;
            double sum_dx = 0.0, sum_dx_xhat = 0.0;
            for (int i = 0; i < len; ++i) {
              double dxhat = static_cast<double>(gr[i]) * pg[i];
              double xhat = (static_cast<double>(xr[i]) - mean) * invstd;
              sum_dx += dxhat;
              sum_dx_xhat += dxhat * xhat;
            }
            for (int i = 0; i < len; ++i) {
              double dxhat = static_cast<double>(gr[i]) * pg[i];
              double xhat = (static_cast<double>(xr[i]) - mean) * invstd;
              gx[i] += static_cast<T>(invstd * (dxhat - sum_dx / len - xhat * sum_dx_xhat / len));
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// convolution (NHWC) and spatial helpers
// ---------------------------------------------------------------------------

namespace detail {

// reusable per-thread scratch, avoids remapping large buffers every call
template <typename T>
inline std::vector<T>& conv_scratch(int which) {
  thread_local std::vector<T> bufs[2];
  return bufs[static_cast<size_t>(which)];
}

// patch matrix for one batch item: [OH*OW, kh*kw*C]
template <typename T>
inline void im2col_item(const T* x_item, T* col, int H, int W, int C, int kh, int kw, int OH, int OW,
                        int stride, int pad) {
  int cols = kh * kw * C;
  for (int64_t r = 0; r < static_cast<int64_t>(OH) * OW; ++r) {
    int ow = static_cast<int>(r % OW);
    int oh = static_cast<int>(r / OW);
    T* dst = col + r * cols;
    for (int i = 0; i < kh; ++i) {
      int y = oh * stride + i - pad;
      for (int j = 0; j < kw; ++j) {
        int xx = ow * stride + j - pad;
        T* d = dst + (static_cast<int64_t>(i) * kw + j) * C;
        if (y < 0 || y >= H || xx < 0 || xx >= W) {
          std::fill(d, d + C, T(0));
        } else {
          const T* s = x_item + ((static_cast<int64_t>(y)) * W + xx) * C;
          std::copy(s, s + C, d);
        }
      }
    }
  }
}

}  // namespace detail

// x: [B, H, W, Cin], kernels: [kh, kw, Cin, Cout]; zero padding.
// Runs one batch item at a time through a reusable patch buffer; the backward
// pass rebuilds patches instead of keeping them on the tape.
template <typename T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> kernels, int stride, int pad,
                 Tensor<T> bias = Tensor<T>()) {
  if (x.ndim() != 4) throw DimensionError("conv2d: input must be [B,H,W,C]");
  if (kernels.ndim() != 4) throw DimensionError("conv2d: kernels must be [kh,kw,Cin,Cout]");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  int kh = kernels.dim(0), kw = kernels.dim(1), cin = kernels.dim(2), cout = kernels.dim(3);
  if (cin != C) throw DimensionError("conv2d: channel mismatch");
  if (H + 2 * pad < kh || W + 2 * pad < kw) throw DimensionError("conv2d: kernel larger than padded input");
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  if (bias.defined() && bias.numel() != cout) throw DimensionError("conv2d: bias length");

  int64_t item_rows = static_cast<int64_t>(OH) * OW;
  int cols = kh * kw * C;
  std::vector<T> out(static_cast<size_t>(B) * item_rows * cout);
  const T* px = x.data();
  const T* pk = kernels.data();
  const T* pb = bias.defined() ? bias.data() : nullptr;
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    std::vector<T>& col = detail::conv_scratch<T>(0);
    col.resize(static_cast<size_t>(item_rows) * cols);
    detail::im2col_item(px + static_cast<int64_t>(b) * H * W * C, col.data(), H, W, C, kh, kw, OH, OW, stride,
                        pad);
    T* ob = out.data() + static_cast<int64_t>(b) * item_rows * cout;
    gemm_nn(col.data(), pk, ob, static_cast<int>(item_rows), cols, cout, false);
    if (pb) {
      for (int64_t r = 0; r < item_rows; ++r) {
        T* o = ob + r * cout;
        for (int j = 0; j < cout; ++j) o[j] += pb[j];
      }
    }
  }

  Shape out_shape{B, OH, OW, cout};
  std::vector<Tensor<T>> parents =
      bias.defined() ? std::vector<Tensor<T>>{x, kernels, bias} : std::vector<Tensor<T>>{x, kernels};
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), std::move(parents),
      [x, kernels, bias, item_rows, cols, cout, B, H, W, C, kh, kw, OH, OW, stride, pad](
          TensorNode<T>& self) mutable {
        const T* g = self.grad.data();
        const T* px = x.data();
        bool need_w = kernels.requires_grad();
        bool need_x = x.requires_grad();
        if (need_w) kernels.ensure_grad();
        if (need_x) x.ensure_grad();
        int threads = 1;
#ifdef _OPENMP
        if (B > 1) threads = std::min(omp_get_max_threads(), B);
#endif
        // per-thread kernel-gradient partials, reduced in thread order
        std::vector<T> gw_partials;
        if (need_w) gw_partials.assign(static_cast<size_t>(threads) * cols * cout, T(0));
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1)
        for (int b = 0; b < B; ++b) {
#ifdef _OPENMP
          int tid = omp_in_parallel() ? omp_get_thread_num() : 0;
#else
          int tid = 0;
#endif
          std::vector<T>& col = detail::conv_scratch<T>(0);
          col.resize(static_cast<size_t>(item_rows) * cols);
          detail::im2col_item(px + static_cast<int64_t>(b) * H * W * C, col.data(), H, W, C, kh, kw, OH, OW,
                              stride, pad);
          const T* gb_rows = g + static_cast<int64_t>(b) * item_rows * cout;
          if (need_w)
            gemm_tn_acc_serial(col.data(), gb_rows,
                               gw_partials.data() + static_cast<int64_t>(tid) * cols * cout, 0, item_rows,
                               cols, cout);
          if (need_x) {
            std::vector<T>& gcol = detail::conv_scratch<T>(1);
            gcol.resize(static_cast<size_t>(item_rows) * cols);
            gemm_nt(gb_rows, kernels.data(), gcol.data(), static_cast<int>(item_rows), cout, cols, false);
            T* gx = x.grad() + static_cast<int64_t>(b) * H * W * C;
            for (int64_t rr = 0; rr < item_rows; ++rr) {
              int ow = static_cast<int>(rr % OW);
              int oh = static_cast<int>(rr / OW);
              const T* src = gcol.data() + rr * cols;
              for (int i = 0; i < kh; ++i) {
                int y = oh * stride + i - pad;
                if (y < 0 || y >= H) continue;
                for (int j = 0; j < kw; ++j) {
                  int xx = ow * stride + j - pad;
                  if (xx < 0 || xx >= W) continue;
                  const T* s = src + (static_cast<int64_t>(i) * kw + j) * C;
                  T* d = gx + (static_cast<int64_t>(y) * W + xx) * C;
                  for (int c = 0; c < C; ++c) d[c] += s[c];
                }
              }
            }
          }
        }
        if (need_w) {
          T* gw = kernels.grad();
          for (int t = 0; t < threads; ++t) {
            const T* p = gw_partials.data() + static_cast<int64_t>(t) * cols * cout;
            for (int64_t i = 0; i < static_cast<int64_t>(cols) * cout; ++i) gw[i] += p[i];
          }
        }
        if (bias.defined() && bias.requires_grad()) {
          bias.ensure_grad();
          T* gbias = bias.grad();
          for (int64_t r = 0; r < static_cast<int64_t>(B) * item_rows; ++r) {
            const T* gr = g + r * cout;
            for (int j = 0; j < cout; ++j) gbias[j] += gr[j];
          }
        }
      });
}

// x: [B, H, W, C] -> [B, 2H, 2W, C]
template <typename T>
Tensor<T> upsample_nearest2(Tensor<T> x) {
  if (x.ndim() != 4) throw DimensionError("upsample_nearest2: input must be [B,H,W,C]");
  int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Shape out_shape{B, 2 * H, 2 * W, C};
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx) {
        const T* s = px + ((static_cast<int64_t>(b) * H + y / 2) * W + xx / 2) * C;
        T* d = out.data() + ((static_cast<int64_t>(b) * 2 * H + y) * 2 * W + xx) * C;
        std::copy(s, s + C, d);
      }
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x},
                                [x, B, H, W, C](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.ensure_grad();
                                  T* gx = x.grad();
                                  const T* g = self.grad.data();
                                  for (int b = 0; b < B; ++b)
                                    for (int y = 0; y < 2 * H; ++y)
                                      for (int xx = 0; xx < 2 * W; ++xx) {
                                        const T* s = g + ((static_cast<int64_t>(b) * 2 * H + y) * 2 * W + xx) * C;
                                        T* d = gx + ((static_cast<int64_t>(b) * H + y / 2) * W + xx / 2) * C;
                                        for (int c = 0; c < C; ++c) d[c] += s[c];
                                      }
                                });
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Max over checked coordinates of |analytic - central| / (|analytic| + |central| + eps).
// coord_limit > 0 checks a deterministic random subset of coordinates.
template <typename T>
double grad_check(const std::function<Tensor<T>(Tensor<T>&)>& f, Tensor<T> x, double step,
                  int64_t coord_limit = 0, uint64_t subsample_seed = 17) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> y = f(x);
  if (y.numel() != 1) throw DimensionError("grad_check: f must be scalar-valued");
  backward(y);
  std::vector<T> analytic = x.grad_vec();
  if (analytic.empty()) analytic.assign(static_cast<size_t>(x.numel()), T(0));

  std::vector<int64_t> coords;
  if (coord_limit > 0 && coord_limit < x.numel()) {
    Rng rng(subsample_seed);
    std::unordered_set<int64_t> chosen;
    while (static_cast<int64_t>(chosen.size()) < coord_limit)
      chosen.insert(rng.uniform_int(0, x.numel() - 1));
    coords.assign(chosen.begin(), chosen.end());
    std::sort(coords.begin(), coords.end());
  } else {
    coords.resize(static_cast<size_t>(x.numel()));
    std::iota(coords.begin(), coords.end(), 0);
  }

  double max_rel = 0.0;
  const double eps = 1e-12;
  NoGradGuard ng;
  for (int64_t c : coords) {
    T saved = x.data()[c];
    x.data()[c] = saved + static_cast<T>(step);
    double fp = static_cast<double>(f(x).item());
    x.data()[c] = saved - static_cast<T>(step);
    double fm = static_cast<double>(f(x).item());
    x.data()[c] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite function value");
    double central = (fp - fm) / (2.0 * step);
    double a = static_cast<double>(analytic[static_cast<size_t>(c)]);
    if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
    double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + eps);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace dithead
