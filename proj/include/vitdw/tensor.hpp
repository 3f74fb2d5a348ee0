#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "vitdw/common.hpp"
#include "vitdw/threading.hpp"

namespace vitdw {

template <typename T>
class Tape;

namespace detail {

// Grad bookkeeping shared by all shallow copies of a tensor. node_id links the
// tensor into the tape identified by tape_serial; serials are process-unique
// so a tensor can never alias a node on a later tape.
template <typename T>
struct GradState {
  bool requires_grad = false;
  std::vector<T> grad;
  uint64_t tape_serial = 0;
  int64_t node_id = -1;
};

inline Shape strides_of(const Shape& shape) {
  Shape strides(shape.size());
  int64_t s = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    strides[i] = s;
    s *= shape[i];
  }
  return strides;
}

}  // namespace detail

// N-dimensional row-major tensor. Copies are shallow: the flat data buffer and
// the grad state are shared, and buffers are treated as immutable once an op
// has produced them. data_mut() exists for leaf initialization, optimizer
// updates, and BatchNorm running statistics only.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), std::vector<T>{});
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape), std::vector<T>{});
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    check_shape(::vitdw::numel(shape) == static_cast<int64_t>(values.size()),
                "tensor data length " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
    return Tensor(std::move(shape), std::move(values));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::span<T> data_mut() { return {data_->data(), data_->size()}; }

  T item() const {
    check_contract(numel() == 1, "item() requires a scalar tensor, got shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool requires_grad() const { return state_ && state_->requires_grad; }

  Tensor& set_requires_grad(bool value) {
    state_->requires_grad = value;
    if (value && state_->grad.empty()) state_->grad.assign(data_->size(), T(0));
    return *this;
  }

  // Accumulated gradient; zeros until a backward pass reaches this leaf.
  std::span<const T> grad() const {
    check_contract(requires_grad(), "grad() on a tensor without requires_grad");
    if (state_->grad.empty()) state_->grad.assign(data_->size(), T(0));
    return {state_->grad.data(), state_->grad.size()};
  }

  void zero_grad() {
    if (state_ && !state_->grad.empty()) std::fill(state_->grad.begin(), state_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor t(shape_, std::vector<T>(*data_));
    return t;
  }

 private:
  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))),
        state_(std::make_shared<detail::GradState<T>>()) {
    const int64_t n = ::vitdw::numel(shape_);
    check_shape(n >= 0, "negative dimension in shape " + shape_str(shape_));
    if (data_->empty()) data_->assign(static_cast<size_t>(n), T(0));
  }

  // reshape() shares the buffer; everything else copies.
  Tensor(Shape shape, std::shared_ptr<std::vector<T>> shared)
      : shape_(std::move(shape)),
        data_(std::move(shared)),
        state_(std::make_shared<detail::GradState<T>>()) {}

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<detail::GradState<T>> state_;

  friend class Tape<T>;
  template <typename U>
  friend Tensor<U> reshape(const Tensor<U>& x, Shape new_shape);
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& x) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>::from_data(x.shape(), std::move(out));
}

// Records one backward rule per op. Insertion order is the topological order;
// backward() replays the rules in reverse, skipping nodes whose output never
// received a gradient. Scratch gradients live per-call, so repeated backward()
// invocations accumulate into leaf grads (2 passes => exactly 2x one pass).
//
// Construction pushes the tape as the active one for this thread; destruction
// pops it. One tape per training thread.
template <typename T>
class Tape {
 public:
  Tape() : prev_(active_slot()) { active_slot() = this; }
  ~Tape() { active_slot() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  int64_t num_nodes() const { return static_cast<int64_t>(nodes_.size()); }

  bool tracks(const Tensor<T>& t) const {
    return t.state_->tape_serial == serial_ && t.state_->node_id >= 0;
  }

  // --- op recording surface (also the extension hook for custom ops) ---

  // Active tape if recording should happen for these inputs, else nullptr.
  static Tape* recording(std::initializer_list<const Tensor<T>*> inputs) {
    Tape* tape = active_slot();
    if (!tape || tape->in_backward_) return nullptr;
    for (const Tensor<T>* t : inputs) {
      if (t->requires_grad() || tape->tracks(*t)) return tape;
    }
    return nullptr;
  }

  // Registers an input tensor (leaf unless already produced on this tape).
  int64_t id_of(const Tensor<T>& t) {
    if (tracks(t)) return t.state_->node_id;
    return register_entry(t, /*leaf=*/true);
  }

  // Assigns a fresh id to an op output.
  int64_t id_of_output(Tensor<T>& t) { return register_entry(t, /*leaf=*/false); }

  void push(std::vector<int64_t> inputs, int64_t output, std::function<void(Tape&)> rule) {
    nodes_.push_back({std::move(inputs), output, std::move(rule)});
  }

  // Scratch gradient of a node during backward. The read form requires the
  // buffer to exist; the accumulate form creates it zero-filled.
  const std::vector<T>& grad_of(int64_t id) const { return grads_[static_cast<size_t>(id)]; }

  std::vector<T>& grad_accum(int64_t id, int64_t n) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g.assign(static_cast<size_t>(n), T(0));
    return g;
  }

  bool grad_present(int64_t id) const { return !grads_[static_cast<size_t>(id)].empty(); }

  // --- backward pass ---

  void backward(const Tensor<T>& loss) {
    check_contract(loss.numel() == 1,
                   "backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    check_contract(tracks(loss), "backward() loss was not produced under this tape");
    in_backward_ = true;
    grads_.assign(entries_.size(), {});
    grad_accum(loss.state_->node_id, 1)[0] = T(1);
    for (size_t i = nodes_.size(); i-- > 0;) {
      const Node& node = nodes_[i];
      if (!grad_present(node.output)) continue;
      node.rule(*this);
    }
    for (size_t id = 0; id < entries_.size(); ++id) {
      const Entry& e = entries_[id];
      if (!e.leaf || !e.tensor.requires_grad() || grads_[id].empty()) continue;
      auto& dst = e.tensor.state_->grad;
      if (dst.empty()) dst.assign(e.tensor.data_->size(), T(0));
      const auto& src = grads_[id];
      for (size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
    grads_.clear();
    in_backward_ = false;
  }

 private:
  struct Node {
    std::vector<int64_t> inputs;
    int64_t output;
    std::function<void(Tape&)> rule;
  };
  struct Entry {
    Tensor<T> tensor;
    bool leaf;
  };

  int64_t register_entry(const Tensor<T>& t, bool leaf) {
    const int64_t id = static_cast<int64_t>(entries_.size());
    entries_.push_back({t, leaf});
    t.state_->tape_serial = serial_;
    t.state_->node_id = id;
    return id;
  }

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  static uint64_t next_serial() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
  std::vector<std::vector<T>> grads_;
  Tape* prev_ = nullptr;
  uint64_t serial_ = next_serial();
  bool in_backward_ = false;
};

// Backward through the innermost active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  check_contract(Tape<T>::active() != nullptr, "backward() called with no active tape");
  Tape<T>::active()->backward(loss);
}

namespace detail {

// C[M,N] = A[M,K] * B[K,N] (row-major, already packed), register-tiled 4x32.
// Work is partitioned over fixed four-row groups aligned to absolute row
// indices and every output element accumulates over k in order, so results
// are bitwise identical for any thread count.
template <typename T>
void gemm_packed(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  constexpr int64_t JT = 32;
  auto row_block = [=](int64_t i, int64_t rows) {
    if (rows == 4) {
      const T* a0 = a + i * k;
      const T* a1 = a0 + k;
      const T* a2 = a1 + k;
      const T* a3 = a2 + k;
      T* c0 = c + i * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      int64_t j = 0;
      for (; j + JT <= n; j += JT) {
        T t0[JT], t1[JT], t2[JT], t3[JT];
        if (accumulate) {
          for (int64_t jj = 0; jj < JT; ++jj) {
            t0[jj] = c0[j + jj];
            t1[jj] = c1[j + jj];
            t2[jj] = c2[j + jj];
            t3[jj] = c3[j + jj];
          }
        } else {
          std::fill(t0, t0 + JT, T(0));
          std::fill(t1, t1 + JT, T(0));
          std::fill(t2, t2 + JT, T(0));
          std::fill(t3, t3 + JT, T(0));
        }
        for (int64_t kk = 0; kk < k; ++kk) {
          const T w0 = a0[kk], w1 = a1[kk], w2 = a2[kk], w3 = a3[kk];
          const T* br = b + kk * n + j;
          for (int64_t jj = 0; jj < JT; ++jj) {
            t0[jj] += w0 * br[jj];
            t1[jj] += w1 * br[jj];
            t2[jj] += w2 * br[jj];
            t3[jj] += w3 * br[jj];
          }
        }
        for (int64_t jj = 0; jj < JT; ++jj) {
          c0[j + jj] = t0[jj];
          c1[j + jj] = t1[jj];
          c2[j + jj] = t2[jj];
          c3[j + jj] = t3[jj];
        }
      }
      for (; j < n; ++j) {
        T t0 = accumulate ? c0[j] : T(0);
        T t1 = accumulate ? c1[j] : T(0);
        T t2 = accumulate ? c2[j] : T(0);
        T t3 = accumulate ? c3[j] : T(0);
        for (int64_t kk = 0; kk < k; ++kk) {
          const T bv = b[kk * n + j];
          t0 += a0[kk] * bv;
          t1 += a1[kk] * bv;
          t2 += a2[kk] * bv;
          t3 += a3[kk] * bv;
        }
        c0[j] = t0;
        c1[j] = t1;
        c2[j] = t2;
        c3[j] = t3;
      }
    } else {
      for (int64_t r = 0; r < rows; ++r) {
        T* crow = c + (i + r) * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + (i + r) * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          const T aik = arow[kk];
          const T* brow = b + kk * n;
          for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
      }
    }
  };
  const int64_t groups = (m + 3) / 4;
  auto run_groups = [&](int64_t begin, int64_t end) {
    for (int64_t g = begin; g < end; ++g) {
      const int64_t i = g * 4;
      row_block(i, std::min<int64_t>(4, m - i));
    }
  };
  if (groups >= 2 && m * k * n >= 1 << 15) {
    parallel_for(groups, run_groups);
  } else {
    run_groups(0, groups);
  }
}

template <typename T>
void transpose_2d(const T* src, T* dst, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// op(A)[M,K] * op(B)[K,N] with optional transposes, packing as needed. The
// pack scratch is thread-local, so per-batch calls do not churn the allocator.
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool trans_a, bool trans_b,
          bool accumulate) {
  thread_local std::vector<T> pack_a, pack_b;
  const T* ap = a;
  const T* bp = b;
  if (trans_a) {
    pack_a.resize(static_cast<size_t>(m * k));
    transpose_2d(a, pack_a.data(), k, m);
    ap = pack_a.data();
  }
  if (trans_b) {
    pack_b.resize(static_cast<size_t>(k * n));
    transpose_2d(b, pack_b.data(), n, k);
    bp = pack_b.data();
  }
  gemm_packed(ap, bp, c, m, k, n, accumulate);
}

// True when `small` equals the trailing dimensions of `big` (leading-batch
// broadcast; the only broadcast form this library supports).
inline bool is_suffix_shape(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Sums a gradient of the broadcast (big) shape back down to the suffix shape.
template <typename T>
void reduce_to_suffix(const std::vector<T>& g, int64_t small_n, std::vector<T>& dst) {
  for (size_t i = 0; i < g.size(); ++i) dst[i % static_cast<size_t>(small_n)] += g[i];
}

template <typename T, typename Fn>
void binary_forward(const Tensor<T>& a, const Tensor<T>& b, T* out, int64_t out_n, Fn fn) {
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const int64_t na = a.numel(), nb = b.numel();
  if (na == nb) {
    for (int64_t i = 0; i < out_n; ++i) out[i] = fn(pa[i], pb[i]);
  } else if (nb < na) {
    for (int64_t i = 0; i < out_n; ++i) out[i] = fn(pa[i], pb[i % nb]);
  } else {
    for (int64_t i = 0; i < out_n; ++i) out[i] = fn(pa[i % na], pb[i]);
  }
}

template <typename T>
Shape binary_out_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_suffix_shape(b.shape(), a.shape())) return a.shape();
  if (is_suffix_shape(a.shape(), b.shape())) return b.shape();
  fail(ErrorKind::shape, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " are not equal or leading-broadcastable");
}

inline int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  check_shape(a >= 0 && a < rank,
              "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (leading-batch broadcast only)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out_shape = detail::binary_out_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  detail::binary_forward(a, b, out.data_mut().data(), out.numel(), [](T x, T y) { return x + y; });
  if (auto* tape = Tape<T>::recording({&a, &b})) {
    const int64_t ia = tape->id_of(a), ib = tape->id_of(b);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    const int64_t na = a.numel(), nb = b.numel();
    tape->push({ia, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& da = t.grad_accum(ia, na);
      auto& db = t.grad_accum(ib, nb);
      if (na == static_cast<int64_t>(g.size())) {
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      } else {
        detail::reduce_to_suffix(g, na, da);
      }
      if (nb == static_cast<int64_t>(g.size())) {
        for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      } else {
        detail::reduce_to_suffix(g, nb, db);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out_shape = detail::binary_out_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  detail::binary_forward(a, b, out.data_mut().data(), out.numel(), [](T x, T y) { return x - y; });
  if (auto* tape = Tape<T>::recording({&a, &b})) {
    const int64_t ia = tape->id_of(a), ib = tape->id_of(b);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    const int64_t na = a.numel(), nb = b.numel();
    tape->push({ia, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& da = t.grad_accum(ia, na);
      auto& db = t.grad_accum(ib, nb);
      if (na == static_cast<int64_t>(g.size())) {
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      } else {
        detail::reduce_to_suffix(g, na, da);
      }
      if (nb == static_cast<int64_t>(g.size())) {
        for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      } else {
        for (size_t i = 0; i < g.size(); ++i) db[i % static_cast<size_t>(nb)] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out_shape = detail::binary_out_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  detail::binary_forward(a, b, out.data_mut().data(), out.numel(), [](T x, T y) { return x * y; });
  if (auto* tape = Tape<T>::recording({&a, &b})) {
    const int64_t ia = tape->id_of(a), ib = tape->id_of(b);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    Tensor<T> av = a, bv = b;
    tape->push({ia, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      const int64_t na = av.numel(), nb = bv.numel();
      auto& da = t.grad_accum(ia, na);
      auto& db = t.grad_accum(ib, nb);
      const T* pa = av.data().data();
      const T* pb = bv.data().data();
      for (size_t i = 0; i < g.size(); ++i) {
        da[i % static_cast<size_t>(na)] += g[i] * pb[i % static_cast<size_t>(nb)];
        db[i % static_cast<size_t>(nb)] += g[i] * pa[i % static_cast<size_t>(na)];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  const T sv = static_cast<T>(s);
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * sv;
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    const int64_t n = x.numel();
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, n);
      for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * sv;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  const T cv = static_cast<T>(c);
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] + cv;
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    const int64_t n = x.numel();
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, n);
      for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return out;
}

// Elementwise map with caller-supplied value and derivative functions. Used
// for activation experiments and as the extension point for test fixtures.
template <typename T>
Tensor<T> custom_unary(const Tensor<T>& x, const std::function<double(double)>& fn,
                       const std::function<double(double)>& dfn) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = static_cast<T>(fn(static_cast<double>(px[i])));
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    Tensor<T> xv = x;
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, xv.numel());
      const T* p = xv.data().data();
      for (size_t i = 0; i < g.size(); ++i)
        dx[i] += g[i] * static_cast<T>(dfn(static_cast<double>(p[i])));
    });
  }
  return out;
}

// Exact GELU, x * Phi(x) with Phi the standard normal CDF (erf form). The
// forward CDF is kept for the backward pass.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440L);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  const int64_t n = x.numel();
  const bool recording = Tape<T>::recording({&x}) != nullptr;
  auto cdf_save = recording ? std::make_shared<std::vector<T>>(static_cast<size_t>(n))
                            : std::shared_ptr<std::vector<T>>();
  parallel_for(n, [&](int64_t begin, int64_t end) {
    for (int64_t i = begin; i < end; ++i) {
      const T v = px[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
      if (cdf_save) (*cdf_save)[static_cast<size_t>(i)] = cdf;
      po[i] = v * cdf;
    }
  });
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    Tensor<T> xv = x;
    tape->push({ix}, io, [=](Tape<T>& t) {
      constexpr T kInvSqrt2Pi = T(0.39894228040143267794L);
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, xv.numel());
      const T* p = xv.data().data();
      const T* cdfp = cdf_save->data();
      T* d = dx.data();
      parallel_for(static_cast<int64_t>(g.size()), [&](int64_t begin, int64_t end) {
        for (int64_t i = begin; i < end; ++i) {
          const T v = p[i];
          const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
          d[i] += g[static_cast<size_t>(i)] * (cdfp[i] + v * pdf);
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a[..., m, k] * b[..., k, n]. Leading dimensions must match, or either
// operand may be rank-2 (broadcast across the other's batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.rank() >= 2 && b.rank() >= 2,
              "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                  shape_str(b.shape()));
  const int64_t m = a.dim(a.rank() - 2), ka = a.dim(a.rank() - 1);
  const int64_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  check_shape(ka == kb, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const bool b_bcast = lead_b.empty() && !lead_a.empty();
  const bool a_bcast = lead_a.empty() && !lead_b.empty();
  check_shape(lead_a == lead_b || a_bcast || b_bcast,
              "matmul: leading dimensions not broadcastable, " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const Shape& lead = a_bcast ? lead_b : lead_a;
  const int64_t batch = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(out_shape);

  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data_mut().data();
  const int64_t sa = a_bcast ? 0 : m * ka;
  const int64_t sb = b_bcast ? 0 : ka * n;
  if (batch == 1) {
    detail::gemm_packed(pa, pb, pc, m, ka, n, false);
  } else if (b_bcast) {
    // collapse batch into rows: [batch*m, k] * [k, n]
    detail::gemm_packed(pa, pb, pc, batch * m, ka, n, false);
  } else {
    parallel_for(batch, [&](int64_t begin, int64_t end) {
      for (int64_t bi = begin; bi < end; ++bi)
        detail::gemm_packed(pa + bi * sa, pb + bi * sb, pc + bi * m * n, m, ka, n, false);
    });
  }

  if (auto* tape = Tape<T>::recording({&a, &b})) {
    const int64_t ia = tape->id_of(a), ib = tape->id_of(b);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    Tensor<T> av = a, bv = b;
    tape->push({ia, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& da = t.grad_accum(ia, av.numel());
      auto& db = t.grad_accum(ib, bv.numel());
      const T* gp = g.data();
      const T* ap = av.data().data();
      const T* bp = bv.data().data();
      if (b_bcast || batch == 1) {
        const int64_t rows = batch * m;
        // dA = dC * B^T, dB = A^T * dC (accumulated over the whole batch)
        detail::gemm(gp, bp, da.data(), rows, n, ka, false, true, true);
        detail::gemm(ap, gp, db.data(), ka, rows, n, true, false, true);
      } else if (a_bcast) {
        for (int64_t bi = 0; bi < batch; ++bi) {
          detail::gemm(gp + bi * m * n, bp + bi * sb, da.data(), m, n, ka, false, true, true);
          detail::gemm(ap, gp + bi * m * n, db.data() + bi * sb, ka, m, n, true, false, true);
        }
      } else {
        parallel_for(batch, [&](int64_t begin, int64_t end) {
          for (int64_t bi = begin; bi < end; ++bi) {
            detail::gemm(gp + bi * m * n, bp + bi * sb, da.data() + bi * sa, m, n, ka, false, true,
                         true);
            detail::gemm(ap + bi * sa, gp + bi * m * n, db.data() + bi * sb, ka, m, n, true, false,
                         true);
          }
        });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  check_shape(numel(new_shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " has " +
                                                 std::to_string(x.numel()) + " elements, target " +
                                                 shape_str(new_shape) + " has " +
                                                 std::to_string(numel(new_shape)));
  Tensor<T> out(std::move(new_shape), x.data_);  // shares the buffer
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    const int64_t io = tape->id_of_output(out);
    const int64_t n = x.numel();
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, n);
      for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return out;
}

namespace detail {
// Swap of two axes as nested block copies. Viewing the shape as
// [outer, A, mid, B, inner] with A = shape[a0], B = shape[a1], the map is
// dst[o][b][m][a][i] = src[o][a][m][b][i]; inner runs are contiguous.
template <typename T>
void transpose_copy(const T* src, T* dst, const Shape& src_shape, int a0, int a1) {
  if (a0 == a1) {
    std::memcpy(dst, src, static_cast<size_t>(numel(src_shape)) * sizeof(T));
    return;
  }
  if (a0 > a1) std::swap(a0, a1);
  int64_t outer = 1, mid = 1, inner = 1;
  for (int d = 0; d < a0; ++d) outer *= src_shape[static_cast<size_t>(d)];
  for (int d = a0 + 1; d < a1; ++d) mid *= src_shape[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(a1) + 1; d < src_shape.size(); ++d)
    inner *= src_shape[d];
  const int64_t na = src_shape[static_cast<size_t>(a0)];
  const int64_t nb = src_shape[static_cast<size_t>(a1)];
  parallel_for(outer * na, [&](int64_t begin, int64_t end) {
    for (int64_t oa = begin; oa < end; ++oa) {
      const int64_t o = oa / na, a = oa % na;
      for (int64_t m = 0; m < mid; ++m) {
        const T* s = src + (((o * na + a) * mid + m) * nb) * inner;
        for (int64_t b = 0; b < nb; ++b) {
          T* d = dst + (((o * nb + b) * mid + m) * na + a) * inner;
          if (inner == 1) {
            *d = s[b];
          } else {
            std::memcpy(d, s + b * inner, static_cast<size_t>(inner) * sizeof(T));
          }
        }
      }
    }
  });
}
}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const int a0 = detail::normalize_axis(axis0, x.rank());
  const int a1 = detail::normalize_axis(axis1, x.rank());
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<size_t>(a0)], out_shape[static_cast<size_t>(a1)]);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  detail::transpose_copy(x.data().data(), out.data_mut().data(), x.shape(), a0, a1);
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> o = out;
    const int64_t io = tape->id_of_output(o);
    const Shape oshape = out_shape;
    const int64_t n = x.numel();
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, n);
      std::vector<T> gt(g.size());
      detail::transpose_copy(g.data(), gt.data(), oshape, a0, a1);
      for (size_t i = 0; i < gt.size(); ++i) dx[i] += gt[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t length) {
  const int a = detail::normalize_axis(axis, x.rank());
  check_shape(start >= 0 && length >= 0 && start + length <= x.dim(a),
              "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                  ") out of bounds for axis " + std::to_string(axis) + " of " +
                  shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(a)] = length;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const Shape st = detail::strides_of(x.shape());
  const int64_t inner = st[static_cast<size_t>(a)];
  const int64_t outer = x.numel() / (inner * x.dim(a));
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(po + o * length * inner, px + (o * x.dim(a) + start) * inner,
                static_cast<size_t>(length * inner) * sizeof(T));
  }
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    const int64_t n = x.numel(), da = x.dim(a);
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, n);
      for (int64_t o = 0; o < outer; ++o) {
        const T* gs = g.data() + o * length * inner;
        T* ds = dx.data() + (o * da + start) * inner;
        for (int64_t i = 0; i < length * inner; ++i) ds[i] += gs[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  check_shape(!parts.empty(), "concat: no inputs");
  const int a = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == parts[0].rank(), "concat: rank mismatch");
    for (int d = 0; d < p.rank(); ++d) {
      if (d != a)
        check_shape(p.dim(d) == parts[0].dim(d),
                    "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                        shape_str(parts[0].shape()) + " outside axis " + std::to_string(axis));
    }
    total += p.dim(a);
  }
  out_shape[static_cast<size_t>(a)] = total;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const Shape st = detail::strides_of(out_shape);
  const int64_t inner = st[static_cast<size_t>(a)];
  const int64_t outer = out.numel() / (inner * total);
  T* po = out.data_mut().data();
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t len = p.dim(a);
    const T* pp = p.data().data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(po + (o * total + offset) * inner, pp + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(T));
    }
    offset += len;
  }
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tape<T>* tape = Tape<T>::active();
  bool record = false;
  if (tape) {
    for (const auto* p : ptrs)
      if (Tape<T>::recording({p})) record = true;
  }
  if (record) {
    std::vector<int64_t> ids;
    std::vector<int64_t> lens, sizes;
    for (const auto& p : parts) {
      ids.push_back(tape->id_of(p));
      lens.push_back(p.dim(a));
      sizes.push_back(p.numel());
    }
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    tape->push(ids, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      int64_t off = 0;
      for (size_t pi = 0; pi < ids.size(); ++pi) {
        auto& dp = t.grad_accum(ids[pi], sizes[pi]);
        for (int64_t o = 0; o < outer; ++o) {
          const T* gs = g.data() + (o * total + off) * inner;
          T* ds = dp.data() + o * lens[pi] * inner;
          for (int64_t i = 0; i < lens[pi] * inner; ++i) ds[i] += gs[i];
        }
        off += lens[pi];
      }
    });
  }
  return out;
}

// Prepends a new leading axis of size n (tiled copies). Backward sums tiles.
template <typename T>
Tensor<T> repeat_leading(const Tensor<T>& x, int64_t n) {
  check_shape(n >= 1, "repeat_leading: count must be >= 1");
  Shape out_shape;
  out_shape.push_back(n);
  for (int64_t d : x.shape()) out_shape.push_back(d);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const int64_t block = x.numel();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(po + i * block, x.data().data(), static_cast<size_t>(block) * sizeof(T));
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, block);
      for (int64_t i = 0; i < n; ++i) {
        const T* gs = g.data() + i * block;
        for (int64_t j = 0; j < block; ++j) dx[static_cast<size_t>(j)] += gs[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
struct AxisSplit {
  int64_t outer, count, inner;
};

template <typename T>
AxisSplit<T> split_axis(const Tensor<T>& x, int axis) {
  const Shape st = strides_of(x.shape());
  const int64_t inner = st[static_cast<size_t>(axis)];
  const int64_t count = x.dim(axis);
  return {x.numel() / (inner * count), count, inner};
}
}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  const int a = detail::normalize_axis(axis, x.rank());
  const auto sp = detail::split_axis(x, a);
  Shape out_shape;
  for (int d = 0; d < x.rank(); ++d) {
    if (d == a) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(d));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t c = 0; c < sp.count; ++c)
      for (int64_t i = 0; i < sp.inner; ++i)
        po[o * sp.inner + i] += px[(o * sp.count + c) * sp.inner + i];
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    const int64_t n = x.numel();
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, n);
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t c = 0; c < sp.count; ++c)
          for (int64_t i = 0; i < sp.inner; ++i)
            dx[static_cast<size_t>((o * sp.count + c) * sp.inner + i)] += g[static_cast<size_t>(o * sp.inner + i)];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  const int a = detail::normalize_axis(axis, x.rank());
  return scale(reduce_sum(x, a, keepdim), 1.0 / static_cast<double>(x.dim(a)));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* px = x.data().data();
  T acc = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
  out.data_mut()[0] = acc;
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    const int64_t n = x.numel();
    tape->push({ix}, io, [=](Tape<T>& t) {
      const T g = t.grad_of(io)[0];
      auto& dx = t.grad_accum(ix, n);
      for (auto& v : dx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

// Max-subtracted softmax along `axis`; slices sum to 1 and stay finite for any
// finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int a = detail::normalize_axis(axis, x.rank());
  const auto sp = detail::split_axis(x, a);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  parallel_for(sp.outer, [&](int64_t begin, int64_t end) {
    for (int64_t o = begin; o < end; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.count * sp.inner + i;
        T mx = px[base];
        for (int64_t c = 1; c < sp.count; ++c) mx = std::max(mx, px[base + c * sp.inner]);
        T denom = T(0);
        for (int64_t c = 0; c < sp.count; ++c) {
          const T e = std::exp(px[base + c * sp.inner] - mx);
          po[base + c * sp.inner] = e;
          denom += e;
        }
        const T inv = T(1) / denom;
        for (int64_t c = 0; c < sp.count; ++c) po[base + c * sp.inner] *= inv;
      }
    }
  });
  if (auto* tape = Tape<T>::recording({&x})) {
    const int64_t ix = tape->id_of(x);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    Tensor<T> yv = out;
    tape->push({ix}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, yv.numel());
      const T* y = yv.data().data();
      T* d = dx.data();
      parallel_for(sp.outer, [&](int64_t begin, int64_t end) {
        for (int64_t o = begin; o < end; ++o) {
          for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * sp.count * sp.inner + i;
            T dot = T(0);
            for (int64_t c = 0; c < sp.count; ++c) {
              const int64_t k = base + c * sp.inner;
              dot += g[static_cast<size_t>(k)] * y[k];
            }
            for (int64_t c = 0; c < sp.count; ++c) {
              const int64_t k = base + c * sp.inner;
              d[k] += y[k] * (g[static_cast<size_t>(k)] - dot);
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int64_t>& rows) {
  check_shape(table.rank() == 2, "embedding_lookup: table must be rank 2, got " +
                                     shape_str(table.shape()));
  const int64_t vocab = table.dim(0), dim = table.dim(1);
  for (int64_t r : rows)
    check_contract(r >= 0 && r < vocab,
                   "embedding_lookup: row " + std::to_string(r) + " out of range [0, " +
                       std::to_string(vocab) + ")");
  Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(rows.size()), dim});
  const T* pt = table.data().data();
  T* po = out.data_mut().data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(po + static_cast<int64_t>(i) * dim, pt + rows[i] * dim,
                static_cast<size_t>(dim) * sizeof(T));
  if (auto* tape = Tape<T>::recording({&table})) {
    const int64_t it = tape->id_of(table);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    const std::vector<int64_t> rows_copy = rows;
    const int64_t n = table.numel();
    tape->push({it}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dt = t.grad_accum(it, n);
      for (size_t i = 0; i < rows_copy.size(); ++i) {
        const T* gs = g.data() + static_cast<int64_t>(i) * dim;
        T* ds = dt.data() + rows_copy[i] * dim;
        for (int64_t j = 0; j < dim; ++j) ds[j] += gs[j];
      }
    });
  }
  return out;
}

// Row argmax for [rows, cols] tensors; ties resolve to the lowest index.
template <typename T>
std::vector<int64_t> argmax_rows(const Tensor<T>& x) {
  check_shape(x.rank() == 2, "argmax_rows: expected rank 2, got " + shape_str(x.shape()));
  const int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<int64_t> out(static_cast<size_t>(rows));
  const T* p = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = p + r * cols;
    out[static_cast<size_t>(r)] =
        static_cast<int64_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

}  // namespace vitdw
