#pragma once

#include <cblas.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "sinklab/common.hpp"

namespace sinklab {

// Dense row-major array. `store` is immutable once a value has entered a
// forward computation; parameters are mutated in place only between
// training steps, when no tape references them.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::shared_ptr<std::vector<T>> store)
      : shape_(std::move(shape)), store_(std::move(store)) {}

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::make_shared<std::vector<T>>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::make_shared<std::vector<T>>(n, value));
  }
  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    return Tensor(std::move(shape), std::make_shared<std::vector<T>>(std::move(data)));
  }
  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return store_ ? static_cast<int64_t>(store_->size()) : 0; }
  const T* data() const { return store_->data(); }
  T* mutable_data() { return store_->data(); }
  const std::shared_ptr<std::vector<T>>& store() const { return store_; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*store_)[0];
  }

  int64_t node = -1;          // tape node id, -1 when not recorded
  uint64_t tape_epoch = 0;    // which tape assigned `node`; 0 matches no tape
  bool requires_grad = false;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> store_;
};

template <typename T>
inline void check_all_finite(const char* op, const T* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i]))
      throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                         std::to_string(i));
  }
}

template <typename T>
inline void check_all_finite(const char* op, const Tensor<T>& t) {
  check_all_finite(op, t.data(), t.numel());
}

// Row-major GEMM over float/double, forced single-threaded at startup
// (see force_single_thread_blas below).
inline void gemm_raw(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
                     const float* a, int64_t lda, const float* b, int64_t ldb, float beta, float* c,
                     int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}
inline void gemm_raw(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
                     const double* a, int64_t lda, const double* b, int64_t ldb, double beta,
                     double* c, int64_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

inline void force_single_thread_blas() {
#ifdef OPENBLAS_VERSION
  openblas_set_num_threads(1);
#else
  extern "C" void openblas_set_num_threads(int);
  openblas_set_num_threads(1);
#endif
}

// Reverse-mode tape. One tape per training step, single-threaded.
// Gradients accumulate (sum over uses); backward visits nodes in reverse
// creation order, which is a reverse topological order for define-by-run
// graphs.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const std::vector<T>&)>;

  Tape() : epoch_(next_epoch()) {}

  // A tensor's node id is only meaningful for the tape that assigned it;
  // epochs let watch() and the op recorders ignore ids left over from a
  // previous (possibly destroyed) tape.
  uint64_t epoch() const { return epoch_; }

  // Registers a leaf (typically a parameter). Idempotent per tensor and tape.
  int64_t watch(Tensor<T>& t) {
    if (t.node >= 0 && t.tape_epoch == epoch_) return t.node;
    t.node = add_node(t.numel(), /*leaf=*/true, nullptr);
    t.tape_epoch = epoch_;
    t.requires_grad = true;
    leaves_.push_back(t.node);
    return t.node;
  }

  int64_t record(int64_t out_numel, BackFn fn) {
    return add_node(out_numel, /*leaf=*/false, std::move(fn));
  }

  // grads[node] += g
  void accumulate(int64_t node, const T* g, int64_t n) {
    auto& buf = grad_buffer(node);
    for (int64_t i = 0; i < n; ++i) buf[i] += g[i];
  }

  std::vector<T>& grad_buffer(int64_t node) {
    auto& buf = grads_[static_cast<size_t>(node)];
    if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), T(0));
    return buf;
  }

  void backward(const Tensor<T>& root) {
    if (consumed_) throw ContractError("backward already run on this tape");
    if (root.node < 0 || root.tape_epoch != epoch_)
      throw ContractError("backward root is not on this tape");
    if (root.numel() != 1)
      throw ContractError("backward root must be scalar, got shape " + shape_str(root.shape()));
    consumed_ = true;
    grads_.resize(nodes_.size());
    grad_buffer(root.node)[0] = T(1);
    for (int64_t i = root.node; i >= 0; --i) {
      auto& node = nodes_[static_cast<size_t>(i)];
      auto& g = grads_[static_cast<size_t>(i)];
      if (!g.empty() && node.back) node.back(*this, g);
      if (!node.leaf) {
        std::vector<T>().swap(g);  // free activations' grads as we go
        node.back = nullptr;
      }
    }
  }

  // Gradient of a watched leaf; zero-filled if the leaf was unused.
  const std::vector<T>& grad_of(const Tensor<T>& leaf) {
    if (leaf.node < 0 || leaf.tape_epoch != epoch_ ||
        !nodes_[static_cast<size_t>(leaf.node)].leaf)
      throw ContractError("grad_of: tensor is not a watched leaf of this tape");
    grads_.resize(nodes_.size());
    return grad_buffer(leaf.node);
  }

  const std::vector<int64_t>& leaves() const { return leaves_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    int64_t numel;
    bool leaf;
    BackFn back;
  };

  int64_t add_node(int64_t numel, bool leaf, BackFn fn) {
    nodes_.push_back(Node{numel, leaf, std::move(fn)});
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  static uint64_t next_epoch() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;  // starts at 1 so the default tensor epoch 0 never matches
  }

  uint64_t epoch_;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::vector<int64_t> leaves_;
  bool consumed_ = false;
};

template <typename T>
inline Tape<T>*& ambient_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

// RAII scope installing a tape for the ops below.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(ambient_tape<T>()) { ambient_tape<T>() = &tape; }
  ~TapeScope() { ambient_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <typename T>
inline bool tracked(const Tape<T>* tp, const Tensor<T>& t) {
  return t.node >= 0 && t.tape_epoch == tp->epoch();
}

// Node id of t on tape tp, or -1 when t is not recorded there. Ops capture
// this instead of t.node so ids assigned by earlier tapes are ignored.
template <typename T>
inline int64_t node_on(const Tape<T>* tp, const Tensor<T>& t) {
  return (tp && tracked(tp, t)) ? t.node : -1;
}

template <typename T, typename... Ts>
inline Tape<T>* active_tape(const Tensor<T>& first, const Ts&... rest) {
  Tape<T>* tp = ambient_tape<T>();
  if (!tp) return nullptr;
  bool any = tracked(tp, first) || (tracked(tp, rest) || ...);
  return any ? tp : nullptr;
}

template <typename T>
inline Tape<T>* active_tape(const Tensor<T>& only) {
  Tape<T>* tp = ambient_tape<T>();
  return (tp && tracked(tp, only)) ? tp : nullptr;
}

template <typename T>
inline void finish(Tensor<T>& out, Tape<T>* tp, typename Tape<T>::BackFn fn) {
  if (tp) {
    out.node = tp->record(out.numel(), std::move(fn));
    out.tape_epoch = tp->epoch();
    out.requires_grad = true;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor<T>::zeros({m, n});
  gemm_raw(false, false, m, n, k, T(1), a.data(), k, b.data(), n, T(0), out.mutable_data(), n);
  check_all_finite("matmul", out);

  Tape<T>* tp = detail::active_tape(a, b);
  auto as = a.store(), bs = b.store();
  int64_t an = detail::node_on(tp, a), bn = detail::node_on(tp, b);
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    if (an >= 0) {
      auto& da = t.grad_buffer(an);
      gemm_raw(false, true, m, k, n, T(1), g.data(), n, bs->data(), n, T(1), da.data(), k);
    }
    if (bn >= 0) {
      auto& db = t.grad_buffer(bn);
      gemm_raw(true, false, k, n, m, T(1), as->data(), k, g.data(), n, T(1), db.data(), n);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// elementwise ops; broadcasting is scalar-with-array or same-shape only

namespace detail {

template <typename T>
inline void binary_shapes(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() == 1 || b.numel() == 1) return;
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

template <typename T>
inline void reduce_or_copy(Tape<T>& t, int64_t node, int64_t node_numel, const std::vector<T>& g) {
  if (node_numel == 1 && static_cast<int64_t>(g.size()) > 1) {
    T s = 0;
    for (T v : g) s += v;
    t.accumulate(node, &s, 1);
  } else {
    t.accumulate(node, g.data(), static_cast<int64_t>(g.size()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::binary_shapes("add", a, b);
  const bool bs = b.numel() == 1 && a.numel() > 1;
  const bool as = a.numel() == 1 && b.numel() > 1;
  const Tensor<T>& big = as ? b : a;
  auto out = Tensor<T>::zeros(big.shape());
  const int64_t n = out.numel();
  T* o = out.mutable_data();
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t i = 0; i < n; ++i) o[i] = (as ? pa[0] : pa[i]) + (bs ? pb[0] : pb[i]);
  check_all_finite("add", out);

  Tape<T>* tp = detail::active_tape(a, b);
  int64_t an = detail::node_on(tp, a), bn = detail::node_on(tp, b), ann = a.numel(), bnn = b.numel();
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    if (an >= 0) detail::reduce_or_copy(t, an, ann, g);
    if (bn >= 0) detail::reduce_or_copy(t, bn, bnn, g);
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::binary_shapes("mul", a, b);
  const bool bs = b.numel() == 1 && a.numel() > 1;
  const bool as = a.numel() == 1 && b.numel() > 1;
  const Tensor<T>& big = as ? b : a;
  auto out = Tensor<T>::zeros(big.shape());
  const int64_t n = out.numel();
  T* o = out.mutable_data();
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t i = 0; i < n; ++i) o[i] = (as ? pa[0] : pa[i]) * (bs ? pb[0] : pb[i]);
  check_all_finite("mul", out);

  Tape<T>* tp = detail::active_tape(a, b);
  auto sa = a.store(), sb = b.store();
  int64_t an = detail::node_on(tp, a), bn = detail::node_on(tp, b), ann = a.numel(), bnn = b.numel();
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    const int64_t gn = static_cast<int64_t>(g.size());
    if (an >= 0) {
      std::vector<T> da(g.size());
      const T* pbv = sb->data();
      for (int64_t i = 0; i < gn; ++i) da[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] * (bnn == 1 ? pbv[0] : pbv[i]);
      detail::reduce_or_copy(t, an, ann, da);
    }
    if (bn >= 0) {
      std::vector<T> db(g.size());
      const T* pav = sa->data();
      for (int64_t i = 0; i < gn; ++i) db[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] * (ann == 1 ? pav[0] : pav[i]);
      detail::reduce_or_copy(t, bn, bnn, db);
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  T* o = out.mutable_data();
  const T* p = a.data();
  for (int64_t i = 0; i < n; ++i) o[i] = p[i] * c;
  check_all_finite("scale", out);

  Tape<T>* tp = detail::active_tape(a);
  int64_t an = detail::node_on(tp, a);
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    std::vector<T> da(g.size());
    for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * c;
    t.accumulate(an, da.data(), static_cast<int64_t>(da.size()));
  });
  return out;
}

namespace detail {

// Shared skeleton for unary elementwise ops. `dfn(x, y)` is the local
// derivative given input x and output y.
template <typename T, typename FwdFn, typename DFn>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, FwdFn fwd, DFn dfn) {
  auto out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  T* o = out.mutable_data();
  const T* p = a.data();
  for (int64_t i = 0; i < n; ++i) o[i] = fwd(p[i]);
  check_all_finite(name, out);

  Tape<T>* tp = detail::active_tape(a);
  auto sa = a.store();
  auto so = out.store();
  int64_t an = detail::node_on(tp, a);
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    std::vector<T> da(g.size());
    const T* x = sa->data();
    const T* y = so->data();
    for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * dfn(x[i], y[i]);
    t.accumulate(an, da.data(), static_cast<int64_t>(da.size()));
  });
  return out;
}

template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      "sigmoid", a, [](T x) { return detail::stable_sigmoid(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary_op(
      "silu", a, [](T x) { return x * detail::stable_sigmoid(x); },
      [](T x, T) {
        T s = detail::stable_sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> ln(const Tensor<T>& a) {
  return detail::unary_op("ln", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary_op(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, max-subtracted

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() < 1 || a.dim(a.rank() - 1) < 1)
    throw ShapeError("softmax_lastdim: last dimension must be >= 1, shape " + shape_str(a.shape()));
  const int64_t cols = a.dim(a.rank() - 1);
  const int64_t rows = a.numel() / cols;
  auto out = Tensor<T>::zeros(a.shape());
  const T* p = a.data();
  T* o = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = p + r * cols;
    T* y = o + r * cols;
    T mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
  check_all_finite("softmax_lastdim", out);

  Tape<T>* tp = detail::active_tape(a);
  auto so = out.store();
  int64_t an = detail::node_on(tp, a);
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    std::vector<T> da(g.size());
    const T* y = so->data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * cols;
      const T* yr = y + r * cols;
      T dot = 0;
      for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
      T* dr = da.data() + r * cols;
      for (int64_t j = 0; j < cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
    }
    t.accumulate(an, da.data(), static_cast<int64_t>(da.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// full reduction

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  const T* p = a.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += p[i];
  auto out = Tensor<T>::scalar(s);
  check_all_finite("sum", out);

  Tape<T>* tp = detail::active_tape(a);
  int64_t an = detail::node_on(tp, a);
  detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
    std::vector<T> da(static_cast<size_t>(n), g[0]);
    t.accumulate(an, da.data(), n);
  });
  return out;
}

// Convenience: backward from a scalar root through the ambient machinery.
template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& root) {
  tape.backward(root);
}

}  // namespace sinklab
