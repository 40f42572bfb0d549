// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmnas/rng.hpp"

namespace mmnas {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s) {
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
  }
}

// Primitive kinds recorded on the tape. Introspection only; the backward
// rule itself lives in the entry's closure.
enum class OpKind {
  Add, Sub, Mul, Scale, ScaleElement, Relu, Tanh, SignedSqrt, L2Normalize,
  MatMul, Linear, Conv2d, Pool2d, Softmax, CrossEntropy, Sum, Mean, Gap2d,
  Concat, Reshape, Slice2d, RowwiseOuter, SumPool1d, EmbeddingBagMean,
  BatchNorm,
};

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::ScaleElement: return "scale_element";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::SignedSqrt: return "signed_sqrt";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::MatMul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Pool2d: return "pool2d";
    case OpKind::Softmax: return "softmax";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Gap2d: return "gap2d";
    case OpKind::Concat: return "concat";
    case OpKind::Reshape: return "reshape";
    case OpKind::Slice2d: return "slice2d";
    case OpKind::RowwiseOuter: return "rowwise_outer";
    case OpKind::SumPool1d: return "sum_pool1d";
    case OpKind::EmbeddingBagMean: return "embedding_bag_mean";
    case OpKind::BatchNorm: return "batch_norm";
  }
  return "?";
}

template <typename S>
struct TensorData {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::uint64_t tape_serial = 0;  // serial of the tape this node was recorded on
  int node_id = -1;
};

template <typename S>
inline S* ensure_grad_buffer(TensorData<S>& d) {
  if (d.grad.empty()) d.grad.assign(d.values.size(), S(0));
  return d.grad.data();
}

template <typename S>
class GradTape;

// Dense row-major tensor with value semantics (shared storage handle).
// Values are immutable by convention once an op has consumed them; grad
// buffers are the only mutable state after creation.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false)
      : d_(std::make_shared<TensorData<S>>()) {
    check_shape_valid(shape);
    d_->shape = std::move(shape);
    d_->values.assign(static_cast<std::size_t>(shape_numel(d_->shape)), fill);
    d_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false)
      : d_(std::make_shared<TensorData<S>>()) {
    check_shape_valid(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), S(1)); }
  static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

  static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t(std::move(shape), S(0), requires_grad);
    for (auto& v : t.d_->values) v = static_cast<S>(rng.normal(0.0, stddev));
    return t;
  }

  static Tensor uniform(Shape shape, RngStream& rng, double lo, double hi,
                        bool requires_grad = false) {
    Tensor t(std::move(shape), S(0), requires_grad);
    for (auto& v : t.d_->values) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  // He/Kaiming uniform over +-sqrt(6/fan_in)
  static Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, RngStream& rng,
                                bool requires_grad = true) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return uniform(std::move(shape), rng, -bound, bound, requires_grad);
  }

  bool valid() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->values.size()); }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    d_->requires_grad = rg;
    return *this;
  }

  const std::vector<S>& values() const { return d_->values; }
  S* data() { return d_->values.data(); }
  const S* data() const { return d_->values.data(); }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor, shape is " + shape_str(shape()));
    return d_->values[0];
  }

  S at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw std::invalid_argument("index rank mismatch");
    std::int64_t flat = 0;
    int i = 0;
    for (int v : idx) {
      flat = flat * d_->shape[static_cast<std::size_t>(i)] + v;
      ++i;
    }
    return d_->values[static_cast<std::size_t>(flat)];
  }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (d_->grad.empty()) throw std::runtime_error("tensor has no gradient; run backward first");
    return d_->grad;
  }
  std::vector<S>& grad_mut() {
    ensure_grad_buffer(*d_);
    return d_->grad;
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }

  // Deep copy detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t(d_->shape, T(0), d_->requires_grad);
    for (std::size_t i = 0; i < d_->values.size(); ++i) t.data()[i] = static_cast<T>(d_->values[i]);
    return t;
  }

  std::shared_ptr<TensorData<S>> ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData<S>> d_;
};

// Reverse-mode tape. Constructing a tape makes it the active recording
// context for the current thread (tapes nest like a stack); it is not
// shareable across threads. One backward pass per tape.
template <typename S>
class GradTape {
 public:
  struct Entry {
    OpKind kind;
    std::vector<int> inputs;  // node ids, -1 for untracked operands
    int output;
    std::function<void()> backprop;
  };

  GradTape() : serial_(next_serial()), prev_(active_) { active_ = this; }
  ~GradTape() { active_ = prev_; }

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  std::uint64_t serial() const { return serial_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }

  bool on_tape(const Tensor<S>& t) const {
    return t.ptr()->tape_serial == serial_ && t.ptr()->node_id >= 0;
  }

  // Assigns a node id to a leaf or intermediate owned by this tape.
  int adopt(const Tensor<S>& t) {
    auto d = t.ptr();
    if (d->tape_serial == serial_ && d->node_id >= 0) return d->node_id;
    d->tape_serial = serial_;
    d->node_id = next_node_++;
    return d->node_id;
  }

  template <typename F>
  void add(OpKind kind, std::initializer_list<const Tensor<S>*> ins, Tensor<S>& out, F&& fn) {
    Entry e;
    e.kind = kind;
    e.inputs.reserve(ins.size());
    for (const Tensor<S>* in : ins) {
      bool tracked = in->requires_grad() || on_tape(*in);
      e.inputs.push_back(tracked ? adopt(*in) : -1);
    }
    e.output = adopt(out);
    e.backprop = std::forward<F>(fn);
    entries_.push_back(std::move(e));
  }

  void push_entry(Entry e) { entries_.push_back(std::move(e)); }

  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
    }
    if (loss.ptr()->tape_serial != serial_ || loss.ptr()->node_id < 0) {
      // A bare requires_grad leaf is a legal (empty) graph; anything else
      // was computed outside this tape.
      if (loss.requires_grad()) {
        adopt(loss);
      } else {
        throw std::runtime_error("loss is not attached to this tape");
      }
    }
    if (consumed_) throw std::runtime_error("backward already invoked on this tape");
    consumed_ = true;
    ensure_grad_buffer(*loss.ptr());
    loss.ptr()->grad[0] = S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backprop();
  }

 private:
  static std::uint64_t next_serial() {
    static std::uint64_t counter = 0;
    return ++counter;
  }

  std::vector<Entry> entries_;
  std::uint64_t serial_;
  bool consumed_ = false;
  int next_node_ = 0;
  GradTape* prev_ = nullptr;
  inline static thread_local GradTape* active_ = nullptr;
};

namespace detail {

// Gathers the per-input tracking decisions for one primitive application.
template <typename S>
struct Recorder {
  GradTape<S>* tape = GradTape<S>::active();
  bool any = false;

  bool track(const Tensor<S>& t) {
    if (!tape) return false;
    bool tr = t.requires_grad() || tape->on_tape(t);
    any = any || tr;
    return tr;
  }

  template <typename F>
  void commit(OpKind kind, std::initializer_list<const Tensor<S>*> ins, Tensor<S>& out, F&& fn) {
    if (!tape || !any) return;
    tape->add(kind, ins, out, std::forward<F>(fn));
  }
};

template <typename S>
using ConstMat =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using MutMat = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMatXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": operand shapes differ: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> y(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i];

  detail::Recorder<S> rec;
  bool na = rec.track(a), nb = rec.track(b);
  rec.commit(OpKind::Add, {&a, &b}, y, [na, nb, ad = a.ptr(), bd = b.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    if (na) {
      S* ga = ensure_grad_buffer(*ad);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (nb) {
      S* gb = ensure_grad_buffer(*bd);
      for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
    }
  });
  return y;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<S> y(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] - bv[i];

  detail::Recorder<S> rec;
  bool na = rec.track(a), nb = rec.track(b);
  rec.commit(OpKind::Sub, {&a, &b}, y, [na, nb, ad = a.ptr(), bd = b.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    if (na) {
      S* ga = ensure_grad_buffer(*ad);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (nb) {
      S* gb = ensure_grad_buffer(*bd);
      for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
    }
  });
  return y;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> y(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] * bv[i];

  detail::Recorder<S> rec;
  bool na = rec.track(a), nb = rec.track(b);
  rec.commit(OpKind::Mul, {&a, &b}, y, [na, nb, ad = a.ptr(), bd = b.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    if (na) {
      S* ga = ensure_grad_buffer(*ad);
      const S* bv = bd->values.data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
    }
    if (nb) {
      S* gb = ensure_grad_buffer(*bd);
      const S* av = ad->values.data();
      for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
    }
  });
  return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Tensor<S> y(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = c * xv[i];

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Scale, {&x}, y, [c, xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    S* gx = ensure_grad_buffer(*xd);
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += c * g[i];
  });
  return y;
}

// y = s[idx] * x, differentiable in both x and the selected element of s.
// This is how mixed operations couple candidate outputs to architecture
// weights.
template <typename S>
Tensor<S> scale_element(const Tensor<S>& x, const Tensor<S>& s, std::int64_t idx) {
  if (idx < 0 || idx >= s.numel()) {
    throw std::invalid_argument("scale_element: index " + std::to_string(idx) + " out of range for " +
                                shape_str(s.shape()));
  }
  const S c = s.data()[idx];
  Tensor<S> y(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = c * xv[i];

  detail::Recorder<S> rec;
  bool nx = rec.track(x), ns = rec.track(s);
  rec.commit(OpKind::ScaleElement, {&x, &s}, y,
             [nx, ns, c, idx, xd = x.ptr(), sd = s.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               const S* g = yd->grad.data();
               const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
               if (nx) {
                 S* gx = ensure_grad_buffer(*xd);
                 for (std::int64_t i = 0; i < n; ++i) gx[i] += c * g[i];
               }
               if (ns) {
                 S* gs = ensure_grad_buffer(*sd);
                 double acc = 0.0;
                 const S* xv = xd->values.data();
                 for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(g[i]) * xv[i];
                 gs[idx] += static_cast<S>(acc);
               }
             });
  return y;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = xv[i] > S(0) ? xv[i] : S(0);

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Relu, {&x}, y, [xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const S* xv = xd->values.data();
    S* gx = ensure_grad_buffer(*xd);
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    for (std::int64_t i = 0; i < n; ++i)
      if (xv[i] > S(0)) gx[i] += g[i];
  });
  return y;
}

template <typename S>
Tensor<S> tanh_op(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) yv[i] = std::tanh(xv[i]);

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Tanh, {&x}, y, [xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const S* yv = yd->values.data();
    S* gx = ensure_grad_buffer(*xd);
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (S(1) - yv[i] * yv[i]);
  });
  return y;
}

// sign(v) * sqrt(|v|), subgradient 0 at the origin.
template <typename S>
Tensor<S> signed_sqrt(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    S a = std::sqrt(std::abs(xv[i]));
    yv[i] = xv[i] < S(0) ? -a : a;
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::SignedSqrt, {&x}, y, [xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const S* yv = yd->values.data();
    S* gx = ensure_grad_buffer(*xd);
    const std::int64_t n = static_cast<std::int64_t>(yd->values.size());
    for (std::int64_t i = 0; i < n; ++i) {
      S a = std::abs(yv[i]);
      if (a > S(0)) gx[i] += g[i] / (S(2) * a);
    }
  });
  return y;
}

// Normalizes along the last axis: v / max(||v||_2, eps). Leading axes are
// treated as batch.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, double eps = 1e-12) {
  if (x.rank() == 0) throw std::invalid_argument("l2_normalize: rank-0 tensor");
  const std::int64_t d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / d;
  Tensor<S> y(x.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  const S* xv = x.data();
  S* yv = y.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      double v = static_cast<double>(xv[r * d + i]);
      ss += v * v;
    }
    double n = std::max(std::sqrt(ss), eps);
    norms[static_cast<std::size_t>(r)] = n;
    for (std::int64_t i = 0; i < d; ++i) yv[r * d + i] = static_cast<S>(xv[r * d + i] / n);
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::L2Normalize, {&x}, y,
             [d, rows, norms = std::move(norms), xd = x.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               const S* g = yd->grad.data();
               const S* yv = yd->values.data();
               S* gx = ensure_grad_buffer(*xd);
               for (std::int64_t r = 0; r < rows; ++r) {
                 const double n = norms[static_cast<std::size_t>(r)];
                 double dot = 0.0;
                 for (std::int64_t i = 0; i < d; ++i)
                   dot += static_cast<double>(g[r * d + i]) * yv[r * d + i];
                 for (std::int64_t i = 0; i < d; ++i) {
                   gx[r * d + i] += static_cast<S>((static_cast<double>(g[r * d + i]) -
                                                    static_cast<double>(yv[r * d + i]) * dot) /
                                                   n);
                 }
               }
             });
  return y;
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> y(Shape{m, n});
  {
    detail::ConstMat<S> am(a.data(), m, k);
    detail::ConstMat<S> bm(b.data(), k, n);
    detail::RowMatXd yd = am.template cast<double>() * bm.template cast<double>();
    detail::MutMat<S>(y.data(), m, n) = yd.template cast<S>();
  }

  detail::Recorder<S> rec;
  bool na = rec.track(a), nb = rec.track(b);
  rec.commit(OpKind::MatMul, {&a, &b}, y,
             [na, nb, m, k, n, ad = a.ptr(), bd = b.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               detail::ConstMat<S> g(yd->grad.data(), m, n);
               if (na) {
                 detail::ConstMat<S> bm(bd->values.data(), k, n);
                 detail::RowMatXd da =
                     g.template cast<double>() * bm.template cast<double>().transpose();
                 detail::MutMat<S> ga(ensure_grad_buffer(*ad), m, k);
                 ga += da.template cast<S>();
               }
               if (nb) {
                 detail::ConstMat<S> am(ad->values.data(), m, k);
                 detail::RowMatXd db =
                     am.template cast<double>().transpose() * g.template cast<double>();
                 detail::MutMat<S> gb(ensure_grad_buffer(*bd), k, n);
                 gb += db.template cast<S>();
               }
             });
  return y;
}

// y = x * W^T + b with x: [B,I], W: [O,I], b: [O]. Fused so a dense layer is
// one tape entry.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw std::invalid_argument("linear expects rank-2 input and weight, got " + shape_str(x.shape()) +
                                " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("linear: input features " + shape_str(x.shape()) +
                                " do not match weight " + shape_str(w.shape()));
  }
  const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (b.valid() && (b.rank() != 1 || b.dim(0) != O)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) + " does not match " +
                                std::to_string(O) + " outputs");
  }
  Tensor<S> y(Shape{B, O});
  {
    detail::ConstMat<S> xm(x.data(), B, I);
    detail::ConstMat<S> wm(w.data(), O, I);
    detail::RowMatXd yd = xm.template cast<double>() * wm.template cast<double>().transpose();
    if (b.valid()) {
      detail::ConstMat<S> bm(b.data(), 1, O);
      yd.rowwise() += bm.row(0).template cast<double>();
    }
    detail::MutMat<S>(y.data(), B, O) = yd.template cast<S>();
  }

  detail::Recorder<S> rec;
  bool nx = rec.track(x), nw = rec.track(w);
  bool nb = b.valid() ? rec.track(b) : false;
  auto fn = [nx, nw, nb, B, I, O, xd = x.ptr(), wd = w.ptr(),
             bd = b.valid() ? b.ptr() : std::shared_ptr<TensorData<S>>(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    detail::ConstMat<S> g(yd->grad.data(), B, O);
    if (nx) {
      detail::ConstMat<S> wm(wd->values.data(), O, I);
      detail::RowMatXd dx = g.template cast<double>() * wm.template cast<double>();
      detail::MutMat<S> gx(ensure_grad_buffer(*xd), B, I);
      gx += dx.template cast<S>();
    }
    if (nw) {
      detail::ConstMat<S> xm(xd->values.data(), B, I);
      detail::RowMatXd dw = g.template cast<double>().transpose() * xm.template cast<double>();
      detail::MutMat<S> gw(ensure_grad_buffer(*wd), O, I);
      gw += dw.template cast<S>();
    }
    if (nb && bd) {
      Eigen::VectorXd db = g.template cast<double>().colwise().sum();
      S* gb = ensure_grad_buffer(*bd);
      for (int o = 0; o < O; ++o) gb[o] += static_cast<S>(db[o]);
    }
  };
  if (b.valid()) {
    rec.commit(OpKind::Linear, {&x, &w, &b}, y, std::move(fn));
  } else {
    rec.commit(OpKind::Linear, {&x, &w}, y, std::move(fn));
  }
  return y;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  return linear(x, w, Tensor<S>());
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

struct Conv2dOpts {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

namespace detail {

struct ConvGeom {
  int N, C, H, W, F, kh, kw, Ho, Wo;
  Conv2dOpts o;
};

inline ConvGeom conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOpts& o) {
  if (xs.size() != 4 || ws.size() != 4) {
    throw std::invalid_argument("conv2d expects NCHW input and FCkk weight, got " + shape_str(xs) +
                                " and " + shape_str(ws));
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, o};
  if (o.groups < 1 || g.C % o.groups != 0 || g.F % o.groups != 0) {
    throw std::invalid_argument("conv2d: channels " + std::to_string(g.C) + " and filters " +
                                std::to_string(g.F) + " must be divisible by groups " +
                                std::to_string(o.groups));
  }
  if (ws[1] != g.C / o.groups) {
    throw std::invalid_argument("conv2d: weight shape " + shape_str(ws) + " does not match input " +
                                shape_str(xs) + " with groups " + std::to_string(o.groups));
  }
  const int eff_h = o.dilation * (g.kh - 1) + 1;
  const int eff_w = o.dilation * (g.kw - 1) + 1;
  if (g.H + 2 * o.padding < eff_h || g.W + 2 * o.padding < eff_w) {
    throw std::invalid_argument("conv2d: kernel larger than padded input: " + shape_str(ws) + " on " +
                                shape_str(xs) + " with padding " + std::to_string(o.padding));
  }
  g.Ho = (g.H + 2 * o.padding - eff_h) / o.stride + 1;
  g.Wo = (g.W + 2 * o.padding - eff_w) / o.stride + 1;
  return g;
}

// im2col for one sample and one channel group; column-major layout is
// (Cg*kh*kw) x (Ho*Wo) in a dense double matrix for the GEMM.
template <typename S>
inline void im2col(const S* x, const ConvGeom& g, int c0, int Cg, RowMatXd& col) {
  const int Ho = g.Ho, Wo = g.Wo;
  for (int c = 0; c < Cg; ++c) {
    const S* xc = x + static_cast<std::int64_t>(c0 + c) * g.H * g.W;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const int row = (c * g.kh + ki) * g.kw + kj;
        double* dst = col.data() + static_cast<std::int64_t>(row) * Ho * Wo;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * g.o.stride - g.o.padding + ki * g.o.dilation;
          if (ii < 0 || ii >= g.H) {
            std::fill(dst + oi * Wo, dst + (oi + 1) * Wo, 0.0);
            continue;
          }
          for (int oj = 0; oj < Wo; ++oj) {
            const int jj = oj * g.o.stride - g.o.padding + kj * g.o.dilation;
            dst[oi * Wo + oj] = (jj < 0 || jj >= g.W) ? 0.0 : static_cast<double>(xc[ii * g.W + jj]);
          }
        }
      }
    }
  }
}

template <typename S>
inline void col2im_accum(const RowMatXd& col, const ConvGeom& g, int c0, int Cg, S* gx) {
  const int Ho = g.Ho, Wo = g.Wo;
  for (int c = 0; c < Cg; ++c) {
    S* gc = gx + static_cast<std::int64_t>(c0 + c) * g.H * g.W;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const int row = (c * g.kh + ki) * g.kw + kj;
        const double* src = col.data() + static_cast<std::int64_t>(row) * Ho * Wo;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * g.o.stride - g.o.padding + ki * g.o.dilation;
          if (ii < 0 || ii >= g.H) continue;
          for (int oj = 0; oj < Wo; ++oj) {
            const int jj = oj * g.o.stride - g.o.padding + kj * g.o.dilation;
            if (jj < 0 || jj >= g.W) continue;
            gc[ii * g.W + jj] += static_cast<S>(src[oi * Wo + oj]);
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (no kernel flip), NCHW. x: [N,C,H,W], w: [F,C/groups,kh,kw].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Conv2dOpts& opts = {}) {
  const detail::ConvGeom g = detail::conv_geometry(x.shape(), w.shape(), opts);
  const int G = opts.groups, Cg = g.C / G, Fg = g.F / G;
  Tensor<S> y(Shape{g.N, g.F, g.Ho, g.Wo});

  detail::RowMatXd col(Cg * g.kh * g.kw, g.Ho * g.Wo);
  detail::ConstMat<S> wm(w.data(), g.F, Cg * g.kh * g.kw);
  for (int n = 0; n < g.N; ++n) {
    const S* xn = x.data() + static_cast<std::int64_t>(n) * g.C * g.H * g.W;
    S* yn = y.data() + static_cast<std::int64_t>(n) * g.F * g.Ho * g.Wo;
    for (int grp = 0; grp < G; ++grp) {
      detail::im2col(xn, g, grp * Cg, Cg, col);
      detail::RowMatXd out =
          wm.middleRows(grp * Fg, Fg).template cast<double>() * col;
      detail::MutMat<S>(yn + static_cast<std::int64_t>(grp) * Fg * g.Ho * g.Wo, Fg, g.Ho * g.Wo) =
          out.template cast<S>();
    }
  }

  detail::Recorder<S> rec;
  bool nx = rec.track(x), nw = rec.track(w);
  rec.commit(OpKind::Conv2d, {&x, &w}, y, [nx, nw, g, xd = x.ptr(), wd = w.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const int G = g.o.groups, Cg = g.C / G, Fg = g.F / G;
    detail::ConstMat<S> wm(wd->values.data(), g.F, Cg * g.kh * g.kw);
    detail::RowMatXd col(Cg * g.kh * g.kw, g.Ho * g.Wo);
    detail::RowMatXd dw = detail::RowMatXd::Zero(g.F, Cg * g.kh * g.kw);
    S* gx = nx ? ensure_grad_buffer(*xd) : nullptr;
    for (int n = 0; n < g.N; ++n) {
      const S* xn = xd->values.data() + static_cast<std::int64_t>(n) * g.C * g.H * g.W;
      const S* gyn = yd->grad.data() + static_cast<std::int64_t>(n) * g.F * g.Ho * g.Wo;
      for (int grp = 0; grp < G; ++grp) {
        detail::ConstMat<S> gy(gyn + static_cast<std::int64_t>(grp) * Fg * g.Ho * g.Wo, Fg,
                               g.Ho * g.Wo);
        if (nw) {
          detail::im2col(xn, g, grp * Cg, Cg, col);
          dw.middleRows(grp * Fg, Fg) += gy.template cast<double>() * col.transpose();
        }
        if (nx) {
          detail::RowMatXd dcol = wm.middleRows(grp * Fg, Fg).template cast<double>().transpose() *
                                  gy.template cast<double>();
          detail::col2im_accum(dcol, g, grp * Cg, Cg,
                               gx + static_cast<std::int64_t>(n) * g.C * g.H * g.W);
        }
      }
    }
    if (nw) {
      detail::MutMat<S> gw(ensure_grad_buffer(*wd), g.F, Cg * g.kh * g.kw);
      gw += dw.template cast<S>();
    }
  });
  return y;
}

enum class PoolKind { Max, Avg };

// 2D pooling over NCHW. Max pooling ignores padded positions and routes the
// gradient to the first maximal element in row-major window order; average
// pooling counts padded positions as zeros and divides by the full window
// area.
template <typename S>
Tensor<S> pool2d(const Tensor<S>& x, PoolKind kind, int kernel = 3, int stride = 1, int padding = 0) {
  if (x.rank() != 4) throw std::invalid_argument("pool2d expects NCHW input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel < 1 || stride < 1 || padding < 0 || H + 2 * padding < kernel || W + 2 * padding < kernel) {
    throw std::invalid_argument("pool2d: invalid geometry: kernel " + std::to_string(kernel) +
                                ", stride " + std::to_string(stride) + ", padding " +
                                std::to_string(padding) + " on " + shape_str(x.shape()));
  }
  const int Ho = (H + 2 * padding - kernel) / stride + 1;
  const int Wo = (W + 2 * padding - kernel) / stride + 1;
  Tensor<S> y(Shape{N, C, Ho, Wo});
  std::vector<std::int32_t> argmax;
  if (kind == PoolKind::Max) argmax.assign(static_cast<std::size_t>(y.numel()), -1);

  const S* xv = x.data();
  S* yv = y.data();
  const double inv_area = 1.0 / (static_cast<double>(kernel) * kernel);
  std::int64_t out = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const S* plane = xv + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj, ++out) {
          const int i0 = oi * stride - padding, j0 = oj * stride - padding;
          if (kind == PoolKind::Max) {
            S best = S(0);
            std::int32_t best_idx = -1;
            for (int ki = 0; ki < kernel; ++ki) {
              const int ii = i0 + ki;
              if (ii < 0 || ii >= H) continue;
              for (int kj = 0; kj < kernel; ++kj) {
                const int jj = j0 + kj;
                if (jj < 0 || jj >= W) continue;
                const S v = plane[ii * W + jj];
                if (best_idx < 0 || v > best) {
                  best = v;
                  best_idx = static_cast<std::int32_t>(ii * W + jj);
                }
              }
            }
            yv[out] = best;
            argmax[static_cast<std::size_t>(out)] = best_idx;
          } else {
            double acc = 0.0;
            for (int ki = 0; ki < kernel; ++ki) {
              const int ii = i0 + ki;
              if (ii < 0 || ii >= H) continue;
              for (int kj = 0; kj < kernel; ++kj) {
                const int jj = j0 + kj;
                if (jj < 0 || jj >= W) continue;
                acc += static_cast<double>(plane[ii * W + jj]);
              }
            }
            yv[out] = static_cast<S>(acc * inv_area);
          }
        }
      }
    }
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Pool2d, {&x}, y,
             [kind, N, C, H, W, Ho, Wo, inv_area, argmax = std::move(argmax), xd = x.ptr(),
              yd = y.ptr(), kernel, stride, padding] {
               if (yd->grad.empty()) return;
               const S* g = yd->grad.data();
               S* gx = ensure_grad_buffer(*xd);
               std::int64_t out = 0;
               for (int n = 0; n < N; ++n) {
                 for (int c = 0; c < C; ++c) {
                   S* gplane = gx + (static_cast<std::int64_t>(n) * C + c) * H * W;
                   for (int oi = 0; oi < Ho; ++oi) {
                     for (int oj = 0; oj < Wo; ++oj, ++out) {
                       if (kind == PoolKind::Max) {
                         const std::int32_t idx = argmax[static_cast<std::size_t>(out)];
                         if (idx >= 0) gplane[idx] += g[out];
                       } else {
                         const int i0 = oi * stride - padding, j0 = oj * stride - padding;
                         const S share = static_cast<S>(static_cast<double>(g[out]) * inv_area);
                         for (int ki = 0; ki < kernel; ++ki) {
                           const int ii = i0 + ki;
                           if (ii < 0 || ii >= H) continue;
                           for (int kj = 0; kj < kernel; ++kj) {
                             const int jj = j0 + kj;
                             if (jj < 0 || jj >= W) continue;
                             gplane[ii * W + jj] += share;
                           }
                         }
                       }
                     }
                   }
                 }
               }
             });
  return y;
}

// ---------------------------------------------------------------------------
// Reductions, reshaping, normalization
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: axis out of range");
  const Shape& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t K = s[static_cast<std::size_t>(axis)];

  Tensor<S> y(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * K * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(xv[base + k * inner]));
      double z = 0.0;
      for (std::int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(xv[base + k * inner]) - mx);
      for (std::int64_t k = 0; k < K; ++k)
        yv[base + k * inner] = static_cast<S>(std::exp(static_cast<double>(xv[base + k * inner]) - mx) / z);
    }
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Softmax, {&x}, y, [outer, inner, K, xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    const S* p = yd->values.data();
    S* gx = ensure_grad_buffer(*xd);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * K * inner + i;
        double dot = 0.0;
        for (std::int64_t k = 0; k < K; ++k)
          dot += static_cast<double>(g[base + k * inner]) * p[base + k * inner];
        for (std::int64_t k = 0; k < K; ++k) {
          const std::int64_t idx = base + k * inner;
          gx[idx] += static_cast<S>(p[idx] * (static_cast<double>(g[idx]) - dot));
        }
      }
    }
  });
  return y;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  double acc = 0.0;
  const S* xv = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(xv[i]);
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(acc));

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Sum, {&x}, y, [xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S g = yd->grad[0];
    S* gx = ensure_grad_buffer(*xd);
    const std::int64_t n = static_cast<std::int64_t>(xd->values.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  double acc = 0.0;
  const S* xv = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(xv[i]);
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Mean, {&x}, y, [n, xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S g = static_cast<S>(static_cast<double>(yd->grad[0]) / static_cast<double>(n));
    S* gx = ensure_grad_buffer(*xd);
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return y;
}

// Global average pooling: [N,C,H,W] -> [N,C]
template <typename S>
Tensor<S> gap2d(const Tensor<S>& x) {
  if (x.rank() != 4) throw std::invalid_argument("gap2d expects NCHW input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor<S> y(Shape{N, C});
  const S* xv = x.data();
  S* yv = y.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(xv[nc * hw + i]);
    yv[nc] = static_cast<S>(acc / static_cast<double>(hw));
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Gap2d, {&x}, y, [N, C, hw, xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    S* gx = ensure_grad_buffer(*xd);
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
      const S share = static_cast<S>(static_cast<double>(g[nc]) / static_cast<double>(hw));
      for (std::int64_t i = 0; i < hw; ++i) gx[nc * hw + i] += share;
    }
  });
  return y;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  check_shape_valid(shape);
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<S> y(std::move(shape), std::vector<S>(x.values()));

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Reshape, {&x}, y, [xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    S* gx = ensure_grad_buffer(*xd);
    const std::int64_t n = static_cast<std::int64_t>(xd->values.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
  });
  return y;
}

// y = x[:, :, row_off:, col_off:]
template <typename S>
Tensor<S> slice2d(const Tensor<S>& x, int row_off, int col_off) {
  if (x.rank() != 4) throw std::invalid_argument("slice2d expects NCHW input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (row_off < 0 || col_off < 0 || row_off >= H || col_off >= W) {
    throw std::invalid_argument("slice2d: offsets out of range for " + shape_str(x.shape()));
  }
  const int Ho = H - row_off, Wo = W - col_off;
  Tensor<S> y(Shape{N, C, Ho, Wo});
  const S* xv = x.data();
  S* yv = y.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    for (int i = 0; i < Ho; ++i) {
      const S* src = xv + nc * H * W + static_cast<std::int64_t>(i + row_off) * W + col_off;
      std::copy(src, src + Wo, yv + nc * Ho * Wo + static_cast<std::int64_t>(i) * Wo);
    }
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::Slice2d, {&x}, y, [N, C, H, W, Ho, Wo, row_off, col_off, xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    S* gx = ensure_grad_buffer(*xd);
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
      for (int i = 0; i < Ho; ++i) {
        const S* src = g + nc * Ho * Wo + static_cast<std::int64_t>(i) * Wo;
        S* dst = gx + nc * H * W + static_cast<std::int64_t>(i + row_off) * W + col_off;
        for (int j = 0; j < Wo; ++j) dst[j] += src[j];
      }
    }
  });
  return y;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no operands");
  const int rank = xs[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = xs[0].shape();
  for (std::size_t t = 1; t < xs.size(); ++t) {
    const Shape& s = xs[t].shape();
    if (static_cast<int>(s.size()) != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i == axis) continue;
      if (s[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
        throw std::invalid_argument("concat: shapes " + shape_str(xs[0].shape()) + " and " + shape_str(s) +
                                    " differ outside axis " + std::to_string(axis));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

  Tensor<S> y(out_shape);
  S* yv = y.data();
  const std::int64_t out_axis = out_shape[static_cast<std::size_t>(axis)];
  std::int64_t off = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::int64_t ax = x.dim(axis);
    const S* xv = x.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(xv + o * ax * inner, xv + (o + 1) * ax * inner, yv + (o * out_axis + off) * inner);
    }
    off += ax;
  }

  detail::Recorder<S> rec;
  std::vector<bool> need(xs.size());
  bool any = false;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    need[t] = rec.track(xs[t]);
    any = any || need[t];
  }
  if (rec.tape && any) {
    std::vector<std::shared_ptr<TensorData<S>>> parts;
    for (const auto& x : xs) parts.push_back(x.ptr());
    // adopt inputs individually (initializer_list API does not fit a runtime list)
    std::vector<int> ids;
    for (std::size_t t = 0; t < xs.size(); ++t) ids.push_back(need[t] ? rec.tape->adopt(xs[t]) : -1);
    Tensor<S>& out = y;
    typename GradTape<S>::Entry e;
    e.kind = OpKind::Concat;
    e.inputs = std::move(ids);
    e.output = rec.tape->adopt(out);
    e.backprop = [outer, inner, out_axis, need, offsets, parts, yd = y.ptr()] {
      if (yd->grad.empty()) return;
      const S* g = yd->grad.data();
      for (std::size_t t = 0; t < parts.size(); ++t) {
        if (!need[t]) continue;
        auto& d = *parts[t];
        S* gx = ensure_grad_buffer(d);
        const std::int64_t ax = static_cast<std::int64_t>(d.values.size()) / (outer * inner);
        for (std::int64_t o = 0; o < outer; ++o) {
          const S* src = g + (o * out_axis + offsets[t]) * inner;
          S* dst = gx + o * ax * inner;
          for (std::int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
        }
      }
    };
    rec.tape->push_entry(std::move(e));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Fusion-specific primitives
// ---------------------------------------------------------------------------

// y[b, i*J + j] = a[b,i] * b[b,j]
template <typename S>
Tensor<S> rowwise_outer(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("rowwise_outer expects [B,I] and [B,J], got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const int B = a.dim(0), I = a.dim(1), J = b.dim(1);
  Tensor<S> y(Shape{B, I * J});
  const S* av = a.data();
  const S* bv = b.data();
  S* yv = y.data();
  for (int n = 0; n < B; ++n)
    for (int i = 0; i < I; ++i)
      for (int j = 0; j < J; ++j) yv[(static_cast<std::int64_t>(n) * I + i) * J + j] = av[n * I + i] * bv[n * J + j];

  detail::Recorder<S> rec;
  bool na = rec.track(a), nb = rec.track(b);
  rec.commit(OpKind::RowwiseOuter, {&a, &b}, y,
             [na, nb, B, I, J, ad = a.ptr(), bd = b.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               const S* g = yd->grad.data();
               const S* av = ad->values.data();
               const S* bv = bd->values.data();
               S* ga = na ? ensure_grad_buffer(*ad) : nullptr;
               S* gb = nb ? ensure_grad_buffer(*bd) : nullptr;
               for (int n = 0; n < B; ++n) {
                 for (int i = 0; i < I; ++i) {
                   const S* grow = g + (static_cast<std::int64_t>(n) * I + i) * J;
                   if (na) {
                     double acc = 0.0;
                     for (int j = 0; j < J; ++j) acc += static_cast<double>(grow[j]) * bv[n * J + j];
                     ga[n * I + i] += static_cast<S>(acc);
                   }
                   if (nb) {
                     const S ai = av[n * I + i];
                     for (int j = 0; j < J; ++j) gb[n * J + j] += grow[j] * ai;
                   }
                 }
               }
             });
  return y;
}

// Sum over non-overlapping windows of k along the last axis:
// y[b, m] = sum_i x[b, m*k + i]
template <typename S>
Tensor<S> sum_pool1d(const Tensor<S>& x, int k) {
  if (k < 1) throw std::invalid_argument("sum_pool1d: window must be >= 1");
  const int last = x.dim(x.rank() - 1);
  if (last % k != 0) {
    throw std::invalid_argument("sum_pool1d: last extent " + std::to_string(last) +
                                " not divisible by window " + std::to_string(k));
  }
  Shape out_shape = x.shape();
  out_shape.back() = last / k;
  const std::int64_t rows = x.numel() / last;
  const int M = last / k;
  Tensor<S> y(out_shape);
  const S* xv = x.data();
  S* yv = y.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (int m = 0; m < M; ++m) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += static_cast<double>(xv[r * last + m * k + i]);
      yv[r * M + m] = static_cast<S>(acc);
    }
  }

  detail::Recorder<S> rec;
  rec.track(x);
  rec.commit(OpKind::SumPool1d, {&x}, y, [rows, M, k, last, xd = x.ptr(), yd = y.ptr()] {
    if (yd->grad.empty()) return;
    const S* g = yd->grad.data();
    S* gx = ensure_grad_buffer(*xd);
    for (std::int64_t r = 0; r < rows; ++r)
      for (int m = 0; m < M; ++m)
        for (int i = 0; i < k; ++i) gx[r * last + m * k + i] += g[r * M + m];
  });
  return y;
}

// Mask-weighted mean of embedding rows: table [V,D], ids/mask [B,L] ->
// [B,D]. Gradient flows to the table only. A row whose mask is all zero is
// an invalid input.
template <typename S>
Tensor<S> embedding_bag_mean(const Tensor<S>& table, const std::vector<int>& ids,
                             const std::vector<int>& mask, int batch, int len) {
  if (table.rank() != 2) throw std::invalid_argument("embedding_bag_mean: table must be [V,D]");
  if (static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(batch) * len ||
      ids.size() != mask.size()) {
    throw std::invalid_argument("embedding_bag_mean: ids/mask size mismatch");
  }
  const int V = table.dim(0), D = table.dim(1);
  Tensor<S> y(Shape{batch, D});
  const S* tv = table.data();
  S* yv = y.data();
  std::vector<double> inv_count(static_cast<std::size_t>(batch));
  std::vector<double> row(static_cast<std::size_t>(D));
  for (int b = 0; b < batch; ++b) {
    int count = 0;
    std::fill(row.begin(), row.end(), 0.0);
    for (int t = 0; t < len; ++t) {
      if (!mask[static_cast<std::size_t>(b * len + t)]) continue;
      const int id = ids[static_cast<std::size_t>(b * len + t)];
      if (id < 0 || id >= V) throw std::invalid_argument("embedding_bag_mean: id out of vocabulary");
      ++count;
      const S* trow = tv + static_cast<std::int64_t>(id) * D;
      for (int d = 0; d < D; ++d) row[static_cast<std::size_t>(d)] += static_cast<double>(trow[d]);
    }
    if (count == 0) throw std::invalid_argument("embedding_bag_mean: attention mask selects no tokens");
    inv_count[static_cast<std::size_t>(b)] = 1.0 / count;
    for (int d = 0; d < D; ++d)
      yv[static_cast<std::int64_t>(b) * D + d] = static_cast<S>(row[static_cast<std::size_t>(d)] / count);
  }

  detail::Recorder<S> rec;
  rec.track(table);
  rec.commit(OpKind::EmbeddingBagMean, {&table}, y,
             [batch, len, D, ids, mask, inv_count, td = table.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               const S* g = yd->grad.data();
               S* gt = ensure_grad_buffer(*td);
               for (int b = 0; b < batch; ++b) {
                 const double ic = inv_count[static_cast<std::size_t>(b)];
                 for (int t = 0; t < len; ++t) {
                   if (!mask[static_cast<std::size_t>(b * len + t)]) continue;
                   const int id = ids[static_cast<std::size_t>(b * len + t)];
                   S* grow = gt + static_cast<std::int64_t>(id) * D;
                   const S* gy = g + static_cast<std::int64_t>(b) * D;
                   for (int d = 0; d < D; ++d) grow[d] += static_cast<S>(static_cast<double>(gy[d]) * ic);
                 }
               }
             });
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization (per-channel over batch and spatial dims)
// ---------------------------------------------------------------------------

// Training mode standardizes with batch statistics and updates the running
// buffers in place; eval mode uses the running buffers as constants.
template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       std::vector<S>& running_mean, std::vector<S>& running_var, bool training,
                       double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 4) throw std::invalid_argument("batch_norm2d expects NCHW input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || static_cast<int>(running_mean.size()) != C ||
      static_cast<int>(running_var.size()) != C) {
    throw std::invalid_argument("batch_norm2d: parameter extents do not match " + std::to_string(C) +
                                " channels");
  }
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  const std::int64_t m = static_cast<std::int64_t>(N) * hw;

  std::vector<double> mu(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  const S* xv = x.data();
  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const S* p = xv + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
      }
      const double mean_c = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int n = 0; n < N; ++n) {
        const S* p = xv + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = static_cast<double>(p[i]) - mean_c;
          vacc += d * d;
        }
      }
      mu[static_cast<std::size_t>(c)] = mean_c;
      var[static_cast<std::size_t>(c)] = vacc / static_cast<double>(m);
      running_mean[static_cast<std::size_t>(c)] = static_cast<S>(
          (1.0 - momentum) * static_cast<double>(running_mean[static_cast<std::size_t>(c)]) +
          momentum * mean_c);
      running_var[static_cast<std::size_t>(c)] = static_cast<S>(
          (1.0 - momentum) * static_cast<double>(running_var[static_cast<std::size_t>(c)]) +
          momentum * var[static_cast<std::size_t>(c)]);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[static_cast<std::size_t>(c)] = static_cast<double>(running_mean[static_cast<std::size_t>(c)]);
      var[static_cast<std::size_t>(c)] = static_cast<double>(running_var[static_cast<std::size_t>(c)]);
    }
  }

  Tensor<S> y(x.shape());
  S* yv = y.data();
  const S* gv = gamma.data();
  const S* bv = beta.data();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double inv_std = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
      const double gc = static_cast<double>(gv[c]), bc = static_cast<double>(bv[c]);
      const double mc = mu[static_cast<std::size_t>(c)];
      const S* p = xv + (static_cast<std::int64_t>(n) * C + c) * hw;
      S* q = yv + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i)
        q[i] = static_cast<S>(gc * ((static_cast<double>(p[i]) - mc) * inv_std) + bc);
    }
  }

  detail::Recorder<S> rec;
  bool nx = rec.track(x), ng = rec.track(gamma), nb = rec.track(beta);
  rec.commit(OpKind::BatchNorm, {&x, &gamma, &beta}, y,
             [nx, ng, nb, N, C, hw, m, eps, training, mu = std::move(mu), var = std::move(var),
              xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               const S* g = yd->grad.data();
               const S* xv = xd->values.data();
               const S* gv = gd->values.data();
               S* gx = nx ? ensure_grad_buffer(*xd) : nullptr;
               S* gg = ng ? ensure_grad_buffer(*gd) : nullptr;
               S* gb = nb ? ensure_grad_buffer(*bd) : nullptr;
               for (int c = 0; c < C; ++c) {
                 const double mc = mu[static_cast<std::size_t>(c)];
                 const double inv_std = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
                 double sum_g = 0.0, sum_gxhat = 0.0;
                 for (int n = 0; n < N; ++n) {
                   const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                   for (std::int64_t i = 0; i < hw; ++i) {
                     const double gi = static_cast<double>(g[base + i]);
                     sum_g += gi;
                     sum_gxhat += gi * (static_cast<double>(xv[base + i]) - mc) * inv_std;
                   }
                 }
                 if (gg) gg[c] += static_cast<S>(sum_gxhat);
                 if (gb) gb[c] += static_cast<S>(sum_g);
                 if (gx) {
                   const double gc = static_cast<double>(gv[c]);
                   if (training) {
                     const double inv_m = 1.0 / static_cast<double>(m);
                     for (int n = 0; n < N; ++n) {
                       const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                       for (std::int64_t i = 0; i < hw; ++i) {
                         const double xhat = (static_cast<double>(xv[base + i]) - mc) * inv_std;
                         const double gi = static_cast<double>(g[base + i]);
                         gx[base + i] += static_cast<S>(
                             gc * inv_std * (gi - inv_m * sum_g - xhat * inv_m * sum_gxhat));
                       }
                     }
                   } else {
                     for (int n = 0; n < N; ++n) {
                       const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                       for (std::int64_t i = 0; i < hw; ++i)
                         gx[base + i] += static_cast<S>(gc * inv_std * static_cast<double>(g[base + i]));
                     }
                   }
                 }
               }
             });
  return y;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy over the batch; logits [B,K], labels in [0,K).
template <typename S>
Tensor<S> cross_entropy_with_logits(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("cross_entropy expects [B,K] logits, got " + shape_str(logits.shape()));
  }
  const int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw std::invalid_argument("cross_entropy: label count " + std::to_string(labels.size()) +
                                " does not match batch " + std::to_string(B));
  }
  for (int l : labels) {
    if (l < 0 || l >= K) throw std::invalid_argument("cross_entropy: label " + std::to_string(l) + " out of range");
  }
  const S* zv = logits.data();
  std::vector<double> probs(static_cast<std::size_t>(B) * K);
  double loss_acc = 0.0;
  for (int b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(zv[b * K + k]));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(zv[b * K + k]) - mx);
    const double lse = mx + std::log(z);
    loss_acc += lse - static_cast<double>(zv[b * K + labels[static_cast<std::size_t>(b)]]);
    for (int k = 0; k < K; ++k)
      probs[static_cast<std::size_t>(b * K + k)] = std::exp(static_cast<double>(zv[b * K + k]) - lse);
  }
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(loss_acc / B));

  detail::Recorder<S> rec;
  rec.track(logits);
  rec.commit(OpKind::CrossEntropy, {&logits}, y,
             [B, K, labels, probs = std::move(probs), zd = logits.ptr(), yd = y.ptr()] {
               if (yd->grad.empty()) return;
               const double g = static_cast<double>(yd->grad[0]) / B;
               S* gz = ensure_grad_buffer(*zd);
               for (int b = 0; b < B; ++b) {
                 for (int k = 0; k < K; ++k) {
                   double p = probs[static_cast<std::size_t>(b * K + k)];
                   if (k == labels[static_cast<std::size_t>(b)]) p -= 1.0;
                   gz[b * K + k] += static_cast<S>(g * p);
                 }
               }
             });
  return y;
}

// Free-function backward; requires the tensor's tape to still be active.
template <typename S>
void backward(const Tensor<S>& loss) {
  GradTape<S>* tape = GradTape<S>::active();
  if (!tape) throw std::runtime_error("backward: no active tape");
  tape->backward(loss);
}

}  // namespace mmnas
