#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "glyphdiff/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace glyphdiff {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

[[noreturn]] inline void fail_shape(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

inline void check(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) fail_shape(op, detail);
}

// ---------------------------------------------------------------------------
// thread controls (kernel-internal parallelism; reduction order stays fixed
// per output element so results do not depend on the thread count)

inline int& thread_count_ref() {
  static int n = 1;
  return n;
}

inline void set_num_threads(int n) {
  thread_count_ref() = n < 1 ? 1 : n;
#ifdef _OPENMP
  omp_set_num_threads(thread_count_ref());
#endif
}

inline int num_threads() { return thread_count_ref(); }

// ---------------------------------------------------------------------------
// autodiff node + tape

// Grad recording is thread-local so frozen models can serve concurrent
// readers while a training thread records its own tape.
inline bool& grad_mode_ref() {
  static thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_ref(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand during backward
  bool requires_grad = false;
  std::uint64_t id = 0;  // creation order; the implicit tape position
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Value-semantics handle over a shared node. Ops build fresh nodes; a node is
// recorded on the tape (gets parents + a backward closure) only when grad
// recording is on and some parent requires grad.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    auto node = std::make_shared<Node>();
    node->value.assign(static_cast<std::size_t>(numel(shape)), v);
    node->shape = std::move(shape);
    node->id = next_node_id();
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    check(static_cast<std::int64_t>(data.size()) == numel(shape), "tensor",
          "element count " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->id = next_node_id();
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  // leaf with requires_grad set; the unit model parameters are built from
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& mutable_data() { return node_->value; }
  const std::vector<T>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  T item() const {
    check(size() == 1, "item", "tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
inline bool track(const std::initializer_list<Tensor<T>>& inputs) {
  if (!grad_enabled()) return false;
  for (const auto& t : inputs) {
    if (t.node()->requires_grad || t.node()->backward || !t.node()->parents.empty()) return true;
  }
  return false;
}

// attach parents + closure; output participates in future tapes
template <typename T>
inline void record(Tensor<T>& out, std::initializer_list<Tensor<T>> parents,
                   std::function<void(TensorNode<T>&)> fn) {
  auto node = out.node();
  for (const auto& p : parents) node->parents.push_back(p.node());
  node->backward = std::move(fn);
  node->requires_grad = true;  // gradient flows through
}

}  // namespace detail

// Reverse pass from a scalar loss. Gradients accumulate additively into every
// reachable node that participates in the graph; running it twice without a
// reset doubles them.
template <typename T>
inline void backward(const Tensor<T>& loss) {
  check(loss.size() == 1, "backward", "loss must be scalar, got shape " + shape_str(loss.shape()));
  using NodeP = std::shared_ptr<TensorNode<T>>;

  // collect reachable nodes; creation ids give the tape order
  std::vector<NodeP> order;
  std::vector<NodeP> stack{loss.node()};
  std::vector<const TensorNode<T>*> seen;
  auto visited = [&](const TensorNode<T>* n) {
    return std::find(seen.begin(), seen.end(), n) != seen.end();
  };
  while (!stack.empty()) {
    NodeP n = stack.back();
    stack.pop_back();
    if (visited(n.get())) continue;
    seen.push_back(n.get());
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const NodeP& a, const NodeP& b) { return a->id > b->id; });

  // interior grads are per-pass scratch; only leaves accumulate across calls
  for (auto& n : order)
    if (n->backward) n->grad.assign(n->value.size(), T(0));
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto& n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// broadcasting helpers (NumPy trailing-alignment rules)

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    int ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    int eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      fail_shape(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[r - 1 - i] = std::max(ea, eb);
  }
  return out;
}

// strides for iterating a (possibly) broadcast operand over an output shape
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t ii = in.size() - 1 - i;
    std::size_t oi = out.size() - 1 - i;
    strides[oi] = (in[ii] == 1 && out[oi] != 1) ? 0 : s;
    s *= in[ii];
  }
  return strides;
}

template <typename T, typename FwdOp>
inline void broadcast_loop(const Shape& out_shape, const std::vector<T>& a, const Shape& ash,
                           const std::vector<T>& b, const Shape& bsh, std::vector<T>& out, FwdOp f) {
  const std::int64_t n = numel(out_shape);
  auto sa = broadcast_strides(ash, out_shape);
  auto sb = broadcast_strides(bsh, out_shape);
  const std::size_t r = out_shape.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = f(a[static_cast<std::size_t>(ia)], b[static_cast<std::size_t>(ib)]);
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
    }
  }
}

// scatter grad back onto a (possibly broadcast) operand
template <typename T, typename GradOp>
inline void broadcast_scatter(const Shape& out_shape, const std::vector<T>& gout,
                              std::vector<T>& gin, const Shape& in_shape,
                              const std::vector<T>& a, const Shape& ash,
                              const std::vector<T>& b, const Shape& bsh, GradOp g) {
  const std::int64_t n = numel(out_shape);
  auto si = broadcast_strides(in_shape, out_shape);
  auto sa = broadcast_strides(ash, out_shape);
  auto sb = broadcast_strides(bsh, out_shape);
  const std::size_t r = out_shape.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ii = 0, ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    gin[static_cast<std::size_t>(ii)] +=
        g(gout[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(ia)], b[static_cast<std::size_t>(ib)]);
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      ii += si[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      ii -= si[d] * out_shape[d];
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
    }
  }
}

template <typename T>
inline bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (detail::same_shape(a, b)) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (detail::track<T>({a, b})) {
      detail::record<T>(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<T>& o) {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          an->grad[i] += o.grad[i];
          bn->grad[i] += o.grad[i];
        }
      });
    }
    return out;
  }
  Shape os = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = Tensor<T>::zeros(os);
  detail::broadcast_loop(os, a.data(), a.shape(), b.data(), b.shape(), out.mutable_data(),
                         [](T x, T y) { return x + y; });
  if (detail::track<T>({a, b})) {
    detail::record<T>(out, {a, b}, [an = a.node(), bn = b.node(), os](TensorNode<T>& o) {
      an->ensure_grad();
      bn->ensure_grad();
      detail::broadcast_scatter(os, o.grad, an->grad, an->shape, an->value, an->shape, bn->value,
                                bn->shape, [](T g, T, T) { return g; });
      detail::broadcast_scatter(os, o.grad, bn->grad, bn->shape, an->value, an->shape, bn->value,
                                bn->shape, [](T g, T, T) { return g; });
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (detail::same_shape(a, b)) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (detail::track<T>({a, b})) {
      detail::record<T>(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<T>& o) {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          an->grad[i] += o.grad[i] * bn->value[i];
          bn->grad[i] += o.grad[i] * an->value[i];
        }
      });
    }
    return out;
  }
  Shape os = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = Tensor<T>::zeros(os);
  detail::broadcast_loop(os, a.data(), a.shape(), b.data(), b.shape(), out.mutable_data(),
                         [](T x, T y) { return x * y; });
  if (detail::track<T>({a, b})) {
    detail::record<T>(out, {a, b}, [an = a.node(), bn = b.node(), os](TensorNode<T>& o) {
      an->ensure_grad();
      bn->ensure_grad();
      detail::broadcast_scatter(os, o.grad, an->grad, an->shape, an->value, an->shape, bn->value,
                                bn->shape, [](T g, T, T y) { return g * y; });
      detail::broadcast_scatter(os, o.grad, bn->grad, bn->shape, an->value, an->shape, bn->value,
                                bn->shape, [](T g, T x, T) { return g * x; });
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  if (detail::track<T>({a})) {
    detail::record<T>(out, {a}, [an = a.node(), s](TensorNode<T>& o) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, neg(b));
}

template <typename T>
inline Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  if (detail::track<T>({a})) {
    detail::record<T>(out, {a}, [an = a.node()](TensorNode<T>& o) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (an->value[i] > T(0)) an->grad[i] += o.grad[i];
    });
  }
  return out;
}

// exact gelu: x * Phi(x)
template <typename T>
inline Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (detail::track<T>({a})) {
    detail::record<T>(out, {a}, [an = a.node()](TensorNode<T>& o) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        double x = static_cast<double>(an->value[i]);
        double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        an->grad[i] += o.grad[i] * static_cast<T>(phi + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul",
        "expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  check(k == k2, "matmul",
        "inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros({m, n});
  const T* av = a.data().data();
  const T* bv = b.data().data();
  T* ov = out.mutable_data().data();
#pragma omp parallel for schedule(static) if (num_threads() > 1 && m >= 4)
  for (int i = 0; i < m; ++i) {
    T* orow = ov + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T x = av[static_cast<std::size_t>(i) * k + p];
      const T* brow = bv + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  if (detail::track<T>({a, b})) {
    detail::record<T>(out, {a, b}, [an = a.node(), bn = b.node(), m, k, n](TensorNode<T>& o) {
      an->ensure_grad();
      bn->ensure_grad();
      const T* g = o.grad.data();
      const T* av = an->value.data();
      const T* bv = bn->value.data();
      // dA = G * B^T
      T* da = an->grad.data();
#pragma omp parallel for schedule(static) if (num_threads() > 1 && m >= 4)
      for (int i = 0; i < m; ++i) {
        const T* grow = g + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const T* brow = bv + static_cast<std::size_t>(p) * n;
          T acc = T(0);
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da[static_cast<std::size_t>(i) * k + p] += acc;
        }
      }
      // dB = A^T * G
      T* db = bn->grad.data();
#pragma omp parallel for schedule(static) if (num_threads() > 1 && k >= 4)
      for (int p = 0; p < k; ++p) {
        T* dbrow = db + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
          const T x = av[static_cast<std::size_t>(i) * k + p];
          const T* grow = g + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) dbrow[j] += x * grow[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d (zero padding; square kernel layout C_out x C_in x kh x kw)

namespace detail {

struct ConvDims {
  int batch, cin, h, w, cout, kh, kw, stride, ph, pw, oh, ow;
  bool batched;
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ws, int stride, int ph, int pw) {
  check(stride >= 1, "conv2d", "stride must be positive");
  check(ph >= 0 && pw >= 0, "conv2d", "padding must be non-negative");
  check(ws.size() == 4, "conv2d", "weight must be rank 4, got " + shape_str(ws));
  ConvDims d{};
  if (xs.size() == 3) {
    d.batched = false;
    d.batch = 1;
    d.cin = xs[0];
    d.h = xs[1];
    d.w = xs[2];
  } else if (xs.size() == 4) {
    d.batched = true;
    d.batch = xs[0];
    d.cin = xs[1];
    d.h = xs[2];
    d.w = xs[3];
  } else {
    fail_shape("conv2d", "input must be rank 3 or 4, got " + shape_str(xs));
  }
  d.cout = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  d.stride = stride;
  d.ph = ph;
  d.pw = pw;
  check(ws[1] == d.cin, "conv2d", "weight in-channels " + std::to_string(ws[1]) +
                                      " != input channels " + std::to_string(d.cin));
  check(d.kh <= d.h + 2 * ph && d.kw <= d.w + 2 * pw, "conv2d",
        "kernel larger than padded input");
  d.oh = (d.h + 2 * ph - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pw - d.kw) / stride + 1;
  return d;
}

}  // namespace detail

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                        int pad_h, int pad_w) {
  auto d = detail::conv_dims(x.shape(), w.shape(), stride, pad_h, pad_w);
  if (bias.defined())
    check(bias.rank() == 1 && bias.dim(0) == d.cout, "conv2d", "bias must be [C_out]");
  Shape os = d.batched ? Shape{d.batch, d.cout, d.oh, d.ow} : Shape{d.cout, d.oh, d.ow};
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  const T* bv = bias.defined() ? bias.data().data() : nullptr;
  T* ov = out.mutable_data().data();
  const std::int64_t xplane = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t oplane = static_cast<std::int64_t>(d.oh) * d.ow;
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
  for (int b = 0; b < d.batch; ++b) {
    for (int oc = 0; oc < d.cout; ++oc) {
      T* op = ov + (static_cast<std::int64_t>(b) * d.cout + oc) * oplane;
      if (bv) {
        for (std::int64_t i = 0; i < oplane; ++i) op[i] = bv[oc];
      }
      for (int ic = 0; ic < d.cin; ++ic) {
        const T* xp = xv + (static_cast<std::int64_t>(b) * d.cin + ic) * xplane;
        const T* wp = wv + ((static_cast<std::int64_t>(oc) * d.cin + ic) * d.kh) * d.kw;
        for (int kh = 0; kh < d.kh; ++kh) {
          for (int kw = 0; kw < d.kw; ++kw) {
            const T wval = wp[kh * d.kw + kw];
            if (wval == T(0)) continue;
            for (int oh = 0; oh < d.oh; ++oh) {
              const int ih = oh * d.stride - d.ph + kh;
              if (ih < 0 || ih >= d.h) continue;
              const T* xrow = xp + static_cast<std::int64_t>(ih) * d.w;
              T* orow = op + static_cast<std::int64_t>(oh) * d.ow;
              if (d.stride == 1) {
                int ow0 = std::max(0, d.pw - kw);
                int ow1 = std::min(d.ow, d.w + d.pw - kw);
                const T* xq = xrow + ow0 - d.pw + kw;
                for (int ow = ow0; ow < ow1; ++ow) orow[ow] += wval * xq[ow - ow0];
              } else {
                for (int ow = 0; ow < d.ow; ++ow) {
                  const int iw = ow * d.stride - d.pw + kw;
                  if (iw < 0 || iw >= d.w) continue;
                  orow[ow] += wval * xrow[iw];
                }
              }
            }
          }
        }
      }
    }
  }
  bool tracked = bias.defined() ? detail::track<T>({x, w, bias}) : detail::track<T>({x, w});
  if (tracked) {
    auto fn = [xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr,
               d](TensorNode<T>& o) {
      xn->ensure_grad();
      wn->ensure_grad();
      if (bn) bn->ensure_grad();
      const T* g = o.grad.data();
      const std::int64_t xplane = static_cast<std::int64_t>(d.h) * d.w;
      const std::int64_t oplane = static_cast<std::int64_t>(d.oh) * d.ow;
      const T* xv = xn->value.data();
      const T* wv = wn->value.data();
      // dx: disjoint writes across (b, ic)
      T* dx = xn->grad.data();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
      for (int b = 0; b < d.batch; ++b) {
        for (int ic = 0; ic < d.cin; ++ic) {
          T* dxp = dx + (static_cast<std::int64_t>(b) * d.cin + ic) * xplane;
          for (int oc = 0; oc < d.cout; ++oc) {
            const T* gp = g + (static_cast<std::int64_t>(b) * d.cout + oc) * oplane;
            const T* wp = wv + ((static_cast<std::int64_t>(oc) * d.cin + ic) * d.kh) * d.kw;
            for (int kh = 0; kh < d.kh; ++kh) {
              for (int kw = 0; kw < d.kw; ++kw) {
                const T wval = wp[kh * d.kw + kw];
                if (wval == T(0)) continue;
                for (int oh = 0; oh < d.oh; ++oh) {
                  const int ih = oh * d.stride - d.ph + kh;
                  if (ih < 0 || ih >= d.h) continue;
                  const T* grow = gp + static_cast<std::int64_t>(oh) * d.ow;
                  T* dxrow = dxp + static_cast<std::int64_t>(ih) * d.w;
                  for (int ow = 0; ow < d.ow; ++ow) {
                    const int iw = ow * d.stride - d.pw + kw;
                    if (iw < 0 || iw >= d.w) continue;
                    dxrow[iw] += wval * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
      // dw: disjoint across oc
      T* dw = wn->grad.data();
#pragma omp parallel for schedule(static) if (num_threads() > 1)
      for (int oc = 0; oc < d.cout; ++oc) {
        for (int ic = 0; ic < d.cin; ++ic) {
          T* dwp = dw + ((static_cast<std::int64_t>(oc) * d.cin + ic) * d.kh) * d.kw;
          for (int b = 0; b < d.batch; ++b) {
            const T* gp = g + (static_cast<std::int64_t>(b) * d.cout + oc) * oplane;
            const T* xp = xv + (static_cast<std::int64_t>(b) * d.cin + ic) * xplane;
            for (int kh = 0; kh < d.kh; ++kh) {
              for (int kw = 0; kw < d.kw; ++kw) {
                T acc = T(0);
                for (int oh = 0; oh < d.oh; ++oh) {
                  const int ih = oh * d.stride - d.ph + kh;
                  if (ih < 0 || ih >= d.h) continue;
                  const T* grow = gp + static_cast<std::int64_t>(oh) * d.ow;
                  const T* xrow = xp + static_cast<std::int64_t>(ih) * d.w;
                  for (int ow = 0; ow < d.ow; ++ow) {
                    const int iw = ow * d.stride - d.pw + kw;
                    if (iw < 0 || iw >= d.w) continue;
                    acc += grow[ow] * xrow[iw];
                  }
                }
                dwp[kh * d.kw + kw] += acc;
              }
            }
          }
        }
      }
      if (bn) {
        T* db = bn->grad.data();
        for (int b = 0; b < d.batch; ++b)
          for (int oc = 0; oc < d.cout; ++oc) {
            const T* gp = g + (static_cast<std::int64_t>(b) * d.cout + oc) * oplane;
            T acc = T(0);
            for (std::int64_t i = 0; i < oplane; ++i) acc += gp[i];
            db[oc] += acc;
          }
      }
    };
    if (bias.defined())
      detail::record<T>(out, {x, w, bias}, std::move(fn));
    else
      detail::record<T>(out, {x, w}, std::move(fn));
  }
  return out;
}

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                        int pad) {
  return conv2d(x, w, bias, stride, pad, pad);
}

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  return conv2d(x, w, Tensor<T>(), stride, pad, pad);
}

// ---------------------------------------------------------------------------
// bilinear upsampling (align-corners false)

template <typename T>
inline Tensor<T> upsample_bilinear(const Tensor<T>& x, int h2, int w2) {
  check(h2 >= 1 && w2 >= 1, "upsample_bilinear", "target extents must be >= 1");
  check(x.rank() == 3 || x.rank() == 4, "upsample_bilinear",
        "input must be rank 3 or 4, got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const int batch = batched ? x.dim(0) : 1;
  const int c = batched ? x.dim(1) : x.dim(0);
  const int h = batched ? x.dim(2) : x.dim(1);
  const int w = batched ? x.dim(3) : x.dim(2);
  Shape os = batched ? Shape{batch, c, h2, w2} : Shape{c, h2, w2};
  Tensor<T> out = Tensor<T>::zeros(os);

  // precompute source coordinates: s = (d + 0.5) * (in/out) - 0.5, clamped
  struct Lerp {
    int lo, hi;
    T frac;
  };
  auto make_axis = [](int in, int outn) {
    std::vector<Lerp> m(static_cast<std::size_t>(outn));
    for (int dpos = 0; dpos < outn; ++dpos) {
      double s = (dpos + 0.5) * (static_cast<double>(in) / outn) - 0.5;
      if (s < 0) s = 0;
      if (s > in - 1) s = in - 1;
      int lo = static_cast<int>(std::floor(s));
      int hi = std::min(lo + 1, in - 1);
      m[static_cast<std::size_t>(dpos)] = {lo, hi, static_cast<T>(s - lo)};
    }
    return m;
  };
  auto ys = make_axis(h, h2);
  auto xs = make_axis(w, w2);
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  const std::int64_t iplane = static_cast<std::int64_t>(h) * w;
  const std::int64_t oplane = static_cast<std::int64_t>(h2) * w2;
  const int planes = batch * c;
#pragma omp parallel for schedule(static) if (num_threads() > 1 && planes >= 2)
  for (int p = 0; p < planes; ++p) {
    const T* ip = xv + p * iplane;
    T* op = ov + p * oplane;
    for (int oy = 0; oy < h2; ++oy) {
      const auto& ly = ys[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < w2; ++ox) {
        const auto& lx = xs[static_cast<std::size_t>(ox)];
        T v00 = ip[static_cast<std::int64_t>(ly.lo) * w + lx.lo];
        T v01 = ip[static_cast<std::int64_t>(ly.lo) * w + lx.hi];
        T v10 = ip[static_cast<std::int64_t>(ly.hi) * w + lx.lo];
        T v11 = ip[static_cast<std::int64_t>(ly.hi) * w + lx.hi];
        T top = v00 + (v01 - v00) * lx.frac;
        T bot = v10 + (v11 - v10) * lx.frac;
        op[static_cast<std::int64_t>(oy) * w2 + ox] = top + (bot - top) * ly.frac;
      }
    }
  }
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node(), ys, xs, h, w, h2, w2, planes](TensorNode<T>& o) {
      xn->ensure_grad();
      const std::int64_t iplane = static_cast<std::int64_t>(h) * w;
      const std::int64_t oplane = static_cast<std::int64_t>(h2) * w2;
      const T* g = o.grad.data();
      T* dx = xn->grad.data();
#pragma omp parallel for schedule(static) if (num_threads() > 1 && planes >= 2)
      for (int p = 0; p < planes; ++p) {
        const T* gp = g + p * oplane;
        T* dxp = dx + p * iplane;
        for (int oy = 0; oy < h2; ++oy) {
          const auto& ly = ys[static_cast<std::size_t>(oy)];
          for (int ox = 0; ox < w2; ++ox) {
            const auto& lx = xs[static_cast<std::size_t>(ox)];
            const T gv = gp[static_cast<std::int64_t>(oy) * w2 + ox];
            const T fy = ly.frac, fx = lx.frac;
            dxp[static_cast<std::int64_t>(ly.lo) * w + lx.lo] += gv * (1 - fy) * (1 - fx);
            dxp[static_cast<std::int64_t>(ly.lo) * w + lx.hi] += gv * (1 - fy) * fx;
            dxp[static_cast<std::int64_t>(ly.hi) * w + lx.lo] += gv * fy * (1 - fx);
            dxp[static_cast<std::int64_t>(ly.hi) * w + lx.hi] += gv * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

// adaptive average pooling over the last two axes
template <typename T>
inline Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, int h2, int w2) {
  check(h2 >= 1 && w2 >= 1, "adaptive_avg_pool2d", "target extents must be >= 1");
  check(x.rank() == 3 || x.rank() == 4, "adaptive_avg_pool2d",
        "input must be rank 3 or 4, got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const int batch = batched ? x.dim(0) : 1;
  const int c = batched ? x.dim(1) : x.dim(0);
  const int h = batched ? x.dim(2) : x.dim(1);
  const int w = batched ? x.dim(3) : x.dim(2);
  Shape os = batched ? Shape{batch, c, h2, w2} : Shape{c, h2, w2};
  Tensor<T> out = Tensor<T>::zeros(os);
  auto lo = [](int i, int in, int outn) { return (i * in) / outn; };
  auto hi = [](int i, int in, int outn) { return ((i + 1) * in + outn - 1) / outn; };
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  const std::int64_t iplane = static_cast<std::int64_t>(h) * w;
  const std::int64_t oplane = static_cast<std::int64_t>(h2) * w2;
  const int planes = batch * c;
  for (int p = 0; p < planes; ++p) {
    const T* ip = xv + p * iplane;
    T* op = ov + p * oplane;
    for (int oy = 0; oy < h2; ++oy) {
      int y0 = lo(oy, h, h2), y1 = hi(oy, h, h2);
      for (int ox = 0; ox < w2; ++ox) {
        int x0 = lo(ox, w, w2), x1 = hi(ox, w, w2);
        T acc = T(0);
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) acc += ip[static_cast<std::int64_t>(yy) * w + xx];
        op[static_cast<std::int64_t>(oy) * w2 + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node(), h, w, h2, w2, planes, lo, hi](TensorNode<T>& o) {
      xn->ensure_grad();
      const std::int64_t iplane = static_cast<std::int64_t>(h) * w;
      const std::int64_t oplane = static_cast<std::int64_t>(h2) * w2;
      const T* g = o.grad.data();
      T* dx = xn->grad.data();
      for (int p = 0; p < planes; ++p) {
        const T* gp = g + p * oplane;
        T* dxp = dx + p * iplane;
        for (int oy = 0; oy < h2; ++oy) {
          int y0 = lo(oy, h, h2), y1 = hi(oy, h, h2);
          for (int ox = 0; ox < w2; ++ox) {
            int x0 = lo(ox, w, w2), x1 = hi(ox, w, w2);
            const T gv = gp[static_cast<std::int64_t>(oy) * w2 + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
            for (int yy = y0; yy < y1; ++yy)
              for (int xx = x0; xx < x1; ++xx) dxp[static_cast<std::int64_t>(yy) * w + xx] += gv;
          }
        }
      }
    });
  }
  return out;
}

// mean over one axis (the axis is removed)
template <typename T>
inline Tensor<T> mean_pool(const Tensor<T>& x, int axis) {
  check(axis >= 0 && axis < x.rank(), "mean_pool", "axis out of range");
  const auto& s = x.shape();
  Shape os;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(s[static_cast<std::size_t>(i)]);
  if (os.empty()) os = {1};
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const int n = s[static_cast<std::size_t>(axis)];
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (int a = 0; a < n; ++a) {
      const T* ip = xv + (o * n + a) * inner;
      T* op = ov + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) op[i] += ip[i];
    }
  for (std::int64_t i = 0; i < outer * inner; ++i) ov[i] /= static_cast<T>(n);
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node(), outer, inner, n](TensorNode<T>& o) {
      xn->ensure_grad();
      const T* g = o.grad.data();
      T* dx = xn->grad.data();
      const T invn = T(1) / static_cast<T>(n);
      for (std::int64_t ou = 0; ou < outer; ++ou)
        for (int a = 0; a < n; ++a) {
          T* dp = dx + (ou * n + a) * inner;
          const T* gp = g + ou * inner;
          for (std::int64_t i = 0; i < inner; ++i) dp[i] += gp[i] * invn;
        }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.mutable_data()[0] = acc;
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node()](TensorNode<T>& o) {
      xn->ensure_grad();
      const T g = o.grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// normalization & softmax

template <typename T>
inline Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                            T eps) {
  check(eps > T(0), "layer_norm", "eps must be positive");
  check(x.rank() >= 1, "layer_norm", "input must have rank >= 1");
  const int d = x.dim(x.rank() - 1);
  check(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d, "layer_norm",
        "gain/bias must be rank-1 of the last extent");
  const std::int64_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data().data();
  const T* gv = gain.data().data();
  const T* bv = bias.data().data();
  T* ov = out.mutable_data().data();
  std::vector<T> mean(static_cast<std::size_t>(rows)), rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T m = T(0);
    for (int i = 0; i < d; ++i) m += row[i];
    m /= static_cast<T>(d);
    T var = T(0);
    for (int i = 0; i < d; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[static_cast<std::size_t>(r)] = m;
    rstd[static_cast<std::size_t>(r)] = rs;
    T* orow = ov + r * d;
    for (int i = 0; i < d; ++i) orow[i] = (row[i] - m) * rs * gv[i] + bv[i];
  }
  if (detail::track<T>({x, gain, bias})) {
    detail::record<T>(out, {x, gain, bias},
                      [xn = x.node(), gn = gain.node(), bn = bias.node(), mean, rstd, d,
                       rows](TensorNode<T>& o) {
                        xn->ensure_grad();
                        gn->ensure_grad();
                        bn->ensure_grad();
                        const T* g = o.grad.data();
                        const T* xv = xn->value.data();
                        const T* gv = gn->value.data();
                        for (std::int64_t r = 0; r < rows; ++r) {
                          const T* grow = g + r * d;
                          const T* xrow = xv + r * d;
                          const T m = mean[static_cast<std::size_t>(r)];
                          const T rs = rstd[static_cast<std::size_t>(r)];
                          // d(gain), d(bias)
                          for (int i = 0; i < d; ++i) {
                            const T xhat = (xrow[i] - m) * rs;
                            gn->grad[static_cast<std::size_t>(i)] += grow[i] * xhat;
                            bn->grad[static_cast<std::size_t>(i)] += grow[i];
                          }
                          // d(x): through xhat, mean, var
                          T sum_gy = T(0), sum_gy_xhat = T(0);
                          for (int i = 0; i < d; ++i) {
                            const T gy = grow[i] * gv[i];
                            sum_gy += gy;
                            sum_gy_xhat += gy * (xrow[i] - m) * rs;
                          }
                          T* dxrow = xn->grad.data() + r * d;
                          const T invd = T(1) / static_cast<T>(d);
                          for (int i = 0; i < d; ++i) {
                            const T gy = grow[i] * gv[i];
                            const T xhat = (xrow[i] - m) * rs;
                            dxrow[i] += rs * (gy - invd * sum_gy - xhat * invd * sum_gy_xhat);
                          }
                        }
                      });
  }
  return out;
}

// softmax over the last axis, max-subtracted
template <typename T>
inline Tensor<T> softmax(const Tensor<T>& x) {
  check(x.rank() >= 1, "softmax", "input must have rank >= 1");
  const int d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T* orow = ov + r * d;
    T mx = row[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    T sum = T(0);
    for (int i = 0; i < d; ++i) {
      orow[i] = std::exp(row[i] - mx);
      sum += orow[i];
    }
    const T inv = T(1) / sum;
    for (int i = 0; i < d; ++i) orow[i] *= inv;
  }
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node(), d, rows](TensorNode<T>& o) {
      xn->ensure_grad();
      const T* g = o.grad.data();
      const T* y = o.value.data();
      T* dx = xn->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* grow = g + r * d;
        const T* yrow = y + r * d;
        T dot = T(0);
        for (int i = 0; i < d; ++i) dot += grow[i] * yrow[i];
        T* dxrow = dx + r * d;
        for (int i = 0; i < d; ++i) dxrow[i] += yrow[i] * (grow[i] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
inline Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check(numel(shape) == x.size(), "reshape",
        "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.data());
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node()](TensorNode<T>& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  check(static_cast<int>(axes.size()) == r, "permute", "axes size must equal rank");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    check(a >= 0 && a < r && !used[static_cast<std::size_t>(a)], "permute", "invalid axes permutation");
    used[static_cast<std::size_t>(a)] = true;
  }
  const auto& s = x.shape();
  Shape os(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  // strides of input, then gather
  std::vector<std::int64_t> istr(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    istr[static_cast<std::size_t>(i)] = istr[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
  std::vector<std::int64_t> gstr(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) gstr[static_cast<std::size_t>(i)] = istr[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  const std::int64_t n = x.size();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t src = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    ov[i] = xv[src];
    for (int dpos = r; dpos-- > 0;) {
      idx[static_cast<std::size_t>(dpos)]++;
      src += gstr[static_cast<std::size_t>(dpos)];
      if (idx[static_cast<std::size_t>(dpos)] < os[static_cast<std::size_t>(dpos)]) break;
      idx[static_cast<std::size_t>(dpos)] = 0;
      src -= gstr[static_cast<std::size_t>(dpos)] * os[static_cast<std::size_t>(dpos)];
    }
  }
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node(), os, gstr](TensorNode<T>& o) {
      xn->ensure_grad();
      const int r = static_cast<int>(os.size());
      const T* g = o.grad.data();
      T* dx = xn->grad.data();
      std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
      std::int64_t src = 0;
      const std::int64_t n = static_cast<std::int64_t>(o.grad.size());
      for (std::int64_t i = 0; i < n; ++i) {
        dx[src] += g[i];
        for (int dpos = r; dpos-- > 0;) {
          idx[static_cast<std::size_t>(dpos)]++;
          src += gstr[static_cast<std::size_t>(dpos)];
          if (idx[static_cast<std::size_t>(dpos)] < os[static_cast<std::size_t>(dpos)]) break;
          idx[static_cast<std::size_t>(dpos)] = 0;
          src -= gstr[static_cast<std::size_t>(dpos)] * os[static_cast<std::size_t>(dpos)];
        }
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> transpose(const Tensor<T>& x) {
  check(x.rank() == 2, "transpose", "expects rank-2 input, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename T>
inline Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  check(!parts.empty(), "concat", "needs at least one input");
  const int r = parts[0].rank();
  check(axis >= 0 && axis < r, "concat", "axis out of range");
  Shape os = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check(p.rank() == r, "concat", "rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis)
        check(p.dim(i) == os[static_cast<std::size_t>(i)], "concat",
              "extent mismatch off the concat axis");
    total += p.dim(axis);
  }
  os[static_cast<std::size_t>(axis)] = static_cast<int>(total);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<std::size_t>(i)];
  Tensor<T> out = Tensor<T>::zeros(os);
  T* ov = out.mutable_data().data();
  const std::int64_t ostride = total * inner;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t pa = p.dim(axis) * inner;
    const T* pv = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(pv + o * pa, pv + (o + 1) * pa, ov + o * ostride + offset);
    offset += pa;
  }
  bool tracked = grad_enabled();
  if (tracked) {
    bool any = false;
    for (const auto& p : parts)
      if (p.node()->requires_grad || p.node()->backward || !p.node()->parents.empty()) any = true;
    tracked = any;
  }
  if (tracked) {
    std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
    std::vector<std::int64_t> paxis;
    for (const auto& p : parts) {
      pnodes.push_back(p.node());
      paxis.push_back(p.dim(axis) * inner);
      out.node()->parents.push_back(p.node());
    }
    out.node()->requires_grad = true;
    out.node()->backward = [pnodes, paxis, outer, ostride](TensorNode<T>& o) {
      const T* g = o.grad.data();
      std::int64_t offset = 0;
      for (std::size_t k = 0; k < pnodes.size(); ++k) {
        pnodes[k]->ensure_grad();
        T* dp = pnodes[k]->grad.data();
        for (std::int64_t ou = 0; ou < outer; ++ou) {
          const T* gp = g + ou * ostride + offset;
          T* dq = dp + ou * paxis[k];
          for (std::int64_t i = 0; i < paxis[k]; ++i) dq[i] += gp[i];
        }
        offset += paxis[k];
      }
    };
  }
  return out;
}

// contiguous slice along one axis
template <typename T>
inline Tensor<T> narrow(const Tensor<T>& x, int axis, int start, int len) {
  const int r = x.rank();
  check(axis >= 0 && axis < r, "narrow", "axis out of range");
  check(start >= 0 && len >= 1 && start + len <= x.dim(axis), "narrow", "slice out of range");
  const auto& s = x.shape();
  Shape os = s;
  os[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t istride = static_cast<std::int64_t>(x.dim(axis)) * inner;
  const std::int64_t ostride = static_cast<std::int64_t>(len) * inner;
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(xv + o * istride + start * inner, xv + o * istride + start * inner + ostride,
              ov + o * ostride);
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node(), outer, inner, istride, ostride, start](TensorNode<T>& o) {
      xn->ensure_grad();
      const T* g = o.grad.data();
      T* dx = xn->grad.data();
      for (std::int64_t ou = 0; ou < outer; ++ou) {
        const T* gp = g + ou * ostride;
        T* dp = dx + ou * istride + start * inner;
        for (std::int64_t i = 0; i < ostride; ++i) dp[i] += gp[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// lookup, losses, RoPE helper

template <typename T>
inline Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& indices) {
  check(table.rank() == 2, "embedding_lookup", "table must be rank 2");
  const int v = table.dim(0), d = table.dim(1);
  for (int ix : indices)
    check(ix >= 0 && ix < v, "embedding_lookup", "index " + std::to_string(ix) + " out of range");
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(indices.size()), d});
  const T* tv = table.data().data();
  T* ov = out.mutable_data().data();
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy(tv + static_cast<std::int64_t>(indices[i]) * d, tv + static_cast<std::int64_t>(indices[i] + 1) * d,
              ov + static_cast<std::int64_t>(i) * d);
  if (detail::track<T>({table})) {
    detail::record<T>(out, {table}, [tn = table.node(), indices, d](TensorNode<T>& o) {
      tn->ensure_grad();
      const T* g = o.grad.data();
      T* dt = tn->grad.data();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        const T* gp = g + static_cast<std::int64_t>(i) * d;
        T* dp = dt + static_cast<std::int64_t>(indices[i]) * d;
        for (int j = 0; j < d; ++j) dp[j] += gp[j];
      }
    });
  }
  return out;
}

// negative log likelihood over probability rows: -mean_i log p_i[target_i]
template <typename T>
inline Tensor<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& targets) {
  check(probs.rank() == 2, "cross_entropy", "probs must be rank 2");
  const int rows = probs.dim(0), d = probs.dim(1);
  check(static_cast<int>(targets.size()) == rows, "cross_entropy", "one target per row required");
  for (int t : targets) check(t >= 0 && t < d, "cross_entropy", "target class out of range");
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* pv = probs.data().data();
  T acc = T(0);
  for (int r = 0; r < rows; ++r) acc -= std::log(pv[static_cast<std::int64_t>(r) * d + targets[static_cast<std::size_t>(r)]]);
  out.mutable_data()[0] = acc / static_cast<T>(rows);
  if (detail::track<T>({probs})) {
    detail::record<T>(out, {probs}, [pn = probs.node(), targets, rows, d](TensorNode<T>& o) {
      pn->ensure_grad();
      const T g = o.grad[0] / static_cast<T>(rows);
      for (int r = 0; r < rows; ++r) {
        const std::int64_t k = static_cast<std::int64_t>(r) * d + targets[static_cast<std::size_t>(r)];
        pn->grad[static_cast<std::size_t>(k)] -= g / pn->value[static_cast<std::size_t>(k)];
      }
    });
  }
  return out;
}

// pairwise quarter turn on the last axis: (x0, x1) -> (-x1, x0); with the
// cos/sin tables this composes into the rotary position embedding
template <typename T>
inline Tensor<T> rotate_pairs(const Tensor<T>& x) {
  const int d = x.dim(x.rank() - 1);
  check(d % 2 == 0, "rotate_pairs", "last extent must be even");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  for (std::int64_t i = 0; i < x.size(); i += 2) {
    ov[i] = -xv[i + 1];
    ov[i + 1] = xv[i];
  }
  if (detail::track<T>({x})) {
    detail::record<T>(out, {x}, [xn = x.node()](TensorNode<T>& o) {
      xn->ensure_grad();
      const T* g = o.grad.data();
      T* dx = xn->grad.data();
      for (std::size_t i = 0; i < o.grad.size(); i += 2) {
        dx[i] += g[i + 1];
        dx[i + 1] -= g[i];
      }
    });
  }
  return out;
}

}  // namespace glyphdiff
