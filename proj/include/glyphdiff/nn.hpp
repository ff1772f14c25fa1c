#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "glyphdiff/rng.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff {

// Named parameter registry. Iteration is name-ordered, so optimizer updates,
// checkpoint layout, and gradient traversal are deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> value) {
    if (params_.count(name))
      throw std::invalid_argument("parameter name already registered: " + name);
    value.set_requires_grad(true);
    params_.emplace(name, value);
    return value;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }

  const std::map<std::string, Tensor<T>>& all() const { return params_; }
  std::map<std::string, Tensor<T>>& all_mutable() { return params_; }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t count() const { return params_.size(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // merge another store under this one (names must stay unique)
  void adopt(const ParamStore<T>& other) {
    for (const auto& [name, t] : other.all()) {
      if (params_.count(name))
        throw std::invalid_argument("parameter name collision on adopt: " + name);
      params_.emplace(name, t);
    }
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

// Glorot-uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
inline std::vector<T> xavier_uniform(std::int64_t n, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<T> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
  return v;
}

template <typename T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Rng& rng) {
    w = store.add(prefix + ".w",
                  Tensor<T>::from_data({in, out}, xavier_uniform<T>(static_cast<std::int64_t>(in) * out, in, out, rng)));
    b = store.add(prefix + ".b", Tensor<T>::zeros({out}));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return add(matmul(x, w), b); }
};

template <typename T>
struct Conv2d {
  Tensor<T> w;  // [out, in, kh, kw]
  Tensor<T> b;  // [out]
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& prefix, int in, int out, int kh, int kw,
         int stride_, int pad_h_, int pad_w_, Rng& rng)
      : stride(stride_), pad_h(pad_h_), pad_w(pad_w_) {
    const int fan_in = in * kh * kw;
    const int fan_out = out * kh * kw;
    w = store.add(prefix + ".w",
                  Tensor<T>::from_data({out, in, kh, kw},
                                       xavier_uniform<T>(static_cast<std::int64_t>(out) * in * kh * kw, fan_in, fan_out, rng)));
    b = store.add(prefix + ".b", Tensor<T>::zeros({out}));
  }

  Conv2d(ParamStore<T>& store, const std::string& prefix, int in, int out, int k, int stride_,
         int pad_, Rng& rng)
      : Conv2d(store, prefix, in, out, k, k, stride_, pad_, pad_, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad_h, pad_w); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& prefix, int d) {
    gain = store.add(prefix + ".gain", Tensor<T>::filled({d}, T(1)));
    bias = store.add(prefix + ".bias", Tensor<T>::zeros({d}));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain, bias, eps); }
};

// Adam with bias correction; lr 2e-4, betas (0.9, 0.999), eps 1e-8 defaults.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr = 2e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, p] : params.all_mutable()) {
      auto& state = state_[name];
      auto& v = p.mutable_data();
      const auto& g = p.grad();
      if (g.empty()) continue;  // parameter unreachable from this loss
      if (state.m.size() != v.size()) {
        state.m.assign(v.size(), 0.0);
        state.v.assign(v.size(), 0.0);
      }
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        state.m[i] = beta1_ * state.m[i] + (1.0 - beta1_) * gi;
        state.v[i] = beta2_ * state.v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        v[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace glyphdiff
