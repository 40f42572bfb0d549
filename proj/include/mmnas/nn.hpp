// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmnas/rng.hpp"
#include "mmnas/tensor.hpp"

namespace mmnas {

// Uniform traversal of module state: `param` for learnable tensors, `buffer`
// for non-differentiable state (batch-norm running statistics). Used for
// optimizer grouping and checkpoint (de)serialization.
template <typename S>
struct ParamVisitor {
  std::function<void(const std::string&, Tensor<S>&)> param;
  std::function<void(const std::string&, std::vector<S>&)> buffer;
};

template <typename S>
struct Conv2dLayer {
  Tensor<S> weight;  // [F, C/groups, k, k]
  Conv2dOpts opts;

  Conv2dLayer() = default;
  Conv2dLayer(int in_c, int out_c, int kernel, Conv2dOpts o, RngStream rng) : opts(o) {
    const int cg = in_c / o.groups;
    const std::int64_t fan_in = static_cast<std::int64_t>(cg) * kernel * kernel;
    weight = Tensor<S>::kaiming_uniform({out_c, cg, kernel, kernel}, fan_in, rng);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, weight, opts); }

  void visit(const std::string& prefix, ParamVisitor<S>& v) { v.param(prefix + ".weight", weight); }
};

template <typename S>
struct BatchNorm2dLayer {
  Tensor<S> gamma, beta;
  std::vector<S> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2dLayer() = default;
  explicit BatchNorm2dLayer(int channels)
      : gamma(Tensor<S>::ones({channels})),
        beta(Tensor<S>::zeros({channels})),
        running_mean(static_cast<std::size_t>(channels), S(0)),
        running_var(static_cast<std::size_t>(channels), S(1)) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }

  void visit(const std::string& prefix, ParamVisitor<S>& v) {
    v.param(prefix + ".gamma", gamma);
    v.param(prefix + ".beta", beta);
    v.buffer(prefix + ".running_mean", running_mean);
    v.buffer(prefix + ".running_var", running_var);
  }
};

template <typename S>
struct LinearLayer {
  Tensor<S> weight;  // [out, in]
  Tensor<S> bias;    // [out] or invalid for bias-free

  LinearLayer() = default;
  LinearLayer(int in_f, int out_f, RngStream rng, bool with_bias = true) {
    weight = Tensor<S>::kaiming_uniform({out_f, in_f}, in_f, rng);
    if (with_bias) {
      bias = Tensor<S>::zeros({out_f});
      bias.set_requires_grad(true);
    }
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return bias.valid() ? linear(x, weight, bias) : linear(x, weight);
  }

  void visit(const std::string& prefix, ParamVisitor<S>& v) {
    v.param(prefix + ".weight", weight);
    if (bias.valid()) v.param(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

// Classic SGD with momentum and L2 weight decay. State is held per
// parameter, keyed by storage identity; parameters are visited in the
// caller-supplied order so updates are deterministic.
template <typename S>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor<S>> params, double lr, double momentum = 0.9,
              double weight_decay = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(static_cast<std::size_t>(params_[i].numel()), S(0));
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      if (!p.has_grad()) continue;
      S* w = p.data();
      const S* g = p.grad().data();
      S* v = velocity_[pi].data();
      const std::int64_t n = p.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]) + weight_decay_ * static_cast<double>(w[i]);
        const double vi = momentum_ * static_cast<double>(v[i]) + gi;
        v[i] = static_cast<S>(vi);
        w[i] = static_cast<S>(static_cast<double>(w[i]) - lr_ * vi);
      }
    }
  }

  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> velocity_;
  double lr_, momentum_, weight_decay_;
};

template <typename S>
class Adam {
 public:
  Adam(std::vector<Tensor<S>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double weight_decay = 0.0, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        weight_decay_(weight_decay), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i].numel()), 0.0);
      v_[i].assign(static_cast<std::size_t>(params_[i].numel()), 0.0);
    }
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      if (!p.has_grad()) continue;
      S* w = p.data();
      const S* g = p.grad().data();
      double* m = m_[pi].data();
      double* v = v_[pi].data();
      const std::int64_t n = p.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]) + weight_decay_ * static_cast<double>(w[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] = static_cast<S>(static_cast<double>(w[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, weight_decay_, eps_;
  long t_ = 0;
};

}  // namespace mmnas
