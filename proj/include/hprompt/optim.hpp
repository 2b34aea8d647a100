#pragma once

#include <cmath>
#include <vector>

#include "hprompt/tensor.hpp"

namespace hprompt {

/// Plain SGD over a fixed set of leaf parameters. Parameters whose gradient
/// accumulator is absent (graph never reached them) are skipped.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, T lr) : params_(std::move(params)), lr_(lr) {
    for (auto& p : params_) check(p.requires_grad(), "sgd: non-trainable parameter");
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

  void step() {
    for (auto& p : params_) {
      if (!p.has_grad()) continue;
      auto& v = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr_ * g[i];
    }
  }

  T lr() const { return lr_; }

 private:
  std::vector<Tensor<T>> params_;
  T lr_;
};

/// Adam with bias correction. State is per-instance; constructing a fresh
/// optimizer resets moments and the step counter.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      check(params_[i].requires_grad(), "adam: non-trainable parameter");
      m_[i].assign(params_[i].numel(), T(0));
      v_[i].assign(params_[i].numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

  void step() {
    ++t_;
    T bc1 = T(1) - std::pow(b1_, static_cast<T>(t_));
    T bc2 = T(1) - std::pow(b2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      auto& val = params_[i].mutable_value();
      const auto& g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        m[j] = b1_ * m[j] + (T(1) - b1_) * g[j];
        v[j] = b2_ * v[j] + (T(1) - b2_) * g[j] * g[j];
        T mhat = m[j] / bc1;
        T vhat = v[j] / bc2;
        val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  T lr() const { return lr_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
};

}  // namespace hprompt
