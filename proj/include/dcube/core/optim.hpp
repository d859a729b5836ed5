#pragma once

#include "dcube/core/layers.hpp"

namespace dcube {

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr = 2e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.0)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParamStore& ps) {
    if (m_.empty()) {
      for (const auto& p : ps.params()) {
        m_.push_back(Tensor::zeros(p.val().shape()));
        v_.push_back(Tensor::zeros(p.val().shape()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      Var& p = ps.params()[i];
      if (!p.has_grad()) continue;
      const Tensor& g = p.grad();
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (int64_t j = 0; j < g.numel(); ++j) {
        m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
        v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        double& w = p.val()[j];
        w -= lr_ * wd_ * w;
        w -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Exponential moving average of a parameter set:
//   shadow <- alpha * shadow + (1 - alpha) * params
struct EmaState {
  std::vector<Tensor> shadow;
  double alpha = 0.999;

  EmaState() = default;
  EmaState(const ParamStore& ps, double alpha_) : shadow(ps.snapshot()), alpha(alpha_) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("EmaState: alpha out of [0,1]");
  }

  void update(const ParamStore& ps) {
    if (shadow.size() != ps.size()) throw std::invalid_argument("EmaState::update: shape mismatch");
    for (size_t i = 0; i < shadow.size(); ++i) {
      const Tensor& p = ps.params()[i].val();
      check_same_shape(shadow[i], p, "EmaState::update");
      for (int64_t j = 0; j < p.numel(); ++j)
        shadow[i][j] = alpha * shadow[i][j] + (1.0 - alpha) * p[j];
    }
  }
};

// Temporarily swaps EMA weights into a ParamStore (restores on destruction).
class EmaScope {
 public:
  EmaScope(ParamStore& ps, const EmaState& ema) : ps_(ps), saved_(ps.snapshot()) {
    ps_.load(ema.shadow);
  }
  ~EmaScope() { ps_.load(saved_); }
  EmaScope(const EmaScope&) = delete;
  EmaScope& operator=(const EmaScope&) = delete;

 private:
  ParamStore& ps_;
  std::vector<Tensor> saved_;
};

}  // namespace dcube
