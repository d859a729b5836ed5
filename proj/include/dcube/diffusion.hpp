#pragma once

#include "dcube/core/ops.hpp"
#include "dcube/core/rng.hpp"

namespace dcube {

// Fixed forward-process variance schedule. Timesteps are 1-based: t in [1, T].
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
    const size_t T = beta_.size();
    if (T == 0) throw std::invalid_argument("NoiseSchedule: empty schedule");
    alpha_.resize(T);
    alpha_bar_.resize(T);
    double prod = 1.0;
    for (size_t i = 0; i < T; ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0))
        throw std::invalid_argument("NoiseSchedule: beta out of (0,1)");
      alpha_[i] = 1.0 - beta_[i];
      prod *= alpha_[i];
      alpha_bar_[i] = prod;
    }
  }

  int horizon() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<size_t>(t - 1)); }
  double alpha(int t) const { return alpha_.at(static_cast<size_t>(t - 1)); }
  // cumulative product of alpha over steps 1..t; alpha_bar(0) == 1
  double alpha_bar(int t) const {
    return t == 0 ? 1.0 : alpha_bar_.at(static_cast<size_t>(t - 1));
  }

  void check_t(int t) const {
    if (t < 1 || t > horizon())
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1," +
                              std::to_string(horizon()) + "]");
  }

 private:
  std::vector<double> beta_, alpha_, alpha_bar_;
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4,
                                          double beta_end = 0.02) {
  if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("make_linear_schedule: require 0 < beta_start <= beta_end < 1");
  std::vector<double> beta(static_cast<size_t>(T));
  for (int i = 0; i < T; ++i)
    beta[static_cast<size_t>(i)] =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
  return NoiseSchedule(std::move(beta));
}

// closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor q_sample(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                       const NoiseSchedule& sched) {
  check_same_shape(x0, eps, "q_sample");
  const int n = x0.dim(0);
  if (static_cast<int>(t.size()) != n) throw std::invalid_argument("q_sample: t count mismatch");
  const int64_t per = x0.numel() / n;
  Tensor xt = x0;
  for (int i = 0; i < n; ++i) {
    sched.check_t(t[static_cast<size_t>(i)]);
    const double ab = sched.alpha_bar(t[static_cast<size_t>(i)]);
    const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    double* p = xt.data() + int64_t(i) * per;
    const double* e = eps.data() + int64_t(i) * per;
    for (int64_t j = 0; j < per; ++j) p[j] = c0 * p[j] + c1 * e[j];
  }
  return xt;
}

// single-sample convenience (shared t)
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  return q_sample(x0, std::vector<int>(static_cast<size_t>(x0.dim(0)), t), eps, sched);
}

// One ancestral reverse step with epsilon parameterization and fixed variance
// beta_t * I:
//   mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
//   x_{t-1} = mu + sqrt(beta_t) * noise_in
// noise_in must be zero at t = 1.
inline Tensor reverse_step(const Tensor& xt, int t, const Tensor& eps_hat,
                           const NoiseSchedule& sched, const Tensor* noise_in = nullptr) {
  sched.check_t(t);
  check_same_shape(xt, eps_hat, "reverse_step");
  if (noise_in) {
    check_same_shape(xt, *noise_in, "reverse_step noise");
    if (t == 1)
      for (int64_t i = 0; i < noise_in->numel(); ++i)
        if ((*noise_in)[i] != 0.0)
          throw std::invalid_argument("reverse_step: noise_in must be zero at t=1");
  }
  const double a = sched.alpha(t), ab = sched.alpha_bar(t), b = sched.beta(t);
  const double inv_sqrt_a = 1.0 / std::sqrt(a);
  const double coef = b / std::sqrt(1.0 - ab);
  const double sigma = std::sqrt(b);
  Tensor out = xt;
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = inv_sqrt_a * (out[i] - coef * eps_hat[i]);
    if (noise_in) out[i] += sigma * (*noise_in)[i];
  }
  return out;
}

// Noise-prediction objective: mean over all elements of (eps_hat - eps)^2.
inline Var diffusion_loss(const Var& eps_hat, const Var& eps) { return mse(eps_hat, eps); }

inline double diffusion_loss(const Tensor& eps_hat, const Tensor& eps) {
  check_same_shape(eps_hat, eps, "diffusion_loss");
  double s = 0.0;
  for (int64_t i = 0; i < eps.numel(); ++i) {
    const double d = eps_hat[i] - eps[i];
    s += d * d;
  }
  return s / double(eps.numel());
}

}  // namespace dcube
