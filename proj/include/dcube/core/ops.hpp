#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "dcube/core/autograd.hpp"

namespace dcube {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* ga = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i];
    if (Tensor* gb = grad_sink(self, 1))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*gb)[i] += self.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* ga = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i];
    if (Tensor* gb = grad_sink(self, 1))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*gb)[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (Tensor* ga = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i] * bv[i];
    if (Tensor* gb = grad_sink(self, 1))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*gb)[i] += self.grad[i] * av[i];
  });
}

inline Var mul_scalar(const Var& a, double s) {
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return make_op(std::move(out), {a}, [s](Node& self) {
    if (Tensor* ga = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i] * s;
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  return make_op(std::move(out), {a}, [](Node& self) {
    if (Tensor* ga = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*ga)[i] += self.grad[i];
  });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------- activations

inline Var silu(const Var& x) {
  Tensor out = x.val();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-out[i]));
    out[i] = out[i] * s;
  }
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    const Tensor& xv = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      (*gx)[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double y = self.value[i];
      (*gx)[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Var relu(const Var& x) {
  Tensor out = x.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    const Tensor& xv = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (xv[i] > 0.0) (*gx)[i] += self.grad[i];
  });
}

// sqrt with zero subgradient at 0 (hinge-style losses hit exact zeros)
inline Var sqrt_safe(const Var& x) {
  Tensor out = x.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(std::max(out[i], 0.0));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double y = self.value[i];
      if (y > 0.0) (*gx)[i] += self.grad[i] * 0.5 / y;
    }
  });
}

inline Var log_clamped(const Var& x, double floor_val) {
  Tensor out = x.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(out[i], floor_val));
  return make_op(std::move(out), {x}, [floor_val](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    const Tensor& xv = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (xv[i] > floor_val) (*gx)[i] += self.grad[i] / xv[i];
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum_all(const Var& x) {
  Tensor out = Tensor::scalar(x.val().sum());
  return make_op(std::move(out), {x}, [](Node& self) {
    if (Tensor* gx = grad_sink(self, 0)) {
      const double g = self.grad[0];
      for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g;
    }
  });
}

inline Var mean_all(const Var& x) {
  const double inv = 1.0 / double(x.val().numel());
  Tensor out = Tensor::scalar(x.val().sum() * inv);
  return make_op(std::move(out), {x}, [inv](Node& self) {
    if (Tensor* gx = grad_sink(self, 0)) {
      const double g = self.grad[0] * inv;
      for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g;
    }
  });
}

// [N,D] -> [N]
inline Var row_sum(const Var& x) {
  const int n = x.val().dim(0), d = x.val().dim(1);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += x.val()[int64_t(i) * d + j];
    out[i] = s;
  }
  return make_op(std::move(out), {x}, [n, d](Node& self) {
    if (Tensor* gx = grad_sink(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) (*gx)[int64_t(i) * d + j] += self.grad[i];
  });
}

// [N,C,H,W] -> [N,C]
inline Var global_sum_pool(const Var& x) {
  const int n = x.val().dim(0), c = x.val().dim(1);
  const int64_t hw = int64_t(x.val().dim(2)) * x.val().dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double* p = x.val().data() + (int64_t(i) * c + j) * hw;
      double s = 0.0;
      for (int64_t k = 0; k < hw; ++k) s += p[k];
      out.at2(i, j) = s;
    }
  return make_op(std::move(out), {x}, [n, c, hw](Node& self) {
    if (Tensor* gx = grad_sink(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          double* p = gx->data() + (int64_t(i) * c + j) * hw;
          const double g = self.grad.at2(i, j);
          for (int64_t k = 0; k < hw; ++k) p[k] += g;
        }
  });
}

inline Var global_avg_pool(const Var& x) {
  const double inv = 1.0 / (double(x.val().dim(2)) * x.val().dim(3));
  return mul_scalar(global_sum_pool(x), inv);
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.val().reshaped(shape);
  return make_op(std::move(out), {x}, [](Node& self) {
    if (Tensor* gx = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*gx)[i] += self.grad[i];
  });
}

// concat along channel axis of [N,C,H,W]
inline Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    throw std::invalid_argument("concat_channels: incompatible shapes");
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  const int64_t hw = int64_t(av.dim(2)) * av.dim(3);
  Tensor out({n, ca + cb, av.dim(2), av.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(av.data() + int64_t(i) * ca * hw, ca * hw, out.data() + int64_t(i) * (ca + cb) * hw);
    std::copy_n(bv.data() + int64_t(i) * cb * hw, cb * hw,
                out.data() + int64_t(i) * (ca + cb) * hw + ca * hw);
  }
  return make_op(std::move(out), {a, b}, [n, ca, cb, hw](Node& self) {
    Tensor* ga = grad_sink(self, 0);
    Tensor* gb = grad_sink(self, 1);
    for (int i = 0; i < n; ++i) {
      const double* g = self.grad.data() + int64_t(i) * (ca + cb) * hw;
      if (ga) {
        double* p = ga->data() + int64_t(i) * ca * hw;
        for (int64_t k = 0; k < ca * hw; ++k) p[k] += g[k];
      }
      if (gb) {
        double* p = gb->data() + int64_t(i) * cb * hw;
        for (int64_t k = 0; k < cb * hw; ++k) p[k] += g[ca * hw + k];
      }
    }
  });
}

// ---------------------------------------------------------------- matmul

// [M,K] x [K,N] -> [M,N]
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + av.shape_str() + " x " +
                                bv.shape_str());
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  EMap(out.data(), m, n).noalias() = ECMap(av.data(), m, k) * ECMap(bv.data(), k, n);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    ECMap g(self.grad.data(), m, n);
    if (Tensor* ga = grad_sink(self, 0))
      EMap(ga->data(), m, k).noalias() += g * ECMap(self.parents[1]->value.data(), k, n).transpose();
    if (Tensor* gb = grad_sink(self, 1))
      EMap(gb->data(), k, n).noalias() += ECMap(self.parents[0]->value.data(), m, k).transpose() * g;
  });
}

// x[N,D] + bias[D]
inline Var add_row_bias(const Var& x, const Var& bias) {
  const int n = x.val().dim(0), d = x.val().dim(1);
  if (bias.val().numel() != d) throw std::invalid_argument("add_row_bias: bias size");
  Tensor out = x.val();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[int64_t(i) * d + j] += bias.val()[j];
  return make_op(std::move(out), {x, bias}, [n, d](Node& self) {
    if (Tensor* gx = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*gx)[i] += self.grad[i];
    if (Tensor* gb = grad_sink(self, 1))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) (*gb)[j] += self.grad[int64_t(i) * d + j];
  });
}

// ---------------------------------------------------------------- broadcasts

// x[N,C,H,W] + e[N,C] broadcast over spatial dims
inline Var add_channel_bias(const Var& x, const Var& e) {
  const int n = x.val().dim(0), c = x.val().dim(1);
  const int64_t hw = int64_t(x.val().dim(2)) * x.val().dim(3);
  if (e.val().dim(0) != n || e.val().dim(1) != c)
    throw std::invalid_argument("add_channel_bias: shape mismatch");
  Tensor out = x.val();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double* p = out.data() + (int64_t(i) * c + j) * hw;
      const double b = e.val().at2(i, j);
      for (int64_t k = 0; k < hw; ++k) p[k] += b;
    }
  return make_op(std::move(out), {x, e}, [n, c, hw](Node& self) {
    if (Tensor* gx = grad_sink(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*gx)[i] += self.grad[i];
    if (Tensor* ge = grad_sink(self, 1))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const double* g = self.grad.data() + (int64_t(i) * c + j) * hw;
          double s = 0.0;
          for (int64_t k = 0; k < hw; ++k) s += g[k];
          ge->at2(i, j) += s;
        }
  });
}

// x[N,C,H,W] scaled per channel by s[N,C]
inline Var scale_channels(const Var& x, const Var& s) {
  const int n = x.val().dim(0), c = x.val().dim(1);
  const int64_t hw = int64_t(x.val().dim(2)) * x.val().dim(3);
  if (s.val().dim(0) != n || s.val().dim(1) != c)
    throw std::invalid_argument("scale_channels: shape mismatch");
  Tensor out = x.val();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double* p = out.data() + (int64_t(i) * c + j) * hw;
      const double w = s.val().at2(i, j);
      for (int64_t k = 0; k < hw; ++k) p[k] *= w;
    }
  return make_op(std::move(out), {x, s}, [n, c, hw](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& sv = self.parents[1]->value;
    Tensor* gx = grad_sink(self, 0);
    Tensor* gs = grad_sink(self, 1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        const int64_t off = (int64_t(i) * c + j) * hw;
        const double* g = self.grad.data() + off;
        if (gx) {
          double* p = gx->data() + off;
          const double w = sv.at2(i, j);
          for (int64_t k = 0; k < hw; ++k) p[k] += g[k] * w;
        }
        if (gs) {
          const double* xp = xv.data() + off;
          double acc = 0.0;
          for (int64_t k = 0; k < hw; ++k) acc += g[k] * xp[k];
          gs->at2(i, j) += acc;
        }
      }
  });
}

// a[N,1,H,W] * b[N,C,H,W], channel-1 side broadcast
inline Var mul_bcast_c1(const Var& a, const Var& b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.dim(1) != 1 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    throw std::invalid_argument("mul_bcast_c1: expected [N,1,H,W] * [N,C,H,W]");
  const int n = bv.dim(0), c = bv.dim(1);
  const int64_t hw = int64_t(bv.dim(2)) * bv.dim(3);
  Tensor out = bv;
  for (int i = 0; i < n; ++i) {
    const double* ap = av.data() + int64_t(i) * hw;
    for (int j = 0; j < c; ++j) {
      double* p = out.data() + (int64_t(i) * c + j) * hw;
      for (int64_t k = 0; k < hw; ++k) p[k] *= ap[k];
    }
  }
  return make_op(std::move(out), {a, b}, [n, c, hw](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    Tensor* ga = grad_sink(self, 0);
    Tensor* gb = grad_sink(self, 1);
    for (int i = 0; i < n; ++i) {
      const double* ap = av.data() + int64_t(i) * hw;
      for (int j = 0; j < c; ++j) {
        const int64_t off = (int64_t(i) * c + j) * hw;
        const double* g = self.grad.data() + off;
        const double* bp = bv.data() + off;
        if (ga) {
          double* p = ga->data() + int64_t(i) * hw;
          for (int64_t k = 0; k < hw; ++k) p[k] += g[k] * bp[k];
        }
        if (gb) {
          double* p = gb->data() + off;
          for (int64_t k = 0; k < hw; ++k) p[k] += g[k] * ap[k];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- rows / softmax

// L2-normalizes each row of [N,D] to unit length (rows of norm 0 pass through)
inline Var l2_normalize_rows(const Var& x) {
  const int n = x.val().dim(0), d = x.val().dim(1);
  Tensor out = x.val();
  std::vector<double> norms(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double v = out[int64_t(i) * d + j];
      s += v * v;
    }
    const double r = std::sqrt(s);
    norms[static_cast<size_t>(i)] = r;
    if (r > 0.0)
      for (int j = 0; j < d; ++j) out[int64_t(i) * d + j] /= r;
  }
  return make_op(std::move(out), {x}, [n, d, norms](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    for (int i = 0; i < n; ++i) {
      const double r = norms[static_cast<size_t>(i)];
      if (r <= 0.0) {
        for (int j = 0; j < d; ++j) (*gx)[int64_t(i) * d + j] += self.grad[int64_t(i) * d + j];
        continue;
      }
      const double* y = self.value.data() + int64_t(i) * d;
      const double* g = self.grad.data() + int64_t(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += y[j] * g[j];
      for (int j = 0; j < d; ++j) (*gx)[int64_t(i) * d + j] += (g[j] - y[j] * dot) / r;
    }
  });
}

// row-wise stable softmax of [N,K]
inline Var softmax_rows(const Var& x) {
  const int n = x.val().dim(0), k = x.val().dim(1);
  Tensor out = x.val();
  for (int i = 0; i < n; ++i) {
    double* p = out.data() + int64_t(i) * k;
    double mx = p[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, p[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(p[j] - mx);
      s += p[j];
    }
    for (int j = 0; j < k; ++j) p[j] /= s;
  }
  return make_op(std::move(out), {x}, [n, k](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    for (int i = 0; i < n; ++i) {
      const double* y = self.value.data() + int64_t(i) * k;
      const double* g = self.grad.data() + int64_t(i) * k;
      double dot = 0.0;
      for (int j = 0; j < k; ++j) dot += y[j] * g[j];
      for (int j = 0; j < k; ++j) (*gx)[int64_t(i) * k + j] += y[j] * (g[j] - dot);
    }
  });
}

// mean over the batch of -log(probs[label]), with an epsilon floor
inline Var nll_from_probs(const Var& probs, const std::vector<int>& labels, double floor_val = 1e-12) {
  const int n = probs.val().dim(0), k = probs.val().dim(1);
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("nll_from_probs: labels size");
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k) throw std::invalid_argument("nll_from_probs: label out of range");
    loss -= std::log(std::max(probs.val().at2(i, y), floor_val));
  }
  Tensor out = Tensor::scalar(loss / n);
  return make_op(std::move(out), {probs}, [n, labels, floor_val](Node& self) {
    Tensor* gp = grad_sink(self, 0);
    if (!gp) return;
    const double g = self.grad[0] / n;
    for (int i = 0; i < n; ++i) {
      const int y = labels[static_cast<size_t>(i)];
      const double p = self.parents[0]->value.at2(i, y);
      if (p > floor_val) gp->at2(i, y) -= g / p;
    }
  });
}

// mean over all elements of (a-b)^2
inline Var mse(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "mse");
  const int64_t n = a.val().numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = a.val()[i] - b.val()[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / double(n));
  return make_op(std::move(out), {a, b}, [n](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    const double g = self.grad[0] * 2.0 / double(n);
    if (Tensor* ga = grad_sink(self, 0))
      for (int64_t i = 0; i < n; ++i) (*ga)[i] += g * (av[i] - bv[i]);
    if (Tensor* gb = grad_sink(self, 1))
      for (int64_t i = 0; i < n; ++i) (*gb)[i] -= g * (av[i] - bv[i]);
  });
}

}  // namespace dcube
