#pragma once

#include "dcube/core/ops.hpp"

namespace dcube {

namespace detail {

// im2col for one sample: x[C,H,W] -> cols[(C*kh*kw) x (OH*OW)]
inline void im2col(const double* x, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int oh, int ow, double* cols) {
  const int64_t ohw = int64_t(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        double* row = cols + ((int64_t(ci) * kh + ki) * kw + kj) * ohw;
        for (int i = 0; i < oh; ++i) {
          const int src_i = i * stride + ki - pad;
          double* dst = row + int64_t(i) * ow;
          if (src_i < 0 || src_i >= h) {
            std::fill_n(dst, ow, 0.0);
            continue;
          }
          const double* src = x + (int64_t(ci) * h + src_i) * w;
          for (int j = 0; j < ow; ++j) {
            const int src_j = j * stride + kj - pad;
            dst[j] = (src_j >= 0 && src_j < w) ? src[src_j] : 0.0;
          }
        }
      }
}

// scatter-add transpose of im2col
inline void col2im_add(const double* cols, int c, int h, int w, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* x) {
  const int64_t ohw = int64_t(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((int64_t(ci) * kh + ki) * kw + kj) * ohw;
        for (int i = 0; i < oh; ++i) {
          const int src_i = i * stride + ki - pad;
          if (src_i < 0 || src_i >= h) continue;
          double* dst = x + (int64_t(ci) * h + src_i) * w;
          const double* src = row + int64_t(i) * ow;
          for (int j = 0; j < ow; ++j) {
            const int src_j = j * stride + kj - pad;
            if (src_j >= 0 && src_j < w) dst[src_j] += src[j];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution, x[N,C,H,W] * w[Co,Ci,kh,kw] + b[Co].
// im2col is recomputed in the backward pass instead of cached; activations
// dominate memory at training batch sizes otherwise.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = -1) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank");
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (b.val().numel() != co) throw std::invalid_argument("conv2d: bias size");
  if (pad < 0) pad = kh / 2;  // "same" for odd kernels at stride 1
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (ww + 2 * pad - kw) / stride + 1;
  const int64_t k = int64_t(ci) * kh * kw;
  const int64_t ohw = int64_t(oh) * ow;

  Tensor out({n, co, oh, ow});
  std::vector<double> cols(static_cast<size_t>(k * ohw));
  ECMap wm(wv.data(), co, k);
  for (int i = 0; i < n; ++i) {
    detail::im2col(xv.data() + int64_t(i) * ci * h * ww, ci, h, ww, kh, kw, stride, pad, oh, ow,
                   cols.data());
    EMap(out.data() + int64_t(i) * co * ohw, co, ohw).noalias() =
        wm * ECMap(cols.data(), k, ohw);
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < co; ++j) {
      double* p = out.data() + (int64_t(i) * co + j) * ohw;
      const double bias = b.val()[j];
      for (int64_t t = 0; t < ohw; ++t) p[t] += bias;
    }

  auto backfn = [n, ci, h, ww, co, kh, kw, stride, pad, oh, ow, k, ohw](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    Tensor* gx = grad_sink(self, 0);
    Tensor* gw = grad_sink(self, 1);
    Tensor* gb = grad_sink(self, 2);
    std::vector<double> cols(static_cast<size_t>(k * ohw));
    std::vector<double> dcols(gx ? static_cast<size_t>(k * ohw) : 0);
    ECMap wm(wv.data(), co, k);
    for (int i = 0; i < n; ++i) {
      ECMap g(self.grad.data() + int64_t(i) * co * ohw, co, ohw);
      if (gw) {
        detail::im2col(xv.data() + int64_t(i) * ci * h * ww, ci, h, ww, kh, kw, stride, pad, oh,
                       ow, cols.data());
        EMap(gw->data(), co, k).noalias() += g * ECMap(cols.data(), k, ohw).transpose();
      }
      if (gx) {
        EMap(dcols.data(), k, ohw).noalias() = wm.transpose() * g;
        detail::col2im_add(dcols.data(), ci, h, ww, kh, kw, stride, pad, oh, ow,
                           gx->data() + int64_t(i) * ci * h * ww);
      }
    }
    if (gb)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < co; ++j) {
          const double* g = self.grad.data() + (int64_t(i) * co + j) * ohw;
          double s = 0.0;
          for (int64_t t = 0; t < ohw; ++t) s += g[t];
          (*gb)[j] += s;
        }
  };
  return make_op(std::move(out), {x, w, b}, std::move(backfn));
}

// nearest-neighbor 2x upsample of [N,C,H,W]
inline Var upsample_nearest2(const Var& x) {
  const Tensor& xv = x.val();
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({n, c, 2 * h, 2 * w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double* src = xv.data() + (int64_t(i) * c + j) * h * w;
      double* dst = out.data() + (int64_t(i) * c + j) * 4 * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int z = 0; z < 2 * w; ++z) dst[int64_t(y) * 2 * w + z] = src[int64_t(y / 2) * w + z / 2];
    }
  return make_op(std::move(out), {x}, [n, c, h, w](Node& self) {
    Tensor* gx = grad_sink(self, 0);
    if (!gx) return;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        double* dst = gx->data() + (int64_t(i) * c + j) * h * w;
        const double* g = self.grad.data() + (int64_t(i) * c + j) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y)
          for (int z = 0; z < 2 * w; ++z) dst[int64_t(y / 2) * w + z / 2] += g[int64_t(y) * 2 * w + z];
      }
  });
}

// GroupNorm over [N,C,H,W]; gamma/beta are per-channel [C].
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      double eps = 1e-5) {
  const Tensor& xv = x.val();
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
  if (gamma.val().numel() != c || beta.val().numel() != c)
    throw std::invalid_argument("group_norm: affine size");
  const int cpg = c / groups;
  const int64_t m = int64_t(cpg) * h * w;  // elements per group

  Tensor out({n, c, h, w});
  std::vector<double> mu(static_cast<size_t>(n) * groups), istd(static_cast<size_t>(n) * groups);
  for (int i = 0; i < n; ++i)
    for (int g = 0; g < groups; ++g) {
      const double* p = xv.data() + (int64_t(i) * c + int64_t(g) * cpg) * h * w;
      double s = 0.0;
      for (int64_t t = 0; t < m; ++t) s += p[t];
      const double mean = s / double(m);
      double v = 0.0;
      for (int64_t t = 0; t < m; ++t) {
        const double d = p[t] - mean;
        v += d * d;
      }
      const double inv = 1.0 / std::sqrt(v / double(m) + eps);
      mu[size_t(i) * groups + g] = mean;
      istd[size_t(i) * groups + g] = inv;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const double ga = gamma.val()[ch], be = beta.val()[ch];
        const double* src = xv.data() + (int64_t(i) * c + ch) * h * w;
        double* dst = out.data() + (int64_t(i) * c + ch) * h * w;
        for (int64_t t = 0; t < int64_t(h) * w; ++t) dst[t] = (src[t] - mean) * inv * ga + be;
      }
    }

  auto backfn = [n, c, h, w, groups, cpg, m, mu, istd](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& gav = self.parents[1]->value;
    Tensor* gx = grad_sink(self, 0);
    Tensor* gga = grad_sink(self, 1);
    Tensor* gbe = grad_sink(self, 2);
    const int64_t hw = int64_t(h) * w;
    for (int i = 0; i < n; ++i)
      for (int g = 0; g < groups; ++g) {
        const double mean = mu[size_t(i) * groups + g];
        const double inv = istd[size_t(i) * groups + g];
        // accumulate the two reductions over the group
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const double ga = gav[ch];
          const double* xp = xv.data() + (int64_t(i) * c + ch) * hw;
          const double* gp = self.grad.data() + (int64_t(i) * c + ch) * hw;
          double s1 = 0.0, s2 = 0.0, s3 = 0.0;
          for (int64_t t = 0; t < hw; ++t) {
            const double xh = (xp[t] - mean) * inv;
            const double dxh = gp[t] * ga;
            s1 += dxh;
            s2 += dxh * xh;
            s3 += gp[t] * xh;
          }
          sum_dxh += s1;
          sum_dxh_xh += s2;
          if (gga) (*gga)[ch] += s3;
          if (gbe) {
            double sb = 0.0;
            for (int64_t t = 0; t < hw; ++t) sb += gp[t];
            (*gbe)[ch] += sb;
          }
        }
        if (gx) {
          for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const double ga = gav[ch];
            const double* xp = xv.data() + (int64_t(i) * c + ch) * hw;
            const double* gp = self.grad.data() + (int64_t(i) * c + ch) * hw;
            double* dst = gx->data() + (int64_t(i) * c + ch) * hw;
            for (int64_t t = 0; t < hw; ++t) {
              const double xh = (xp[t] - mean) * inv;
              const double dxh = gp[t] * ga;
              dst[t] += inv * (dxh - (sum_dxh + xh * sum_dxh_xh) / double(m));
            }
          }
        }
      }
  };
  return make_op(std::move(out), {x, gamma, beta}, std::move(backfn));
}

// ------------------------------------------------------- plain tensor utils

// bilinear resize of [N,C,H,W] (align_corners=false convention); used on
// detached feature maps, so no gradient path is provided
inline Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (oh == h && ow == w) return x;
  Tensor out({n, c, oh, ow});
  const double sy = double(h) / oh, sx = double(w) / ow;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double* src = x.data() + (int64_t(i) * c + j) * h * w;
      double* dst = out.data() + (int64_t(i) * c + j) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int z = 0; z < ow; ++z) {
          const double fx = std::clamp((z + 0.5) * sx - 0.5, 0.0, double(w - 1));
          const int x0 = static_cast<int>(fx);
          const int x1 = std::min(x0 + 1, w - 1);
          const double wx = fx - x0;
          dst[int64_t(y) * ow + z] = (1 - wy) * ((1 - wx) * src[int64_t(y0) * w + x0] +
                                                 wx * src[int64_t(y0) * w + x1]) +
                                     wy * ((1 - wx) * src[int64_t(y1) * w + x0] +
                                           wx * src[int64_t(y1) * w + x1]);
        }
      }
    }
  return out;
}

inline Tensor flip_horizontal(const Tensor& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, h, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      for (int y = 0; y < h; ++y) {
        const double* src = x.data() + ((int64_t(i) * c + j) * h + y) * w;
        double* dst = out.data() + ((int64_t(i) * c + j) * h + y) * w;
        for (int z = 0; z < w; ++z) dst[z] = src[w - 1 - z];
      }
  return out;
}

}  // namespace dcube
