#pragma once

#include "sumd/tensor.hpp"

namespace sumd {
namespace detail {

// Unrolls one sample into a (Cin*kh*kw) x (Hout*Wout) row-major matrix so the
// convolution becomes a single matrix product.
template <class S>
void im2col(const S* x, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t hout, int64_t wout, S* col) {
  const int64_t p = hout * wout;
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        S* dst = col + ((c * kh + ki) * kw + kj) * p;
        const S* plane = x + c * h * w;
        for (int64_t oy = 0; oy < hout; ++oy) {
          const int64_t iy = oy * stride - pad + ki;
          S* drow = dst + oy * wout;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wout, S(0));
            continue;
          }
          const S* srow = plane + iy * w;
          if (stride == 1) {
            const int64_t lo = std::max<int64_t>(0, pad - kj);
            const int64_t hi = std::min<int64_t>(wout, w + pad - kj);
            std::fill(drow, drow + lo, S(0));
            if (hi > lo) std::copy(srow + lo - pad + kj, srow + hi - pad + kj, drow + lo);
            std::fill(drow + std::max(lo, hi), drow + wout, S(0));
          } else {
            for (int64_t ox = 0; ox < wout; ++ox) {
              const int64_t ix = ox * stride - pad + kj;
              drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : S(0);
            }
          }
        }
      }
}

// Adjoint of im2col: scatter-adds column gradients back onto the input plane.
template <class S>
void col2im_add(const S* col, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t hout, int64_t wout, S* x) {
  const int64_t p = hout * wout;
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const S* src = col + ((c * kh + ki) * kw + kj) * p;
        S* plane = x + c * h * w;
        for (int64_t oy = 0; oy < hout; ++oy) {
          const int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          const S* srow = src + oy * wout;
          S* drow = plane + iy * w;
          for (int64_t ox = 0; ox < wout; ++ox) {
            const int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
}

template <class S>
std::vector<S>& conv_scratch() {
  thread_local std::vector<S> buf;
  return buf;
}

template <class S>
std::vector<S>& conv_scratch2() {
  thread_local std::vector<S> buf;
  return buf;
}

}  // namespace detail

// 2-d convolution, NCHW. weight is (Cout, Cin, kh, kw); bias (Cout) optional
// (pass a default-constructed Tensor to disable).
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride, int padding) {
  if (input.ndim() != 4 || weight.ndim() != 4)
    throw ConfigError("conv2d: expects 4-d input and weight, got " + shape_str(input.shape()) +
                      " and " + shape_str(weight.shape()));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  const int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    throw ConfigError("conv2d: input channels " + shape_str(input.shape()) +
                      " do not match weight " + shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != cout))
    throw ConfigError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout");
  const int64_t hout = (h + 2 * padding - kh) / stride + 1;
  const int64_t wout = (w + 2 * padding - kw) / stride + 1;
  if (hout < 1 || wout < 1)
    throw ConfigError("conv2d: kernel " + shape_str(weight.shape()) + " too large for input " +
                      shape_str(input.shape()));
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && padding == 0);
  const int64_t kdim = cin * kh * kw;
  const int64_t p = hout * wout;

  std::vector<Tensor<S>> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  auto out = detail::make_op<S>(
      Shape{n, cout, hout, wout}, parents,
      [stride, padding, pointwise, has_bias](Node<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        const int64_t n_ = px.shape[0], cin_ = px.shape[1], h_ = px.shape[2], w_ = px.shape[3];
        const int64_t cout_ = pw.shape[0], kh_ = pw.shape[2], kw_ = pw.shape[3];
        const int64_t hout_ = nd.shape[2], wout_ = nd.shape[3];
        const int64_t kdim_ = cin_ * kh_ * kw_;
        const int64_t p_ = hout_ * wout_;
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        auto& col = detail::conv_scratch<S>();
        auto& dcol = detail::conv_scratch2<S>();
        if (!pointwise) col.resize(static_cast<size_t>(kdim_ * p_));
        if (!pointwise && px.requires_grad) dcol.resize(static_cast<size_t>(kdim_ * p_));
        for (int64_t b = 0; b < n_; ++b) {
          const S* xv = px.value.data() + b * cin_ * h_ * w_;
          const S* gy = nd.grad.data() + b * cout_ * p_;
          if (pointwise) {
            if (pw.requires_grad)
              gemm(gy, cout_, p_, false, xv, cin_, p_, true, pw.grad.data(), true);
            if (px.requires_grad)
              gemm(pw.value.data(), cout_, cin_, true, gy, cout_, p_, false,
                   px.grad.data() + b * cin_ * h_ * w_, true);
          } else {
            detail::im2col(xv, cin_, h_, w_, kh_, kw_, stride, padding, hout_, wout_, col.data());
            if (pw.requires_grad)
              gemm(gy, cout_, p_, false, col.data(), kdim_, p_, true, pw.grad.data(), true);
            if (px.requires_grad) {
              gemm(pw.value.data(), cout_, kdim_, true, gy, cout_, p_, false, dcol.data());
              detail::col2im_add(dcol.data(), cin_, h_, w_, kh_, kw_, stride, padding, hout_,
                                 wout_, px.grad.data() + b * cin_ * h_ * w_);
            }
          }
        }
        if (has_bias && nd.parents[2]->requires_grad) {
          auto& pb = *nd.parents[2];
          pb.ensure_grad();
          for (int64_t b = 0; b < n_; ++b)
            for (int64_t c = 0; c < cout_; ++c) {
              const S* gy = nd.grad.data() + (b * cout_ + c) * p_;
              S acc = S(0);
              for (int64_t i = 0; i < p_; ++i) acc += gy[i];
              pb.grad[c] += acc;
            }
        }
      });

  auto& col = detail::conv_scratch<S>();
  if (!pointwise) col.resize(static_cast<size_t>(kdim * p));
  for (int64_t b = 0; b < n; ++b) {
    const S* xv = input.data() + b * cin * h * w;
    S* ov = out.data() + b * cout * p;
    if (pointwise) {
      gemm(weight.data(), cout, cin, false, xv, cin, p, false, ov);
    } else {
      detail::im2col(xv, cin, h, w, kh, kw, stride, padding, hout, wout, col.data());
      gemm(weight.data(), cout, kdim, false, col.data(), kdim, p, false, ov);
    }
    if (has_bias) {
      for (int64_t c = 0; c < cout; ++c) {
        const S bv = bias.data()[c];
        S* row = ov + c * p;
        for (int64_t i = 0; i < p; ++i) row[i] += bv;
      }
    }
  }
  return out;
}

// Transposed convolution with kernel == stride (non-overlapping taps), the
// exact inverse layout of the stride-s downsampling convolution. weight is
// (Cin, Cout, k, k); output spatial size is (H*s, W*s).
template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                           int stride) {
  if (input.ndim() != 4 || weight.ndim() != 4)
    throw ConfigError("conv_transpose2d: expects 4-d input and weight");
  const int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != cin)
    throw ConfigError("conv_transpose2d: input channels " + shape_str(input.shape()) +
                      " do not match weight " + shape_str(weight.shape()));
  if (stride < 1 || kh != stride || kw != stride)
    throw ConfigError("conv_transpose2d: requires kernel == stride, got kernel " +
                      std::to_string(kh) + " stride " + std::to_string(stride));
  const bool has_bias = bias.defined();
  const int64_t hout = h * stride, wout = w * stride;
  const int64_t hw = h * w;
  const int64_t k = stride;

  std::vector<Tensor<S>> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  auto out = detail::make_op<S>(
      Shape{n, cout, hout, wout}, parents, [k, has_bias](Node<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        const int64_t n_ = px.shape[0], cin_ = px.shape[1], h_ = px.shape[2], w_ = px.shape[3];
        const int64_t cout_ = pw.shape[1];
        const int64_t hw_ = h_ * w_;
        const int64_t hout_ = nd.shape[2], wout_ = nd.shape[3];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        auto& pack = detail::conv_scratch<S>();
        auto& gather = detail::conv_scratch2<S>();
        pack.resize(static_cast<size_t>(cin_ * cout_));
        gather.resize(static_cast<size_t>(cout_ * hw_));
        std::vector<S> dpack(static_cast<size_t>(cout_ * cin_));
        for (int64_t ki = 0; ki < k; ++ki)
          for (int64_t kj = 0; kj < k; ++kj) {
            for (int64_t ci = 0; ci < cin_; ++ci)
              for (int64_t co = 0; co < cout_; ++co)
                pack[ci * cout_ + co] = pw.value[((ci * cout_ + co) * k + ki) * k + kj];
            for (int64_t b = 0; b < n_; ++b) {
              // gather the tap's output gradient back onto the input lattice
              for (int64_t co = 0; co < cout_; ++co) {
                const S* gplane = nd.grad.data() + (b * cout_ + co) * hout_ * wout_;
                S* grow = gather.data() + co * hw_;
                for (int64_t y = 0; y < h_; ++y)
                  for (int64_t x = 0; x < w_; ++x)
                    grow[y * w_ + x] = gplane[(y * k + ki) * wout_ + x * k + kj];
              }
              if (px.requires_grad)
                gemm(pack.data(), cin_, cout_, false, gather.data(), cout_, hw_, false,
                     px.grad.data() + b * cin_ * hw_, true);
              if (pw.requires_grad) {
                gemm(gather.data(), cout_, hw_, false, px.value.data() + b * cin_ * hw_, cin_, hw_,
                     true, dpack.data());
                for (int64_t co = 0; co < cout_; ++co)
                  for (int64_t ci = 0; ci < cin_; ++ci)
                    pw.grad[((ci * cout_ + co) * k + ki) * k + kj] += dpack[co * cin_ + ci];
              }
            }
          }
        if (has_bias && nd.parents[2]->requires_grad) {
          auto& pb = *nd.parents[2];
          pb.ensure_grad();
          const int64_t p_ = hout_ * wout_;
          for (int64_t b = 0; b < n_; ++b)
            for (int64_t c = 0; c < cout_; ++c) {
              const S* gy = nd.grad.data() + (b * cout_ + c) * p_;
              S acc = S(0);
              for (int64_t i = 0; i < p_; ++i) acc += gy[i];
              pb.grad[c] += acc;
            }
        }
      });

  auto& pack = detail::conv_scratch<S>();
  auto& tmp = detail::conv_scratch2<S>();
  pack.resize(static_cast<size_t>(cin * cout));
  tmp.resize(static_cast<size_t>(cout * hw));
  for (int64_t ki = 0; ki < k; ++ki)
    for (int64_t kj = 0; kj < k; ++kj) {
      for (int64_t ci = 0; ci < cin; ++ci)
        for (int64_t co = 0; co < cout; ++co)
          pack[ci * cout + co] = weight.data()[((ci * cout + co) * k + ki) * k + kj];
      for (int64_t b = 0; b < n; ++b) {
        gemm(pack.data(), cin, cout, true, input.data() + b * cin * hw, cin, hw, false, tmp.data());
        for (int64_t co = 0; co < cout; ++co) {
          const S* srow = tmp.data() + co * hw;
          S* oplane = out.data() + (b * cout + co) * hout * wout;
          for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) oplane[(y * k + ki) * wout + x * k + kj] = srow[y * w + x];
        }
      }
    }
  if (has_bias) {
    const int64_t p = hout * wout;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t c = 0; c < cout; ++c) {
        const S bv = bias.data()[c];
        S* row = out.data() + (b * cout + c) * p;
        for (int64_t i = 0; i < p; ++i) row[i] += bv;
      }
  }
  return out;
}

// Spatial mean per channel: (N,C,H,W) -> (N,C,1,1).
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.ndim() != 4) throw ConfigError("global_avg_pool: expects 4-d input");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  auto out = detail::make_op<S>(Shape{n, c, 1, 1}, {x}, [inv](Node<S>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const int64_t hw_ = p.shape[2] * p.shape[3];
    for (int64_t i = 0; i < nd.numel(); ++i) {
      const S g = nd.grad[i] * inv;
      S* dst = p.grad.data() + i * hw_;
      for (int64_t j = 0; j < hw_; ++j) dst[j] += g;
    }
  });
  for (int64_t i = 0; i < n * c; ++i) {
    const S* src = x.data() + i * hw;
    S acc = S(0);
    for (int64_t j = 0; j < hw; ++j) acc += src[j];
    out.data()[i] = acc * inv;
  }
  return out;
}

// Per-channel gating: x (N,C,H,W) scaled by g (N,C,1,1) broadcast over space.
template <class S>
Tensor<S> scale_channels(const Tensor<S>& x, const Tensor<S>& g) {
  if (x.ndim() != 4 || g.ndim() != 4 || g.dim(2) != 1 || g.dim(3) != 1 || g.dim(0) != x.dim(0) ||
      g.dim(1) != x.dim(1))
    throw ConfigError("scale_channels: gate shape " + shape_str(g.shape()) +
                      " does not match input " + shape_str(x.shape()));
  const int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = detail::make_op<S>(x.shape(), {x, g}, [](Node<S>& nd) {
    auto& px = *nd.parents[0];
    auto& pg = *nd.parents[1];
    const int64_t hw_ = px.shape[2] * px.shape[3];
    const int64_t nc_ = px.shape[0] * px.shape[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (int64_t i = 0; i < nc_; ++i) {
        const S gv = pg.value[i];
        const S* gy = nd.grad.data() + i * hw_;
        S* dst = px.grad.data() + i * hw_;
        for (int64_t j = 0; j < hw_; ++j) dst[j] += gy[j] * gv;
      }
    }
    if (pg.requires_grad) {
      pg.ensure_grad();
      for (int64_t i = 0; i < nc_; ++i) {
        const S* gy = nd.grad.data() + i * hw_;
        const S* xv = px.value.data() + i * hw_;
        S acc = S(0);
        for (int64_t j = 0; j < hw_; ++j) acc += gy[j] * xv[j];
        pg.grad[i] += acc;
      }
    }
  });
  for (int64_t i = 0; i < nc; ++i) {
    const S gv = g.data()[i];
    const S* src = x.data() + i * hw;
    S* dst = out.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] * gv;
  }
  return out;
}

}  // namespace sumd
