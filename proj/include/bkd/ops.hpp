// Copyright (c) 2026 The bkd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef BKD_OPS_HPP
#define BKD_OPS_HPP

// Forward/backward kernels for the U-Net layers. Every backward accumulates
// into parameter gradients (+=) and returns the input gradient.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <numbers>

#include "bkd/tensor.hpp"

namespace bkd::ops {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Conv2d (square kernel, symmetric zero padding)

struct ConvGeom {
  int k = 3;
  int stride = 1;
  int pad = 1;
  int out_size(int in) const { return (in + 2 * pad - k) / stride + 1; }
};

template <typename T>
void im2col(const T* x, int channels, int h, int w, const ConvGeom& g, int ho, int wo, T* col) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = col + (static_cast<std::size_t>((c * g.k + ki) * g.k + kj)) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kj;
            row[oh * wo + ow] = (ih >= 0 && ih < h && iw >= 0 && iw < w)
                                    ? x[(static_cast<std::size_t>(c) * h + ih) * w + iw]
                                    : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int h, int w, const ConvGeom& g, int ho, int wo, T* x) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = col + (static_cast<std::size_t>((c * g.k + ki) * g.k + kj)) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= h) continue;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kj;
            if (iw < 0 || iw >= w) continue;
            x[(static_cast<std::size_t>(c) * h + ih) * w + iw] += row[oh * wo + ow];
          }
        }
      }
    }
  }
}

/// x [B,Ci,H,W], weight [Co,Ci,k,k], bias [Co] -> [B,Co,Ho,Wo]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvGeom& g) {
  const int batch = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0);
  if (weight.dim(1) != ci || weight.dim(2) != g.k) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const int ho = g.out_size(h), wo = g.out_size(w);
  const int kk = ci * g.k * g.k;
  const int hw = ho * wo;
  Tensor<T> y({batch, co, ho, wo});
  CMapR<T> wm(weight.data(), co, kk);
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  AlignedVector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.data() + static_cast<std::size_t>(b) * ci * h * w;
    MapR<T> yb(y.data() + static_cast<std::size_t>(b) * co * hw, co, hw);
    if (pointwise) {
      yb.noalias() = wm * CMapR<T>(xb, kk, hw);
    } else {
      im2col(xb, ci, h, w, g, ho, wo, col.data());
      yb.noalias() = wm * CMapR<T>(col.data(), kk, hw);
    }
    for (int c = 0; c < co; ++c) yb.row(c).array() += bias[c];
  }
  return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const ConvGeom& g,
                          const Tensor<T>& dy, Tensor<T>& dweight, Tensor<T>& dbias,
                          bool need_dx = true) {
  const int batch = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0);
  const int ho = dy.dim(2), wo = dy.dim(3);
  const int kk = ci * g.k * g.k;
  const int hw = ho * wo;
  Tensor<T> dx;
  if (need_dx) dx = Tensor<T>(x.shape());
  CMapR<T> wm(weight.data(), co, kk);
  MapR<T> dwm(dweight.data(), co, kk);
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  AlignedVector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
  AlignedVector<T> dcol(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.data() + static_cast<std::size_t>(b) * ci * h * w;
    CMapR<T> dyb(dy.data() + static_cast<std::size_t>(b) * co * hw, co, hw);
    for (int c = 0; c < co; ++c) dbias[c] += dyb.row(c).sum();
    if (pointwise) {
      dwm.noalias() += dyb * CMapR<T>(xb, kk, hw).transpose();
      if (need_dx) {
        MapR<T>(dx.data() + static_cast<std::size_t>(b) * ci * h * w, kk, hw).noalias() =
            wm.transpose() * dyb;
      }
    } else {
      im2col(xb, ci, h, w, g, ho, wo, col.data());
      dwm.noalias() += dyb * CMapR<T>(col.data(), kk, hw).transpose();
      if (need_dx) {
        MapR<T>(dcol.data(), kk, hw).noalias() = wm.transpose() * dyb;
        col2im_add(dcol.data(), ci, h, w, g, ho, wo,
                   dx.data() + static_cast<std::size_t>(b) * ci * h * w);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear over rows: x [N, in] -> [N, out], weight [out, in]

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  const int in = weight.dim(1), out = weight.dim(0);
  const int n = static_cast<int>(x.size() / static_cast<std::size_t>(in));
  if (x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = out;
  Tensor<T> y(shape);
  MapR<T> ym(y.data(), n, out);
  ym.noalias() = CMapR<T>(x.data(), n, in) * CMapR<T>(weight.data(), out, in).transpose();
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->data(), out);
    ym.rowwise() += bv;
  }
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                          Tensor<T>& dweight, Tensor<T>* dbias) {
  const int in = weight.dim(1), out = weight.dim(0);
  const int n = static_cast<int>(x.size() / static_cast<std::size_t>(in));
  CMapR<T> dym(dy.data(), n, out);
  MapR<T>(dweight.data(), out, in).noalias() += dym.transpose() * CMapR<T>(x.data(), n, in);
  if (dbias) {
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(dbias->data(), out);
    db += dym.colwise().sum();
  }
  Tensor<T> dx(x.shape());
  MapR<T>(dx.data(), n, in).noalias() = dym * CMapR<T>(weight.data(), out, in);
  return dx;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};

/// Normalizes `groups` contiguous segments of length `seg` per row of `rows`;
/// `channel_of(i)` maps a within-row offset to its affine index. Used for both
/// group norm (rows = batch) and layer norm (rows = tokens).
template <typename T, typename ChannelOf>
Tensor<T> norm_forward(const Tensor<T>& x, int rows, int groups, std::size_t seg,
                       const Tensor<T>& gamma, const Tensor<T>& beta, ChannelOf channel_of,
                       NormStats* stats) {
  Tensor<T> y(x.shape());
  if (stats) {
    stats->mean.assign(static_cast<std::size_t>(rows) * groups, 0.0);
    stats->rstd.assign(static_cast<std::size_t>(rows) * groups, 0.0);
  }
  const std::size_t row_len = seg * groups;
  for (int r = 0; r < rows; ++r) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = r * row_len + g * seg;
      double s = 0.0;
      for (std::size_t i = 0; i < seg; ++i) s += x[base + i];
      const double mu = s / static_cast<double>(seg);
      double v = 0.0;
      for (std::size_t i = 0; i < seg; ++i) {
        const double d = x[base + i] - mu;
        v += d * d;
      }
      const double rstd = 1.0 / std::sqrt(v / static_cast<double>(seg) + kNormEps);
      for (std::size_t i = 0; i < seg; ++i) {
        const int c = channel_of(g * seg + i);
        y[base + i] = static_cast<T>((x[base + i] - mu) * rstd * gamma[c] + beta[c]);
      }
      if (stats) {
        stats->mean[r * groups + g] = mu;
        stats->rstd[r * groups + g] = rstd;
      }
    }
  }
  return y;
}

template <typename T, typename ChannelOf>
Tensor<T> norm_backward(const Tensor<T>& x, int rows, int groups, std::size_t seg,
                        const Tensor<T>& gamma, const NormStats& stats, const Tensor<T>& dy,
                        Tensor<T>& dgamma, Tensor<T>& dbeta, ChannelOf channel_of) {
  Tensor<T> dx(x.shape());
  const std::size_t row_len = seg * groups;
  const double inv_n = 1.0 / static_cast<double>(seg);
  for (int r = 0; r < rows; ++r) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = r * row_len + g * seg;
      const double mu = stats.mean[r * groups + g];
      const double rstd = stats.rstd[r * groups + g];
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t i = 0; i < seg; ++i) {
        const int c = channel_of(g * seg + i);
        const double xhat = (x[base + i] - mu) * rstd;
        const double dxhat = static_cast<double>(dy[base + i]) * gamma[c];
        dgamma[c] += static_cast<T>(dy[base + i] * xhat);
        dbeta[c] += dy[base + i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
      }
      for (std::size_t i = 0; i < seg; ++i) {
        const int c = channel_of(g * seg + i);
        const double xhat = (x[base + i] - mu) * rstd;
        const double dxhat = static_cast<double>(dy[base + i]) * gamma[c];
        dx[base + i] =
            static_cast<T>(rstd * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n));
      }
    }
  }
  return dx;
}

/// x [B,C,H,W]
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     NormStats* stats) {
  const int c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t seg = hw * (c / groups);
  return norm_forward(x, x.dim(0), groups, seg, gamma, beta,
                      [hw](std::size_t i) { return static_cast<int>(i / hw); }, stats);
}

template <typename T>
Tensor<T> group_norm_backward(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                              const NormStats& stats, const Tensor<T>& dy, Tensor<T>& dgamma,
                              Tensor<T>& dbeta) {
  const int c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t seg = hw * (c / groups);
  return norm_backward(x, x.dim(0), groups, seg, gamma, stats, dy, dgamma, dbeta,
                       [hw](std::size_t i) { return static_cast<int>(i / hw); });
}

/// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     NormStats* stats) {
  const int c = x.shape().back();
  const int rows = static_cast<int>(x.size() / static_cast<std::size_t>(c));
  return norm_forward(x, rows, 1, static_cast<std::size_t>(c), gamma, beta,
                      [](std::size_t i) { return static_cast<int>(i); }, stats);
}

template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const NormStats& stats,
                              const Tensor<T>& dy, Tensor<T>& dgamma, Tensor<T>& dbeta) {
  const int c = x.shape().back();
  const int rows = static_cast<int>(x.size() / static_cast<std::size_t>(c));
  return norm_backward(x, rows, 1, static_cast<std::size_t>(c), gamma, stats, dy, dgamma, dbeta,
                       [](std::size_t i) { return static_cast<int>(i); });
}

// ---------------------------------------------------------------------------
// Activations (vectorized through Eigen array expressions)

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  CArrMap<T> a(x.data(), n);
  ArrMap<T>(y.data(), n) = a / (T(1) + (-a).exp());
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  CArrMap<T> a(x.data(), n);
  const Eigen::Array<T, Eigen::Dynamic, 1> s = T(1) / (T(1) + (-a).exp());
  ArrMap<T>(dx.data(), n) = CArrMap<T>(dy.data(), n) * (s + a * s * (T(1) - s));
  return dx;
}

template <typename T>
T gelu_scalar(T v) {
  return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
}

/// Gated GELU: input [..., 2F] split into (value, gate); out = value * gelu(gate).
template <typename T>
Tensor<T> geglu(const Tensor<T>& x) {
  const int f2 = x.shape().back();
  const int f = f2 / 2;
  const auto rows = static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(f2));
  Shape shape = x.shape();
  shape.back() = f;
  Tensor<T> y(shape);
  CMapR<T> in(x.data(), rows, f2);
  const auto value = in.leftCols(f).array();
  const auto gate = in.rightCols(f).array();
  MapR<T>(y.data(), rows, f).array() =
      value * (T(0.5) * gate * (T(1) + (gate * T(std::numbers::sqrt2 / 2)).erf()));
  return y;
}

template <typename T>
Tensor<T> geglu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const int f2 = x.shape().back();
  const int f = f2 / 2;
  const auto rows = static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(f2));
  Tensor<T> dx(x.shape());
  CMapR<T> in(x.data(), rows, f2);
  CMapR<T> g(dy.data(), rows, f);
  MapR<T> out(dx.data(), rows, f2);
  const auto value = in.leftCols(f).array();
  const auto gate = in.rightCols(f).array();
  const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cdf =
      T(0.5) * (T(1) + (gate * T(std::numbers::sqrt2 / 2)).erf());
  const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pdf =
      (T(-0.5) * gate.square()).exp() * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  out.leftCols(f).array() = g.array() * gate * cdf;
  out.rightCols(f).array() = g.array() * value * (cdf + gate * pdf);
  return dx;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention.
// q [B,Sq,C], k/v [B,Sk,C] -> out [B,Sq,C]; probs [B,heads,Sq,Sk].

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    Tensor<T>& probs) {
  const int batch = q.dim(0), sq = q.dim(1), c = q.dim(2), sk = k.dim(1);
  const int d = c / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  probs = Tensor<T>({batch, heads, sq, sk});
  Tensor<T> out(q.shape());
  for (int b = 0; b < batch; ++b) {
    const T* qb = q.data() + static_cast<std::size_t>(b) * sq * c;
    const T* kb = k.data() + static_cast<std::size_t>(b) * sk * c;
    const T* vb = v.data() + static_cast<std::size_t>(b) * sk * c;
    T* ob = out.data() + static_cast<std::size_t>(b) * sq * c;
    for (int h = 0; h < heads; ++h) {
      CStridedMap<T> qh(qb + h * d, sq, d, Eigen::OuterStride<>(c));
      CStridedMap<T> kh(kb + h * d, sk, d, Eigen::OuterStride<>(c));
      CStridedMap<T> vh(vb + h * d, sk, d, Eigen::OuterStride<>(c));
      MapR<T> p(probs.data() + (static_cast<std::size_t>(b) * heads + h) * sq * sk, sq, sk);
      p.noalias() = (qh * kh.transpose()) * scale;
      for (int i = 0; i < sq; ++i) {
        auto row = p.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      StridedMap<T> oh(ob + h * d, sq, d, Eigen::OuterStride<>(c));
      oh.noalias() = p * vh;
    }
  }
  return out;
}

template <typename T>
void attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                        const Tensor<T>& probs, const Tensor<T>& dout, Tensor<T>& dq,
                        Tensor<T>& dk, Tensor<T>& dv) {
  const int batch = q.dim(0), sq = q.dim(1), c = q.dim(2), sk = k.dim(1);
  const int d = c / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  dq = Tensor<T>(q.shape());
  dk = Tensor<T>(k.shape());
  dv = Tensor<T>(v.shape());
  MatR<T> dp(sq, sk);
  for (int b = 0; b < batch; ++b) {
    const std::size_t qoff = static_cast<std::size_t>(b) * sq * c;
    const std::size_t koff = static_cast<std::size_t>(b) * sk * c;
    for (int h = 0; h < heads; ++h) {
      CStridedMap<T> qh(q.data() + qoff + h * d, sq, d, Eigen::OuterStride<>(c));
      CStridedMap<T> kh(k.data() + koff + h * d, sk, d, Eigen::OuterStride<>(c));
      CStridedMap<T> vh(v.data() + koff + h * d, sk, d, Eigen::OuterStride<>(c));
      CStridedMap<T> doh(dout.data() + qoff + h * d, sq, d, Eigen::OuterStride<>(c));
      CMapR<T> p(probs.data() + (static_cast<std::size_t>(b) * heads + h) * sq * sk, sq, sk);
      StridedMap<T> dqh(dq.data() + qoff + h * d, sq, d, Eigen::OuterStride<>(c));
      StridedMap<T> dkh(dk.data() + koff + h * d, sk, d, Eigen::OuterStride<>(c));
      StridedMap<T> dvh(dv.data() + koff + h * d, sk, d, Eigen::OuterStride<>(c));
      dvh.noalias() = p.transpose() * doh;
      dp.noalias() = doh * vh.transpose();
      for (int i = 0; i < sq; ++i) {
        const T dot = (dp.row(i).array() * p.row(i).array()).sum();
        dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)) * scale;
      }
      dqh.noalias() = dp * kh;
      dkh.noalias() = dp.transpose() * qh;
    }
  }
}

// ---------------------------------------------------------------------------
// Layout helpers

/// [B,C,H,W] -> [B,HW,C]
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({b, hw, c});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < hw; ++i)
        y[(static_cast<std::size_t>(n) * hw + i) * c + ch] =
            x[(static_cast<std::size_t>(n) * c + ch) * hw + i];
  return y;
}

/// [B,HW,C] -> [B,C,H,W]
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& x, int h, int w) {
  const int b = x.dim(0), hw = x.dim(1), c = x.dim(2);
  Tensor<T> y({b, c, h, w});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < hw; ++i)
        y[(static_cast<std::size_t>(n) * c + ch) * hw + i] =
            x[(static_cast<std::size_t>(n) * hw + i) * c + ch];
  return y;
}

/// Channel concatenation [B,C1,H,W] ++ [B,C2,H,W].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const int n = a.dim(0), c1 = a.dim(1), c2 = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor<T> y({n, c1 + c2, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * c1 * hw, c1 * hw, y.data() + i * (c1 + c2) * hw);
    std::copy_n(b.data() + i * c2 * hw, c2 * hw, y.data() + (i * (c1 + c2) + c1) * hw);
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& dy, int c1, Tensor<T>& da, Tensor<T>& db) {
  const int n = dy.dim(0), c = dy.dim(1), c2 = c - c1;
  const std::size_t hw = static_cast<std::size_t>(dy.dim(2)) * dy.dim(3);
  da = Tensor<T>({n, c1, dy.dim(2), dy.dim(3)});
  db = Tensor<T>({n, c2, dy.dim(2), dy.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(dy.data() + i * c * hw, c1 * hw, da.data() + i * c1 * hw);
    std::copy_n(dy.data() + (i * c + c1) * hw, c2 * hw, db.data() + i * c2 * hw);
  }
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({n, c, 2 * h, 2 * w});
  for (int i = 0; i < n * c; ++i)
    for (int r = 0; r < 2 * h; ++r)
      for (int s = 0; s < 2 * w; ++s)
        y[(static_cast<std::size_t>(i) * 2 * h + r) * 2 * w + s] =
            x[(static_cast<std::size_t>(i) * h + r / 2) * w + s / 2];
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
  const int n = dy.dim(0), c = dy.dim(1), h = dy.dim(2) / 2, w = dy.dim(3) / 2;
  Tensor<T> dx({n, c, h, w});
  for (int i = 0; i < n * c; ++i)
    for (int r = 0; r < 2 * h; ++r)
      for (int s = 0; s < 2 * w; ++s)
        dx[(static_cast<std::size_t>(i) * h + r / 2) * w + s / 2] +=
            dy[(static_cast<std::size_t>(i) * 2 * h + r) * 2 * w + s];
  return dx;
}

// ---------------------------------------------------------------------------
// Parameter-free linear resampling along the channel axis (align-corners):
// output channel j reads position j*(Cin-1)/(Cout-1) of the input.

struct InterpTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

inline std::vector<InterpTap> channel_interp_taps(int cin, int cout) {
  std::vector<InterpTap> taps(static_cast<std::size_t>(cout));
  for (int j = 0; j < cout; ++j) {
    const double pos =
        cout == 1 ? 0.0 : static_cast<double>(j) * (cin - 1) / static_cast<double>(cout - 1);
    InterpTap t;
    t.lo = std::min(static_cast<int>(std::floor(pos)), cin - 1);
    t.hi = std::min(t.lo + 1, cin - 1);
    t.frac = pos - t.lo;
    taps[static_cast<std::size_t>(j)] = t;
  }
  return taps;
}

template <typename T>
Tensor<T> channel_interp(const Tensor<T>& x, int cout) {
  const int n = x.dim(0), cin = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const auto taps = channel_interp_taps(cin, cout);
  Tensor<T> y({n, cout, x.dim(2), x.dim(3)});
  for (int b = 0; b < n; ++b) {
    for (int j = 0; j < cout; ++j) {
      const auto& t = taps[static_cast<std::size_t>(j)];
      const T* lo = x.data() + (static_cast<std::size_t>(b) * cin + t.lo) * hw;
      const T* hi = x.data() + (static_cast<std::size_t>(b) * cin + t.hi) * hw;
      T* out = y.data() + (static_cast<std::size_t>(b) * cout + j) * hw;
      if (t.frac == 0.0) {
        std::copy_n(lo, hw, out);
      } else {
        const T f = static_cast<T>(t.frac);
        for (std::size_t i = 0; i < hw; ++i) out[i] = lo[i] + f * (hi[i] - lo[i]);
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> channel_interp_backward(const Tensor<T>& dy, int cin) {
  const int n = dy.dim(0), cout = dy.dim(1);
  const std::size_t hw = static_cast<std::size_t>(dy.dim(2)) * dy.dim(3);
  const auto taps = channel_interp_taps(cin, cout);
  Tensor<T> dx({n, cin, dy.dim(2), dy.dim(3)});
  for (int b = 0; b < n; ++b) {
    for (int j = 0; j < cout; ++j) {
      const auto& t = taps[static_cast<std::size_t>(j)];
      const T* g = dy.data() + (static_cast<std::size_t>(b) * cout + j) * hw;
      T* lo = dx.data() + (static_cast<std::size_t>(b) * cin + t.lo) * hw;
      T* hi = dx.data() + (static_cast<std::size_t>(b) * cin + t.hi) * hw;
      const T f = static_cast<T>(t.frac);
      for (std::size_t i = 0; i < hw; ++i) {
        lo[i] += (T(1) - f) * g[i];
        if (t.frac != 0.0) hi[i] += f * g[i];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

/// Sinusoidal timestep features, cosine half first: [B, dim].
template <typename T>
Tensor<T> timestep_features(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(timesteps.size()), dim});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / static_cast<double>(half));
      const double arg = timesteps[b] * freq;
      out[b * dim + i] = static_cast<T>(std::cos(arg));
      out[b * dim + half + i] = static_cast<T>(std::sin(arg));
    }
  }
  return out;
}

}  // namespace bkd::ops

#endif  // BKD_OPS_HPP
