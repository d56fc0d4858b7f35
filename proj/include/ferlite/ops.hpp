#pragma once

#include "ferlite/parallel.hpp"
#include "ferlite/rng.hpp"
#include "ferlite/tensor.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <utility>

// Differentiable building blocks. Every op is a free function producing a new
// tensor; tensors are immutable once produced. Layout is NCHW, row-major flat.

namespace ferlite::ops {

namespace detail {

inline long conv_out_extent(long in, long pad, long k, long stride) {
  return (in + 2 * pad - k) / stride + 1;
}

// Gather one group's receptive fields into col(ICg*kH*kW, OH*OW).
template <typename S>
void im2col(const S* x, long C, long H, long W, long n, long group, long icg, long kh_n,
            long kw_n, long stride, long pad, long oh_n, long ow_n, MatX<S>& col) {
  for (long cl = 0; cl < icg; ++cl) {
    const long c = group * icg + cl;
    const S* plane = x + (n * C + c) * H * W;
    for (long kh = 0; kh < kh_n; ++kh) {
      for (long kw = 0; kw < kw_n; ++kw) {
        S* row = col.data() + ((cl * kh_n + kh) * kw_n + kw) * oh_n * ow_n;
        for (long oh = 0; oh < oh_n; ++oh) {
          const long ih = oh * stride - pad + kh;
          S* dst = row + oh * ow_n;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + ow_n, S(0));
            continue;
          }
          // iw = ow*stride - pad + kw must land in [0, W)
          long ow_lo = 0;
          while (ow_lo < ow_n && ow_lo * stride - pad + kw < 0) ++ow_lo;
          long ow_hi = ow_n;
          while (ow_hi > ow_lo && (ow_hi - 1) * stride - pad + kw >= W) --ow_hi;
          std::fill(dst, dst + ow_lo, S(0));
          std::fill(dst + ow_hi, dst + ow_n, S(0));
          const S* src_row = plane + ih * W;
          if (stride == 1) {
            const long iw0 = ow_lo - pad + kw;
            std::copy(src_row + iw0, src_row + iw0 + (ow_hi - ow_lo), dst + ow_lo);
          } else {
            for (long ow = ow_lo; ow < ow_hi; ++ow)
              dst[ow] = src_row[ow * stride - pad + kw];
          }
        }
      }
    }
  }
}

// Scatter-add of a col matrix back into the input gradient.
template <typename S>
void col2im_add(const MatX<S>& col, S* gx, long C, long H, long W, long n, long group,
                long icg, long kh_n, long kw_n, long stride, long pad, long oh_n,
                long ow_n) {
  for (long cl = 0; cl < icg; ++cl) {
    const long c = group * icg + cl;
    S* plane = gx + (n * C + c) * H * W;
    for (long kh = 0; kh < kh_n; ++kh) {
      for (long kw = 0; kw < kw_n; ++kw) {
        const S* row = col.data() + ((cl * kh_n + kh) * kw_n + kw) * oh_n * ow_n;
        for (long oh = 0; oh < oh_n; ++oh) {
          const long ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          const S* src = row + oh * ow_n;
          S* dst_row = plane + ih * W;
          for (long ow = 0; ow < ow_n; ++ow) {
            const long iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) dst_row[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Direct depthwise convolution (groups == C): per-tap vectorized segment
// updates instead of degenerate 1-row GEMMs. Processes flat (n*C+c) plane
// indices in [plane_begin, plane_end).
template <typename S>
void depthwise_forward(const S* x, S* out, const S* w, long C, long H, long W, long K,
                       long stride, long pad, long OH, long OW, long plane_begin,
                       long plane_end) {
  using StrideT = Eigen::InnerStride<Eigen::Dynamic>;
  for (long p = plane_begin; p < plane_end; ++p) {
    const long c = p % C;
    const S* plane = x + p * H * W;
    S* oplane = out + p * OH * OW;
    std::fill(oplane, oplane + OH * OW, S(0));
    const S* wc = w + c * K * K;
    for (long kh = 0; kh < K; ++kh) {
      for (long kw = 0; kw < K; ++kw) {
        const S wv = wc[kh * K + kw];
        for (long oh = 0; oh < OH; ++oh) {
          const long ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          long ow_lo = 0;
          while (ow_lo < OW && ow_lo * stride - pad + kw < 0) ++ow_lo;
          long ow_hi = OW;
          while (ow_hi > ow_lo && (ow_hi - 1) * stride - pad + kw >= W) --ow_hi;
          if (ow_hi <= ow_lo) continue;
          const long len = ow_hi - ow_lo;
          const S* src = plane + ih * W + ow_lo * stride - pad + kw;
          MapVec<S> dst(oplane + oh * OW + ow_lo, len);
          if (stride == 1) {
            dst += wv * MapConstVec<S>(src, len);
          } else {
            Eigen::Map<const VecX<S>, 0, StrideT> sv(src, len, StrideT(stride));
            dst += wv * sv;
          }
        }
      }
    }
  }
}

// Channel-major so that gw[c] and every (n,c) plane of gx are touched by
// exactly one chunk.
template <typename S>
void depthwise_backward(const S* x, const S* g, const S* w, S* gx, S* gw, long N, long C,
                        long H, long W, long K, long stride, long pad, long OH, long OW,
                        long c_begin, long c_end) {
  using StrideT = Eigen::InnerStride<Eigen::Dynamic>;
  for (long c = c_begin; c < c_end; ++c) {
    const S* wc = w + c * K * K;
    S* gwc = gw ? gw + c * K * K : nullptr;
    for (long n = 0; n < N; ++n) {
      const S* plane = x + (n * C + c) * H * W;
      const S* gplane = g + (n * C + c) * OH * OW;
      S* gxplane = gx ? gx + (n * C + c) * H * W : nullptr;
      for (long kh = 0; kh < K; ++kh) {
        for (long kw = 0; kw < K; ++kw) {
          const S wv = wc[kh * K + kw];
          S wacc = 0;
          for (long oh = 0; oh < OH; ++oh) {
            const long ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= H) continue;
            long ow_lo = 0;
            while (ow_lo < OW && ow_lo * stride - pad + kw < 0) ++ow_lo;
            long ow_hi = OW;
            while (ow_hi > ow_lo && (ow_hi - 1) * stride - pad + kw >= W) --ow_hi;
            if (ow_hi <= ow_lo) continue;
            const long len = ow_hi - ow_lo;
            MapConstVec<S> gv(gplane + oh * OW + ow_lo, len);
            const S* src = plane + ih * W + ow_lo * stride - pad + kw;
            S* gdst = gxplane ? gxplane + ih * W + ow_lo * stride - pad + kw : nullptr;
            if (stride == 1) {
              if (gwc) wacc += gv.dot(MapConstVec<S>(src, len));
              if (gdst) MapVec<S>(gdst, len) += wv * gv;
            } else {
              Eigen::Map<const VecX<S>, 0, StrideT> sv(src, len, StrideT(stride));
              if (gwc) wacc += gv.dot(sv);
              if (gdst) {
                Eigen::Map<VecX<S>, 0, StrideT> gxv(gdst, len, StrideT(stride));
                gxv += wv * gv;
              }
            }
          }
          if (gwc) gwc[kh * K + kw] += wacc;
        }
      }
    }
  }
}

template <typename S>
void softmax_rows_inplace(MapMat<S> m) {
  for (long r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const S mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace detail

// y = conv(x, w) + bias. x:(N,IC,H,W), w:(OC,IC/groups,kH,kW), bias:(OC) optional.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, std::optional<Tensor<S>> bias,
                 long stride, long pad, long groups = 1) {
  if (x.rank() != 4) throw DimError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw DimError("conv2d: weight must be 4-D, got " + shape_str(w.shape()));
  const long N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long OC = w.dim(0), ICG = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (groups < 1 || IC % groups != 0 || OC % groups != 0)
    throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide in=" +
                      std::to_string(IC) + " and out=" + std::to_string(OC) + " channels");
  if (ICG != IC / groups)
    throw DimError("conv2d: weight expects " + std::to_string(ICG * groups) +
                   " input channels, input has " + std::to_string(IC));
  if (bias && (bias->rank() != 1 || bias->dim(0) != OC))
    throw DimError("conv2d: bias must have shape (" + std::to_string(OC) + ")");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >=1 and padding >=0");
  const long OH = detail::conv_out_extent(H, pad, KH, stride);
  const long OW = detail::conv_out_extent(W, pad, KW, stride);
  if (OH < 1 || OW < 1)
    throw DimError("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) +
                   " does not fit input " + shape_str(x.shape()));
  const long OCG = OC / groups;

  std::vector<Tensor<S>> inputs{x, w};
  if (bias) inputs.push_back(*bias);

  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias ? bias->node() : nullptr;

  const bool pointwise = (KH == 1 && KW == 1 && stride == 1 && pad == 0 && groups == 1);
  const bool depthwise = (groups == IC && OC == IC && KH == KW);

  const long macs_per_sample = OC * OH * OW * ICG * KH * KW;

  auto run_forward = [=](VecX<S>& out_v) {
    const S* xd = xn->value.data();
    const S* wd = wn->value.data();
    S* od = out_v.data();
    if (pointwise) {
      parallel_for(N, N * macs_per_sample, [&](long, long nb, long ne) {
        for (long n = nb; n < ne; ++n) {
          MapConstMat<S> wm(wd, OC, IC);
          MapConstMat<S> xm(xd + n * IC * H * W, IC, H * W);
          MapMat<S> om(od + n * OC * OH * OW, OC, OH * OW);
          om.noalias() = wm * xm;
        }
      });
    } else if (depthwise) {
      parallel_for(N * IC, N * macs_per_sample, [&](long, long b, long e) {
        detail::depthwise_forward(xd, od, wd, IC, H, W, KH, stride, pad, OH, OW, b, e);
      });
    } else {
      parallel_for(N, N * macs_per_sample, [&](long, long nb, long ne) {
        MatX<S> col(ICG * KH * KW, OH * OW);
        for (long n = nb; n < ne; ++n) {
          for (long g = 0; g < groups; ++g) {
            detail::im2col(xd, IC, H, W, n, g, ICG, KH, KW, stride, pad, OH, OW, col);
            MapConstMat<S> wg(wd + g * OCG * ICG * KH * KW, OCG, ICG * KH * KW);
            MapMat<S> om(od + (n * OC + g * OCG) * OH * OW, OCG, OH * OW);
            om.noalias() = wg * col;
          }
        }
      });
    }
    if (bn) {
      const S* bd = bn->value.data();
      for (long n = 0; n < N; ++n)
        for (long oc = 0; oc < OC; ++oc)
          MapVec<S>(od + (n * OC + oc) * OH * OW, OH * OW).array() += bd[oc];
    }
  };

  Tensor<S> out = make_op_output<S>(
      {N, OC, OH, OW}, inputs, [=](Node<S>& node) {
        const S* gd = node.grad.data();
        const bool need_x = xn->requires_grad;
        const bool need_w = wn->requires_grad;
        if (need_w) wn->ensure_grad();
        if (need_x) xn->ensure_grad();
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          S* gb = bn->grad.data();
          for (long n = 0; n < N; ++n)
            for (long oc = 0; oc < OC; ++oc)
              gb[oc] += MapConstVec<S>(gd + (n * OC + oc) * OH * OW, OH * OW).sum();
        }
        if (!need_x && !need_w) return;
        const S* xd = xn->value.data();
        const S* wd = wn->value.data();
        if (depthwise) {
          parallel_for(IC, 3 * N * macs_per_sample, [&](long, long cb, long ce) {
            detail::depthwise_backward(xd, gd, wd, need_x ? xn->grad.data() : nullptr,
                                       need_w ? wn->grad.data() : nullptr, N, IC, H, W, KH,
                                       stride, pad, OH, OW, cb, ce);
          });
          return;
        }
        // chunk 0 accumulates straight into the weight grad; other chunks use
        // partials merged in fixed order below
        const long nt = std::min(num_threads(), N);
        std::vector<VecX<S>> gw_partial(static_cast<std::size_t>(std::max(1L, nt)));
        parallel_for(N, 3 * N * macs_per_sample, [&](long t, long nb, long ne) {
          VecX<S>& gwp = gw_partial[static_cast<std::size_t>(t)];
          S* gw_dst = nullptr;
          if (need_w) {
            if (t == 0) {
              gw_dst = wn->grad.data();
            } else {
              gwp = VecX<S>::Zero(wn->value.size());
              gw_dst = gwp.data();
            }
          }
          MatX<S> col, gcol;
          if (!pointwise) col.resize(ICG * KH * KW, OH * OW);
          for (long n = nb; n < ne; ++n) {
            if (pointwise) {
              MapConstMat<S> gm(gd + n * OC * OH * OW, OC, OH * OW);
              if (need_w) {
                MapConstMat<S> xm(xd + n * IC * H * W, IC, H * W);
                MapMat<S> gw(gw_dst, OC, IC);
                gw.noalias() += gm * xm.transpose();
              }
              if (need_x) {
                MapConstMat<S> wm(wd, OC, IC);
                MapMat<S> gx(xn->grad.data() + n * IC * H * W, IC, H * W);
                gx.noalias() += wm.transpose() * gm;
              }
            } else {
              for (long g = 0; g < groups; ++g) {
                MapConstMat<S> gm(gd + (n * OC + g * OCG) * OH * OW, OCG, OH * OW);
                if (need_w) {
                  detail::im2col(xd, IC, H, W, n, g, ICG, KH, KW, stride, pad, OH, OW, col);
                  MapMat<S> gw(gw_dst + g * OCG * ICG * KH * KW, OCG, ICG * KH * KW);
                  gw.noalias() += gm * col.transpose();
                }
                if (need_x) {
                  MapConstMat<S> wg(wd + g * OCG * ICG * KH * KW, OCG, ICG * KH * KW);
                  gcol.resize(ICG * KH * KW, OH * OW);
                  gcol.noalias() = wg.transpose() * gm;
                  detail::col2im_add(gcol, xn->grad.data(), IC, H, W, n, g, ICG, KH, KW,
                                     stride, pad, OH, OW);
                }
              }
            }
          }
        });
        if (need_w)
          for (std::size_t t = 1; t < gw_partial.size(); ++t)
            if (gw_partial[t].size() == wn->grad.size()) wn->grad += gw_partial[t];
      });
  run_forward(out.value());
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, long stride, long pad,
                 long groups = 1) {
  return conv2d(x, w, std::optional<Tensor<S>>{}, stride, pad, groups);
}

template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x, long k, long stride, long pad) {
  if (x.rank() != 4) throw DimError("max_pool2d: input must be NCHW");
  if (pad < 0 || 2 * pad > k)
    throw ConfigError("max_pool2d: padding must satisfy 0 <= 2*pad <= k");
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long OH = detail::conv_out_extent(H, pad, k, stride);
  const long OW = detail::conv_out_extent(W, pad, k, stride);
  if (OH < 1 || OW < 1) throw DimError("max_pool2d: window does not fit input");
  auto xn = x.node();
  auto argmax = std::make_shared<std::vector<long>>(N * C * OH * OW);

  Tensor<S> out = make_op_output<S>({N, C, OH, OW}, {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    S* gx = xn->grad.data();
    const S* g = node.grad.data();
    const auto& am = *argmax;
    for (long i = 0; i < static_cast<long>(am.size()); ++i) gx[am[i]] += g[i];
  });

  const S* xd = xn->value.data();
  S* od = out.value().data();
  long oidx = 0;
  for (long n = 0; n < N; ++n) {
    for (long c = 0; c < C; ++c) {
      const S* plane = xd + (n * C + c) * H * W;
      const long base = (n * C + c) * H * W;
      for (long oh = 0; oh < OH; ++oh) {
        for (long ow = 0; ow < OW; ++ow, ++oidx) {
          S best = -std::numeric_limits<S>::infinity();
          long best_idx = -1;
          for (long kh = 0; kh < k; ++kh) {
            const long ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= H) continue;
            for (long kw = 0; kw < k; ++kw) {
              const long iw = ow * stride - pad + kw;
              if (iw < 0 || iw >= W) continue;
              const S v = plane[ih * W + iw];
              if (v > best) {
                best = v;
                best_idx = base + ih * W + iw;
              }
            }
          }
          od[oidx] = best;
          (*argmax)[oidx] = best_idx;
        }
      }
    }
  }
  return out;
}

// (N,C,H,W) -> (N,C): mean over each channel plane.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) throw DimError("global_avg_pool: input must be NCHW");
  const long N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto xn = x.node();
  Tensor<S> out = make_op_output<S>({N, C}, {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S inv = S(1) / S(HW);
    for (long i = 0; i < N * C; ++i)
      MapVec<S>(xn->grad.data() + i * HW, HW).array() += node.grad[i] * inv;
  });
  for (long i = 0; i < N * C; ++i)
    out.value()[i] = MapConstVec<S>(xn->value.data() + i * HW, HW).mean();
  return out;
}

// Normalizes per channel: dim 1 of NCHW, or each column of an (N,D) matrix.
// Train mode uses batch statistics (biased variance) and folds them into the
// running buffers; Eval mode reads the running buffers only.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, Mode mode,
                     S momentum = S(0.1), S eps = S(1e-5)) {
  const int r = x.rank();
  if (r != 2 && r != 4) throw DimError("batch_norm: input must be 2-D or 4-D");
  const long N = x.dim(0);
  const long C = x.dim(1);
  const long HW = (r == 4) ? x.dim(2) * x.dim(3) : 1;
  const long m = N * HW;
  for (const Tensor<S>* t :
       std::initializer_list<const Tensor<S>*>{&gamma, &beta, &running_mean, &running_var})
    if (t->size() != C)
      throw DimError("batch_norm: expected per-channel vectors of length " + std::to_string(C) +
                     ", got " + shape_str(t->shape()));

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();

  auto mean = std::make_shared<VecX<S>>(C);
  auto inv_std = std::make_shared<VecX<S>>(C);

  const S* xd = xn->value.data();
  if (mode == Mode::Train) {
    S* rm = running_mean.value().data();
    S* rv = running_var.value().data();
    parallel_for(C, x.size(), [&](long, long cb, long ce) {
      for (long c = cb; c < ce; ++c) {
        S sum = 0, sq = 0;
        for (long n = 0; n < N; ++n) {
          MapConstVec<S> v(xd + (n * C + c) * HW, HW);
          sum += v.sum();
          sq += v.squaredNorm();
        }
        const S mu = sum / S(m);
        const S var = sq / S(m) - mu * mu;
        (*mean)[c] = mu;
        (*inv_std)[c] = S(1) / std::sqrt(std::max(var, S(0)) + eps);
        rm[c] = (S(1) - momentum) * rm[c] + momentum * mu;
        rv[c] = (S(1) - momentum) * rv[c] + momentum * std::max(var, S(0));
      }
    });
  } else {
    for (long c = 0; c < C; ++c) {
      (*mean)[c] = running_mean.value()[c];
      (*inv_std)[c] = S(1) / std::sqrt(running_var.value()[c] + eps);
    }
  }

  const bool train = (mode == Mode::Train);
  Tensor<S> out = make_op_output<S>(x.shape(), {x, gamma, beta}, [=](Node<S>& node) {
    const S* g = node.grad.data();
    const S* xv = xn->value.data();
    const S* gam = gn->value.data();
    const bool need_x = xn->requires_grad;
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (need_x) xn->ensure_grad();
    parallel_for(C, node.value.size(), [&](long, long cb, long ce) {
      for (long c = cb; c < ce; ++c) {
        const S mu = (*mean)[c], is = (*inv_std)[c];
        S sum_g = 0, sum_gx = 0;
        for (long n = 0; n < N; ++n) {
          MapConstVec<S> gv(g + (n * C + c) * HW, HW);
          MapConstVec<S> xvv(xv + (n * C + c) * HW, HW);
          sum_g += gv.sum();
          sum_gx += (gv.array() * ((xvv.array() - mu) * is)).sum();
        }
        if (gn->requires_grad) gn->grad[c] += sum_gx;
        if (bn->requires_grad) bn->grad[c] += sum_g;
        if (!need_x) continue;
        if (train) {
          const S mg = sum_g / S(m), mgx = sum_gx / S(m);
          for (long n = 0; n < N; ++n) {
            MapConstVec<S> gv(g + (n * C + c) * HW, HW);
            MapConstVec<S> xvv(xv + (n * C + c) * HW, HW);
            MapVec<S> gx(xn->grad.data() + (n * C + c) * HW, HW);
            gx.array() += gam[c] * is *
                          (gv.array() - mg - ((xvv.array() - mu) * is) * mgx);
          }
        } else {
          for (long n = 0; n < N; ++n) {
            MapConstVec<S> gv(g + (n * C + c) * HW, HW);
            MapVec<S> gx(xn->grad.data() + (n * C + c) * HW, HW);
            gx.array() += gam[c] * is * gv.array();
          }
        }
      }
    });
  });

  S* od = out.value().data();
  const S* gam = gn->value.data();
  const S* bet = bn->value.data();
  parallel_for(C, x.size(), [&](long, long cb, long ce) {
    for (long c = cb; c < ce; ++c) {
      const S mu = (*mean)[c], is = (*inv_std)[c];
      for (long n = 0; n < N; ++n) {
        MapConstVec<S> v(xd + (n * C + c) * HW, HW);
        MapVec<S> o(od + (n * C + c) * HW, HW);
        o.array() = ((v.array() - mu) * is) * gam[c] + bet[c];
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  auto xn = x.node();
  Tensor<S> out = make_op_output<S>(x.shape(), {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    xn->grad.array() +=
        node.grad.array() * (xn->value.array() > S(0)).template cast<S>();
  });
  out.value() = xn->value.cwiseMax(S(0));
  return out;
}

// y = x*W + b with x:(N,D), W:(D,K), b:(K).
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, std::optional<Tensor<S>> bias) {
  if (x.rank() != 2 || w.rank() != 2) throw DimError("linear: x and w must be 2-D");
  const long N = x.dim(0), D = x.dim(1), K = w.dim(1);
  if (w.dim(0) != D)
    throw DimError("linear: inner dims disagree: x " + shape_str(x.shape()) + " vs w " +
                   shape_str(w.shape()));
  if (bias && bias->size() != K) throw DimError("linear: bias must have length " + std::to_string(K));
  std::vector<Tensor<S>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias ? bias->node() : nullptr;

  Tensor<S> out = make_op_output<S>({N, K}, inputs, [=](Node<S>& node) {
    MapConstMat<S> g(node.grad.data(), N, K);
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      MapVec<S>(bn->grad.data(), K) += g.colwise().sum().transpose();
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      MapConstMat<S> xm(xn->value.data(), N, D);
      MapMat<S> gw(wn->grad.data(), D, K);
      gw.noalias() += xm.transpose() * g;
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      MapConstMat<S> wm(wn->value.data(), D, K);
      MapMat<S> gx(xn->grad.data(), N, D);
      gx.noalias() += g * wm.transpose();
    }
  });
  MapConstMat<S> xm(xn->value.data(), N, D);
  MapConstMat<S> wm(wn->value.data(), D, K);
  MapMat<S> om(out.value().data(), N, K);
  om.noalias() = xm * wm;
  if (bn) om.rowwise() += MapConstVec<S>(bn->value.data(), K).transpose();
  return out;
}

// Train mode zeroes each unit with probability p and rescales survivors by
// 1/(1-p); Eval mode is the identity.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Mode mode, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must lie in [0,1)");
  if (mode == Mode::Eval || p == 0.0) {
    auto xn = x.node();
    Tensor<S> out = make_op_output<S>(x.shape(), {x}, [=](Node<S>& node) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      xn->grad += node.grad;
    });
    out.value() = xn->value;
    return out;
  }
  if (!rng) throw StateError("dropout: train mode requires an rng");
  auto xn = x.node();
  auto mask = std::make_shared<VecX<S>>(x.size());
  const S keep_scale = S(1.0 / (1.0 - p));
  for (long i = 0; i < x.size(); ++i)
    (*mask)[i] = rng->bernoulli(p) ? S(0) : keep_scale;
  Tensor<S> out = make_op_output<S>(x.shape(), {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    xn->grad.array() += node.grad.array() * mask->array();
  });
  out.value().array() = xn->value.array() * mask->array();
  return out;
}

// Reshape channels (g, C/g) -> transpose -> flatten; a pure permutation.
template <typename S>
Tensor<S> channel_shuffle(const Tensor<S>& x, long groups) {
  if (x.rank() != 4) throw DimError("channel_shuffle: input must be NCHW");
  const long N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups < 1 || C % groups != 0)
    throw ConfigError("channel_shuffle: groups=" + std::to_string(groups) +
                      " must divide C=" + std::to_string(C));
  const long per = C / groups;
  auto xn = x.node();
  Tensor<S> out = make_op_output<S>(x.shape(), {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    // inverse of shuffle(g) is shuffle(C/g)
    const S* g = node.grad.data();
    S* gx = xn->grad.data();
    for (long n = 0; n < N; ++n)
      for (long j = 0; j < groups; ++j)
        for (long k = 0; k < per; ++k) {
          const long src = (n * C + k * groups + j) * HW;
          const long dst = (n * C + j * per + k) * HW;
          MapVec<S>(gx + dst, HW) += MapConstVec<S>(g + src, HW);
        }
  });
  const S* xd = xn->value.data();
  S* od = out.value().data();
  for (long n = 0; n < N; ++n)
    for (long j = 0; j < groups; ++j)
      for (long k = 0; k < per; ++k)
        MapVec<S>(od + (n * C + k * groups + j) * HW, HW) =
            MapConstVec<S>(xd + (n * C + j * per + k) * HW, HW);
  return out;
}

// Concatenate along dim 1 (channels of NCHW or columns of (N,D)).
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 4))
    throw DimError("concat_channels: inputs must both be 2-D or both 4-D");
  if (a.dim(0) != b.dim(0))
    throw DimError("concat_channels: batch sizes differ: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  const long N = a.dim(0);
  const long Ca = a.dim(1), Cb = b.dim(1);
  long blk = 1;
  Shape out_shape{N, Ca + Cb};
  if (a.rank() == 4) {
    if (a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
      throw DimError("concat_channels: spatial dims differ");
    blk = a.dim(2) * a.dim(3);
    out_shape = {N, Ca + Cb, a.dim(2), a.dim(3)};
  }
  auto an = a.node();
  auto bn = b.node();
  const long wa = Ca * blk, wb = Cb * blk;
  Tensor<S> out = make_op_output<S>(out_shape, {a, b}, [=](Node<S>& node) {
    const S* g = node.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (long n = 0; n < N; ++n)
        MapVec<S>(an->grad.data() + n * wa, wa) += MapConstVec<S>(g + n * (wa + wb), wa);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (long n = 0; n < N; ++n)
        MapVec<S>(bn->grad.data() + n * wb, wb) +=
            MapConstVec<S>(g + n * (wa + wb) + wa, wb);
    }
  });
  S* od = out.value().data();
  for (long n = 0; n < N; ++n) {
    MapVec<S>(od + n * (wa + wb), wa) = MapConstVec<S>(an->value.data() + n * wa, wa);
    MapVec<S>(od + n * (wa + wb) + wa, wb) = MapConstVec<S>(bn->value.data() + n * wb, wb);
  }
  return out;
}

// Channels [c0, c1) of dim 1.
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, long c0, long c1) {
  if (x.rank() != 2 && x.rank() != 4) throw DimError("slice_channels: input must be 2-D or 4-D");
  const long N = x.dim(0), C = x.dim(1);
  if (c0 < 0 || c1 > C || c0 >= c1) throw DimError("slice_channels: bad range");
  const long blk = (x.rank() == 4) ? x.dim(2) * x.dim(3) : 1;
  Shape out_shape = x.shape();
  out_shape[1] = c1 - c0;
  auto xn = x.node();
  const long wo = (c1 - c0) * blk, wi = C * blk, off = c0 * blk;
  Tensor<S> out = make_op_output<S>(out_shape, {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (long n = 0; n < N; ++n)
      MapVec<S>(xn->grad.data() + n * wi + off, wo) +=
          MapConstVec<S>(node.grad.data() + n * wo, wo);
  });
  for (long n = 0; n < N; ++n)
    MapVec<S>(out.value().data() + n * wo, wo) =
        MapConstVec<S>(xn->value.data() + n * wi + off, wo);
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimError("add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  Tensor<S> out = make_op_output<S>(a.shape(), {a, b}, [=](Node<S>& node) {
    if (an->requires_grad) accumulate_grad(*an, node.grad);
    if (bn->requires_grad) accumulate_grad(*bn, node.grad);
  });
  out.value() = an->value + bn->value;
  return out;
}

template <typename S>
Tensor<S> cwise_mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimError("cwise_mul: shapes differ: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  Tensor<S> out = make_op_output<S>(a.shape(), {a, b}, [=](Node<S>& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      an->grad.array() += node.grad.array() * bn->value.array();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad.array() += node.grad.array() * an->value.array();
    }
  });
  out.value().array() = an->value.array() * bn->value.array();
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S s) {
  auto xn = x.node();
  Tensor<S> out = make_op_output<S>(x.shape(), {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    xn->grad += s * node.grad;
  });
  out.value() = s * xn->value;
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, const Shape& shape) {
  if (numel(shape) != x.size())
    throw DimError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node();
  Tensor<S> out = make_op_output<S>(shape, {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    accumulate_grad(*xn, node.grad);
  });
  out.value() = xn->value;
  return out;
}

// C[b] = op(A[b]) * op(B[b]) over the leading batch dim of two rank-3 tensors.
template <typename S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3) throw DimError("batched_matmul: inputs must be rank-3");
  if (a.dim(0) != b.dim(0)) throw DimError("batched_matmul: batch dims differ");
  const long B = a.dim(0);
  const long M = trans_a ? a.dim(2) : a.dim(1);
  const long Ka = trans_a ? a.dim(1) : a.dim(2);
  const long Kb = trans_b ? b.dim(2) : b.dim(1);
  const long Nn = trans_b ? b.dim(1) : b.dim(2);
  if (Ka != Kb)
    throw DimError("batched_matmul: inner dims disagree: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  const long sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), sc = M * Nn;
  const long ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);

  Tensor<S> out = make_op_output<S>({B, M, Nn}, {a, b}, [=](Node<S>& node) {
    const bool need_a = an->requires_grad, need_b = bn->requires_grad;
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    parallel_for(B, 2 * B * M * Nn * Ka, [&](long, long ib, long ie) {
      for (long i = ib; i < ie; ++i) {
        MapConstMat<S> g(node.grad.data() + i * sc, M, Nn);
        MapConstMat<S> am(an->value.data() + i * sa, ar, ac);
        MapConstMat<S> bm(bn->value.data() + i * sb, br, bc);
        if (need_a) {
          MapMat<S> ga(an->grad.data() + i * sa, ar, ac);
          // dX = dC * Y^T with X = op(A); fold the outer transpose back in
          if (!trans_a) {
            if (!trans_b) ga.noalias() += g * bm.transpose();
            else ga.noalias() += g * bm;
          } else {
            if (!trans_b) ga.noalias() += bm * g.transpose();
            else ga.noalias() += bm.transpose() * g.transpose();
          }
        }
        if (need_b) {
          MapMat<S> gb(bn->grad.data() + i * sb, br, bc);
          if (!trans_b) {
            if (!trans_a) gb.noalias() += am.transpose() * g;
            else gb.noalias() += am * g;
          } else {
            if (!trans_a) gb.noalias() += g.transpose() * am;
            else gb.noalias() += g.transpose() * am.transpose();
          }
        }
      }
    });
  });
  parallel_for(B, B * M * Nn * Ka, [&](long, long ib, long ie) {
    for (long i = ib; i < ie; ++i) {
      MapConstMat<S> am(an->value.data() + i * sa, ar, ac);
      MapConstMat<S> bm(bn->value.data() + i * sb, br, bc);
      MapMat<S> cm(out.value().data() + i * sc, M, Nn);
      if (!trans_a && !trans_b) cm.noalias() = am * bm;
      else if (trans_a && !trans_b) cm.noalias() = am.transpose() * bm;
      else if (!trans_a && trans_b) cm.noalias() = am * bm.transpose();
      else cm.noalias() = am.transpose() * bm.transpose();
    }
  });
  return out;
}

// Softmax over the last dim, applied row-by-row.
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() < 2) throw DimError("softmax_lastdim: need rank >= 2");
  const long L = x.dim(x.rank() - 1);
  const long R = x.size() / L;
  auto xn = x.node();
  auto y_cache = std::make_shared<VecX<S>>();
  Tensor<S> out = make_op_output<S>(x.shape(), {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* y = y_cache->data();
    const S* g = node.grad.data();
    S* gx = xn->grad.data();
    parallel_for(R, R * L, [&](long, long rb, long re) {
      for (long r = rb; r < re; ++r) {
        MapConstVec<S> yr(y + r * L, L);
        MapConstVec<S> gr(g + r * L, L);
        const S dot = yr.dot(gr);
        MapVec<S>(gx + r * L, L).array() += yr.array() * (gr.array() - dot);
      }
    });
  });
  out.value() = xn->value;
  S* od = out.value().data();
  parallel_for(R, R * L, [&](long, long rb, long re) {
    MapMat<S> om(od + rb * L, re - rb, L);
    detail::softmax_rows_inplace<S>(om);
  });
  *y_cache = out.value();
  return out;
}

// x:(B,R,C) + bias:(R,C) broadcast over the batch dim.
template <typename S>
Tensor<S> add_rank2_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() != 3 || bias.rank() != 2 || x.dim(1) != bias.dim(0) || x.dim(2) != bias.dim(1))
    throw DimError("add_rank2_bias: want (B,R,C) + (R,C)");
  const long B = x.dim(0), RC = x.dim(1) * x.dim(2);
  auto xn = x.node();
  auto bn = bias.node();
  Tensor<S> out = make_op_output<S>(x.shape(), {x, bias}, [=](Node<S>& node) {
    if (xn->requires_grad) accumulate_grad(*xn, node.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (long i = 0; i < B; ++i)
        bn->grad += MapConstVec<S>(node.grad.data() + i * RC, RC);
    }
  });
  for (long i = 0; i < B; ++i)
    MapVec<S>(out.value().data() + i * RC, RC) =
        MapConstVec<S>(xn->value.data() + i * RC, RC) + bn->value;
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  auto xn = x.node();
  Tensor<S> out = make_op_output<S>({1}, {x}, [=](Node<S>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    xn->grad.array() += node.grad[0];
  });
  out.value()[0] = xn->value.sum();
  return out;
}

// Stable mean softmax cross-entropy on raw logit values, no tape involved.
// Returns the loss and d(loss)/d(logits) = (softmax - onehot) / N.
template <typename S>
std::pair<S, MatX<S>> softmax_cross_entropy_with_grad(const MatX<S>& logits,
                                                      const std::vector<long>& labels) {
  const long N = logits.rows(), K = logits.cols();
  if (static_cast<long>(labels.size()) != N)
    throw DimError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                   std::to_string(N));
  MatX<S> probs = logits;
  S loss = 0;
  for (long n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K)
      throw DataError("cross_entropy: label " + std::to_string(labels[n]) + " outside [0," +
                      std::to_string(K) + ")");
    auto row = probs.row(n);
    const S mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    const S z = row.sum();
    loss += std::log(z) - (logits(n, labels[n]) - mx);
    row /= z;
  }
  loss /= S(N);
  for (long n = 0; n < N; ++n) probs(n, labels[n]) -= S(1);
  probs /= S(N);
  return {loss, std::move(probs)};
}

// Tape op: scalar mean cross-entropy of (N,K) logits against class indices.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<long>& labels) {
  if (logits.rank() != 2) throw DimError("cross_entropy: logits must be (N,K)");
  const long N = logits.dim(0), K = logits.dim(1);
  auto ln = logits.node();
  MapConstMat<S> lm(ln->value.data(), N, K);
  auto [loss, grad] = softmax_cross_entropy_with_grad<S>(lm, labels);
  auto grad_cache = std::make_shared<MatX<S>>(std::move(grad));
  Tensor<S> out = make_op_output<S>({1}, {logits}, [=](Node<S>& node) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    MapMat<S>(ln->grad.data(), N, K) += node.grad[0] * (*grad_cache);
  });
  out.value()[0] = loss;
  return out;
}

// Spec-shaped convenience: loss plus analytic logit gradient in one call.
template <typename S>
std::pair<S, Tensor<S>> softmax_cross_entropy_pair(const Tensor<S>& logits,
                                                   const std::vector<long>& labels) {
  if (logits.rank() != 2) throw DimError("cross_entropy: logits must be (N,K)");
  const long N = logits.dim(0), K = logits.dim(1);
  MapConstMat<S> lm(logits.value().data(), N, K);
  auto [loss, grad] = softmax_cross_entropy_with_grad<S>(lm, labels);
  Tensor<S> g = Tensor<S>::zeros({N, K});
  MapMat<S>(g.value().data(), N, K) = grad;
  return {loss, g};
}

}  // namespace ferlite::ops
