#pragma once

// Test-only reference implementations. Everything here is deliberately
// independent of the op code paths it is used to check: straight loops,
// no im2col, no Eigen products.

#include "ferlite/ops.hpp"
#include "ferlite/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

using ferlite::Shape;
using ferlite::Tensor;

// Direct 7-loop convolution.
template <typename S>
std::vector<S> naive_conv2d(const std::vector<S>& x, long N, long IC, long H, long W,
                            const std::vector<S>& w, long OC, long KH, long KW,
                            const std::vector<S>* bias, long stride, long pad, long groups) {
  const long OH = (H + 2 * pad - KH) / stride + 1;
  const long OW = (W + 2 * pad - KW) / stride + 1;
  const long ICG = IC / groups, OCG = OC / groups;
  std::vector<S> out(static_cast<std::size_t>(N * OC * OH * OW), S(0));
  for (long n = 0; n < N; ++n)
    for (long oc = 0; oc < OC; ++oc) {
      const long g = oc / OCG;
      for (long oh = 0; oh < OH; ++oh)
        for (long ow = 0; ow < OW; ++ow) {
          S acc = bias ? (*bias)[oc] : S(0);
          for (long cl = 0; cl < ICG; ++cl) {
            const long c = g * ICG + cl;
            for (long kh = 0; kh < KH; ++kh)
              for (long kw = 0; kw < KW; ++kw) {
                const long ih = oh * stride - pad + kh;
                const long iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((n * IC + c) * H + ih) * W + iw] *
                       w[((oc * ICG + cl) * KH + kh) * KW + kw];
              }
          }
          out[((n * OC + oc) * OH + oh) * OW + ow] = acc;
        }
    }
  return out;
}

// Channel permutation by literal reshape (g, C/g) -> transpose -> flatten
// applied to channel indices.
inline std::vector<long> shuffle_permutation(long C, long groups) {
  const long per = C / groups;
  std::vector<long> out_src(C);
  long pos = 0;
  for (long k = 0; k < per; ++k)
    for (long j = 0; j < groups; ++j) out_src[pos++] = j * per + k;
  return out_src;  // out channel i reads input channel out_src[i]
}

// Central finite differences against the tape. `make_loss` must rebuild the
// forward graph from the leaves' current values on every call.
inline double max_rel_grad_error(const std::function<Tensor<double>()>& make_loss,
                                 std::vector<Tensor<double>> leaves,
                                 double h_scale = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  Tensor<double> loss = make_loss();
  loss.backward();
  std::vector<Eigen::VectorXd> analytic;
  for (auto& l : leaves)
    analytic.push_back(l.has_grad() ? Eigen::VectorXd(l.grad())
                                    : Eigen::VectorXd(Eigen::VectorXd::Zero(l.size())));
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& l = leaves[k];
    for (long i = 0; i < l.size(); ++i) {
      const double orig = l.value()[i];
      const double h = h_scale * std::max(1.0, std::abs(orig));
      l.value()[i] = orig + h;
      const double f1 = make_loss().item();
      l.value()[i] = orig - h;
      const double f2 = make_loss().item();
      l.value()[i] = orig;
      const double num = (f1 - f2) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Scalar probe loss: sum(y .* r) with a fixed random direction r, so that
// gradient components cannot cancel.
inline Tensor<double> probe_loss(const Tensor<double>& y, const Tensor<double>& r) {
  return ferlite::ops::sum_all(ferlite::ops::cwise_mul(y, r));
}

inline Tensor<double> random_tensor(const Shape& shape, ferlite::Rng& rng,
                                    bool requires_grad = false, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(shape, requires_grad);
  for (long i = 0; i < t.size(); ++i) t.value()[i] = rng.normal(0.0, scale);
  return t;
}

// Per-class precision/recall/F1 and macro averages by brute-force counting.
struct BruteMetrics {
  std::vector<double> precision, recall, f1;
  double macro_p = 0, macro_r = 0, macro_f1 = 0, accuracy = 0;
};

inline BruteMetrics brute_force_metrics(const std::vector<long>& labels,
                                        const std::vector<long>& preds, long K) {
  BruteMetrics m;
  long correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == preds[i]) ++correct;
  m.accuracy = labels.empty() ? 0.0 : double(correct) / double(labels.size());
  for (long c = 0; c < K; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (preds[i] == c && labels[i] == c) ++tp;
      if (preds[i] == c && labels[i] != c) ++fp;
      if (preds[i] != c && labels[i] == c) ++fn;
    }
    const double p = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
    const double r = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
    const double f = (p + r > 0) ? 2.0 * p * r / (p + r) : 0.0;
    m.precision.push_back(p);
    m.recall.push_back(r);
    m.f1.push_back(f);
    m.macro_p += p / K;
    m.macro_r += r / K;
    m.macro_f1 += f / K;
  }
  return m;
}

}  // namespace oracles
