#include "doctest.h"

#include "ferlite/efficientvit.hpp"
#include "ferlite/shufflenet.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace ferlite;
namespace op = ferlite::ops;
using T = Tensor<float>;

namespace {

// Independent parameter-count arithmetic, straight from the configs.
long conv_bn(long in, long out, long k, long groups = 1) {
  return out * (in / groups) * k * k + 2 * out;
}

long shuffle_basic(long c) {
  const long b = c / 2;
  return conv_bn(b, b, 1) + conv_bn(b, b, 3, b) + conv_bn(b, b, 1);
}

long shuffle_down(long in, long out) {
  const long h = out / 2;
  return conv_bn(in, in, 3, in) + conv_bn(in, h, 1) + conv_bn(in, h, 1) +
         conv_bn(h, h, 3, h) + conv_bn(h, h, 1);
}

long shufflenet_expected(const ShuffleNetConfig& c) {
  long total = conv_bn(3, c.stage_out_channels[0], 3);
  long in = c.stage_out_channels[0];
  for (int s = 0; s < 3; ++s) {
    const long out = c.stage_out_channels[s + 1];
    total += shuffle_down(in, out);
    for (long r = 1; r < c.stage_repeats[s]; ++r) total += shuffle_basic(out);
    in = out;
  }
  total += conv_bn(in, c.stage_out_channels[4], 1);
  return total;
}

long ffn_params(long d, long ratio) {
  const long h = d * ratio;
  return conv_bn(d, h, 1) + conv_bn(h, d, 1);
}

long cga_params(long d, long heads, long dk, long tokens, bool bias) {
  const long dv = d / heads;
  long total = heads * conv_bn(dv, 2 * dk + dv, 1);
  if (bias) total += heads * tokens * tokens;
  total += conv_bn(d, d, 1);  // output projection
  return total;
}

long sandwich_params(long d, long heads, long dk, long tokens, long ratio, bool bias) {
  return 2 * conv_bn(d, d, 3, d) + 2 * ffn_params(d, ratio) +
         cga_params(d, heads, dk, tokens, bias);
}

long merge_params(long din, long dout, long hidden_mult, long ds_ratio) {
  const long h = din * hidden_mult;
  return conv_bn(din, din, 3, din) + ffn_params(din, ds_ratio) + conv_bn(din, h, 1) +
         conv_bn(h, h, 3, h) + conv_bn(h, dout, 1) + conv_bn(dout, dout, 3, dout) +
         ffn_params(dout, ds_ratio);
}

long efficientvit_expected(const EfficientViTConfig& c) {
  const long d0 = c.embed_dims[0];
  long total = conv_bn(3, d0 / 8, 3) + conv_bn(d0 / 8, d0 / 4, 3) +
               conv_bn(d0 / 4, d0 / 2, 3) + conv_bn(d0 / 2, d0, 3);
  const long tokens[3] = {14 * 14, 7 * 7, 4 * 4};
  for (int s = 0; s < 3; ++s)
    total += c.depths[s] * sandwich_params(c.embed_dims[s], c.heads[s], c.key_dim, tokens[s],
                                           c.ffn_ratio, c.attention_bias);
  total += merge_params(c.embed_dims[0], c.embed_dims[1], c.merge_hidden_mult, c.ds_ffn_ratio);
  total += merge_params(c.embed_dims[1], c.embed_dims[2], c.merge_hidden_mult, c.ds_ffn_ratio);
  total += 2 * c.feature_dim();  // final norm
  return total;
}

T random_images(long n, Rng& rng) {
  T x = T::zeros({n, 3, 224, 224});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(rng.normal(0.0, 1.0));
  return x;
}

}  // namespace

TEST_CASE("shufflenet: feature shape, stage resolutions, determinism") {
  auto net = build_shufflenet<float>(ShuffleNetConfig{}, 42);
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng rng(5);
  T x = random_images(2, rng);
  NoGradGuard ng;
  T f = net->forward(x, ctx);
  CHECK(f.shape() == Shape{2, 1024});
  CHECK(f.all_finite());

  // stride arithmetic oracle: 224 -> 112 (stem) -> 56 (pool) -> 28 -> 14 -> 7
  T y = net->stem().forward(x, ctx);
  CHECK(y.shape() == Shape{2, 24, 112, 112});
  y = op::max_pool2d(y, 3, 2, 1);
  CHECK(y.shape() == Shape{2, 24, 56, 56});
  const long stage_hw[3] = {28, 14, 7};
  const long stage_ch[3] = {116, 232, 464};
  for (int s = 0; s < 3; ++s) {
    y = net->stage(s).forward(y, ctx);
    CHECK(y.shape() == Shape{2, stage_ch[s], stage_hw[s], stage_hw[s]});
  }

  T f2 = net->forward(x, ctx);
  for (long i = 0; i < f.size(); ++i) CHECK(f.value()[i] == f2.value()[i]);
}

TEST_CASE("shufflenet: parameter count matches the summation oracle and the budget") {
  ShuffleNetConfig cfg;
  auto net = build_shufflenet<float>(cfg, 1);
  const long bare = count_params(*net);
  CHECK(bare == shufflenet_expected(cfg));
  CHECK(bare == 1253604);
  // bare extractor within 5% of 1.27M
  CHECK(std::abs(double(bare) - 1.27e6) / 1.27e6 < 0.05);
  // plus a 1024 -> 1000 classification head: within 3% of the 2.3M budget
  const long with_head = bare + 1024 * 1000 + 1000;
  CHECK(with_head == 2278604);
  CHECK(std::abs(double(with_head) - 2.3e6) / 2.3e6 < 0.03);
}

TEST_CASE("shufflenet: basic unit preserves shape; shuffle operands stay even") {
  Rng rng(9);
  ShuffleBasicUnit<float> unit(116, rng);
  Ctx<float> ctx{Mode::Eval, nullptr};
  T x = T::zeros({1, 116, 28, 28});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(rng.normal());
  NoGradGuard ng;
  T y = unit.forward(x, ctx);
  CHECK(y.shape() == x.shape());
  CHECK_THROWS_AS(ShuffleBasicUnit<float>(117, rng), ConfigError);
  ShuffleNetConfig bad;
  bad.stage_out_channels = {24, 115, 232, 464, 1024};
  CHECK_THROWS_AS(build_shufflenet<float>(bad, 1), ConfigError);
}

TEST_CASE("shufflenet: batch equivariance in eval mode") {
  auto net = build_shufflenet<float>(ShuffleNetConfig{}, 7);
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng rng(11);
  T both = random_images(2, rng);
  T a = T::zeros({1, 3, 224, 224});
  T b = T::zeros({1, 3, 224, 224});
  const long stride = 3 * 224 * 224;
  for (long i = 0; i < stride; ++i) {
    a.value()[i] = both.value()[i];
    b.value()[i] = both.value()[stride + i];
  }
  NoGradGuard ng;
  T fb = net->forward(both, ctx);
  T fa = net->forward(a, ctx);
  T fbb = net->forward(b, ctx);
  for (long i = 0; i < 1024; ++i) {
    CHECK(fb.value()[i] == doctest::Approx(fa.value()[i]).epsilon(1e-5));
    CHECK(fb.value()[1024 + i] == doctest::Approx(fbb.value()[i]).epsilon(1e-5));
  }

  // permuting the batch permutes the output rows identically
  T swapped = T::zeros({2, 3, 224, 224});
  for (long i = 0; i < stride; ++i) {
    swapped.value()[i] = b.value()[i];
    swapped.value()[stride + i] = a.value()[i];
  }
  T fs = net->forward(swapped, ctx);
  for (long i = 0; i < 1024; ++i) {
    CHECK(fs.value()[i] == fb.value()[1024 + i]);
    CHECK(fs.value()[1024 + i] == fb.value()[i]);
  }
}

TEST_CASE("shufflenet: rejects non-224 inputs") {
  auto net = build_shufflenet<float>(ShuffleNetConfig{}, 3);
  Ctx<float> ctx{Mode::Eval, nullptr};
  T bad = T::zeros({1, 3, 128, 128});
  CHECK_THROWS_AS(net->forward(bad, ctx), DimError);
}

TEST_CASE("efficientvit: feature shape, patch embedding resolution, determinism") {
  auto net = build_efficientvit<float>(EfficientViTConfig{}, 42);
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng rng(13);
  T x = random_images(2, rng);
  NoGradGuard ng;
  T f = net->forward(x, ctx);
  CHECK(f.shape() == Shape{2, 192});
  CHECK(f.all_finite());

  T tokens = net->patch_embed().forward(x, ctx);
  CHECK(tokens.shape() == Shape{2, 64, 14, 14});  // 224 / 16

  T f2 = net->forward(x, ctx);
  for (long i = 0; i < f.size(); ++i) CHECK(f.value()[i] == f2.value()[i]);

  CHECK_THROWS_AS(net->forward(T::zeros({1, 3, 112, 112}), ctx), DimError);
}

TEST_CASE("efficientvit: parameter count matches the summation oracle and the budget") {
  EfficientViTConfig cfg;
  auto net = build_efficientvit<float>(cfg, 1);
  const long bare = count_params(*net);
  CHECK(bare == efficientvit_expected(cfg));
  CHECK(bare == 4048144);
  const long with_head = bare + 192 * 1000 + 1000;
  CHECK(std::abs(double(with_head) - 4.2e6) / 4.2e6 < 0.05);
}

TEST_CASE("efficientvit: sandwich block preserves shape") {
  Rng rng(15);
  SandwichBlock<float> block(64, 4, 16, 14 * 14, 5, true, rng);
  Ctx<float> ctx{Mode::Eval, nullptr};
  T x = T::zeros({1, 64, 14, 14});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(rng.normal());
  NoGradGuard ng;
  T y = block.forward(x, ctx);
  CHECK(y.shape() == x.shape());
}

TEST_CASE("efficientvit: batch equivariance in eval mode") {
  auto net = build_efficientvit<float>(EfficientViTConfig{}, 21);
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng rng(17);
  T both = random_images(2, rng);
  T a = T::zeros({1, 3, 224, 224});
  const long stride = 3 * 224 * 224;
  for (long i = 0; i < stride; ++i) a.value()[i] = both.value()[i];
  NoGradGuard ng;
  T fb = net->forward(both, ctx);
  T fa = net->forward(a, ctx);
  for (long i = 0; i < 192; ++i)
    CHECK(fb.value()[i] == doctest::Approx(fa.value()[i]).epsilon(1e-5));
}

TEST_CASE("cascaded attention: shape contract and softmax rows") {
  Rng rng(19);
  CascadedGroupAttention<float> cga(128, 4, 16, 14 * 14, true, rng);
  Ctx<float> ctx{Mode::Eval, nullptr};
  T x = T::zeros({1, 128, 14, 14});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(rng.normal());
  NoGradGuard ng;
  T y = cga.forward(x, ctx);
  CHECK(y.shape() == Shape{1, 128, 14, 14});
  CHECK_THROWS_AS(CascadedGroupAttention<float>(126, 4, 16, 196, true, rng), ConfigError);

  // row-stochastic attention, checked through the softmax op the module uses
  Rng r2(23);
  auto logits = oracles::random_tensor({2, 6, 6}, r2, false, 3.0);
  auto sm = op::softmax_lastdim(logits);
  for (long r = 0; r < 12; ++r)
    CHECK(sm.value().segment(r * 6, 6).sum() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cascaded attention: heads=1 equals a directly coded single-head attention") {
  const long D = 4, DK = 3, H = 2, W = 2, T_ = 4;
  Rng rng(29);
  CascadedGroupAttention<double> cga(D, 1, DK, T_, /*use_bias=*/false, rng);
  Ctx<double> ctx{Mode::Eval, nullptr};
  Tensor<double> x = oracles::random_tensor({1, D, H, W}, rng);
  NoGradGuard ng;
  Tensor<double> y = cga.forward(x, ctx);

  // oracle: plain matrix algebra on the module's own weights, fresh-BN eval
  // semantics (gamma=1, beta=0, mean=0, var=1): scale by 1/sqrt(1+eps)
  const double bn_scale = 1.0 / std::sqrt(1.0 + 1e-5);
  Eigen::MatrixXd xm(D, T_);
  for (long c = 0; c < D; ++c)
    for (long t = 0; t < T_; ++t) xm(c, t) = x.value()[c * T_ + t];
  auto& qkv_w = cga.qkv(0).conv().weight();
  Eigen::MatrixXd wqkv(2 * DK + D, D);
  for (long o = 0; o < 2 * DK + D; ++o)
    for (long i = 0; i < D; ++i) wqkv(o, i) = qkv_w.value()[o * D + i];
  Eigen::MatrixXd qkv = bn_scale * (wqkv * xm);
  Eigen::MatrixXd q = qkv.topRows(DK), k = qkv.middleRows(DK, DK), v = qkv.bottomRows(D);
  Eigen::MatrixXd logits = (q.transpose() * k) / std::sqrt(double(DK));
  for (long r = 0; r < T_; ++r) {
    Eigen::VectorXd row = logits.row(r);
    row = (row.array() - row.maxCoeff()).exp();
    logits.row(r) = row / row.sum();
  }
  Eigen::MatrixXd att_out = (v * logits.transpose()).cwiseMax(0.0);
  auto& proj_w = cga.proj().conv().weight();
  Eigen::MatrixXd wp(D, D);
  for (long o = 0; o < D; ++o)
    for (long i = 0; i < D; ++i) wp(o, i) = proj_w.value()[o * D + i];
  Eigen::MatrixXd want = bn_scale * (wp * att_out);
  for (long c = 0; c < D; ++c)
    for (long t = 0; t < T_; ++t)
      CHECK(y.value()[c * T_ + t] == doctest::Approx(want(c, t)).epsilon(1e-10));
}

TEST_CASE("cascaded attention: the cascade feeds head i into head i+1") {
  const long D = 8, DK = 4, T_ = 4;
  Rng rng(31);
  CascadedGroupAttention<float> cga(D, 2, DK, T_, false, rng);
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng xr(37);
  T x = T::zeros({1, D, 2, 2});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(xr.normal());
  NoGradGuard ng;
  std::vector<T> base_heads;
  cga.forward_heads(x, ctx, &base_heads);
  REQUIRE(base_heads.size() == 2);

  // zero head 0's value projection rows -> head 0 output becomes zero
  auto& w = cga.qkv(0).conv().weight();  // (2*DK + D/2, D/2, 1, 1)
  const long dv = D / 2;
  for (long o = 2 * DK; o < 2 * DK + dv; ++o)
    for (long i = 0; i < dv; ++i) w.value()[o * dv + i] = 0.0f;

  std::vector<T> pert_heads;
  cga.forward_heads(x, ctx, &pert_heads);
  float head0_mag = pert_heads[0].value().cwiseAbs().maxCoeff();
  CHECK(head0_mag == 0.0f);
  float diff = (pert_heads[1].value() - base_heads[1].value()).cwiseAbs().maxCoeff();
  CHECK(diff > 1e-6f);
}

TEST_CASE("efficientvit: zeroed output projections make a sandwich block the identity") {
  Rng rng(41);
  SandwichBlock<float> block(16, 4, 4, 9, 2, true, rng);
  auto zero_convbn = [](ConvBN<float>& cb) { cb.conv().weight().value().setZero(); };
  auto& seq = block.layers();
  zero_convbn(static_cast<ConvBN<float>&>(static_cast<Residual<float>&>(seq.child(0)).inner()));
  zero_convbn(static_cast<FeedForward<float>&>(static_cast<Residual<float>&>(seq.child(1)).inner())
                  .reduce());
  zero_convbn(block.attention().proj());
  zero_convbn(static_cast<ConvBN<float>&>(static_cast<Residual<float>&>(seq.child(3)).inner()));
  zero_convbn(static_cast<FeedForward<float>&>(static_cast<Residual<float>&>(seq.child(4)).inner())
                  .reduce());
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng xr(43);
  T x = T::zeros({2, 16, 3, 3});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(xr.normal());
  NoGradGuard ng;
  T y = block.forward(x, ctx);
  for (long i = 0; i < x.size(); ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("cascaded attention: permutation-equivariant over tokens without bias") {
  const long D = 8, T_ = 6;
  Rng rng(47);
  CascadedGroupAttention<float> cga(D, 2, 4, T_, /*use_bias=*/false, rng);
  Ctx<float> ctx{Mode::Eval, nullptr};
  Rng xr(53);
  T x = T::zeros({1, D, 2, 3});
  for (long i = 0; i < x.size(); ++i) x.value()[i] = float(xr.normal());
  std::vector<long> perm{3, 0, 5, 1, 4, 2};
  T xp = T::zeros({1, D, 2, 3});
  for (long c = 0; c < D; ++c)
    for (long t = 0; t < T_; ++t) xp.value()[c * T_ + t] = x.value()[c * T_ + perm[t]];
  NoGradGuard ng;
  T y = cga.forward(x, ctx);
  T yp = cga.forward(xp, ctx);
  for (long c = 0; c < D; ++c)
    for (long t = 0; t < T_; ++t)
      CHECK(yp.value()[c * T_ + t] == doctest::Approx(y.value()[c * T_ + perm[t]]).epsilon(1e-5));
}
