// Central finite-difference checks for every differentiable primitive,
// run in double precision on small tensors.
#include "doctest.h"

#include "ferlite/ops.hpp"
#include "oracles.hpp"

using namespace ferlite;
namespace op = ferlite::ops;
using Td = Tensor<double>;

static constexpr double kTol = 1e-4;

TEST_CASE("gradcheck: conv2d plain / strided / grouped / depthwise / pointwise") {
  Rng rng(101);
  struct Case {
    long N, IC, H, W, OC, K, s, p, g;
  };
  for (Case c : {Case{2, 2, 4, 4, 3, 3, 1, 1, 1}, Case{1, 2, 5, 5, 2, 3, 2, 1, 1},
                 Case{1, 4, 3, 3, 4, 3, 1, 1, 2}, Case{1, 3, 4, 4, 3, 3, 1, 1, 3},
                 Case{2, 3, 3, 3, 4, 1, 1, 0, 1}}) {
    auto x = oracles::random_tensor({c.N, c.IC, c.H, c.W}, rng, true);
    auto w = oracles::random_tensor({c.OC, c.IC / c.g, c.K, c.K}, rng, true, 0.5);
    auto b = oracles::random_tensor({c.OC}, rng, true);
    const long OH = (c.H + 2 * c.p - c.K) / c.s + 1;
    auto r = oracles::random_tensor({c.N, c.OC, OH, OH == 0 ? 0 : (c.W + 2 * c.p - c.K) / c.s + 1},
                                    rng);
    auto make = [&]() {
      return oracles::probe_loss(op::conv2d(x, w, std::optional<Td>(b), c.s, c.p, c.g), r);
    };
    CHECK(oracles::max_rel_grad_error(make, {x, w, b}) < kTol);
  }
}

TEST_CASE("gradcheck: batch_norm train and eval, 4-D and 2-D") {
  Rng rng(103);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    auto x = oracles::random_tensor({3, 2, 2, 2}, rng, true);
    auto gamma = oracles::random_tensor({2}, rng, true);
    auto beta = oracles::random_tensor({2}, rng, true);
    Td rm = oracles::random_tensor({2}, rng);
    Td rv = Td::from_values({2}, {0.9, 1.4});
    auto r = oracles::random_tensor({3, 2, 2, 2}, rng);
    auto make = [&]() {
      return oracles::probe_loss(op::batch_norm(x, gamma, beta, rm, rv, mode), r);
    };
    CHECK(oracles::max_rel_grad_error(make, {x, gamma, beta}) < kTol);
  }
  auto x2 = oracles::random_tensor({5, 3}, rng, true);
  auto g2 = oracles::random_tensor({3}, rng, true);
  auto b2 = oracles::random_tensor({3}, rng, true);
  Td rm2 = Td::zeros({3}), rv2 = Td::full({3}, 1.0);
  auto r2 = oracles::random_tensor({5, 3}, rng);
  auto make2 = [&]() {
    return oracles::probe_loss(op::batch_norm(x2, g2, b2, rm2, rv2, Mode::Train), r2);
  };
  CHECK(oracles::max_rel_grad_error(make2, {x2, g2, b2}) < kTol);
}

TEST_CASE("gradcheck: linear") {
  Rng rng(105);
  auto x = oracles::random_tensor({3, 4}, rng, true);
  auto w = oracles::random_tensor({4, 2}, rng, true);
  auto b = oracles::random_tensor({2}, rng, true);
  auto r = oracles::random_tensor({3, 2}, rng);
  auto make = [&]() { return oracles::probe_loss(op::linear(x, w, std::optional<Td>(b)), r); };
  CHECK(oracles::max_rel_grad_error(make, {x, w, b}) < kTol);
}

TEST_CASE("gradcheck: relu away from the kink") {
  Rng rng(107);
  Td x = Td::zeros({4, 4}, true);
  for (long i = 0; i < x.size(); ++i) {
    double v = rng.normal();
    if (std::abs(v) < 0.1) v = v < 0 ? v - 0.2 : v + 0.2;
    x.value()[i] = v;
  }
  auto r = oracles::random_tensor({4, 4}, rng);
  auto make = [&]() { return oracles::probe_loss(op::relu(x), r); };
  CHECK(oracles::max_rel_grad_error(make, {x}, 1e-6) < kTol);
}

TEST_CASE("gradcheck: pooling") {
  Rng rng(109);
  auto x = oracles::random_tensor({2, 2, 4, 4}, rng, true);
  auto r = oracles::random_tensor({2, 2}, rng);
  auto make = [&]() { return oracles::probe_loss(op::global_avg_pool(x), r); };
  CHECK(oracles::max_rel_grad_error(make, {x}) < kTol);

  auto xm = oracles::random_tensor({1, 2, 5, 5}, rng, true);
  auto rm = oracles::random_tensor({1, 2, 2, 2}, rng);
  auto make_max = [&]() { return oracles::probe_loss(op::max_pool2d(xm, 3, 2, 0), rm); };
  CHECK(oracles::max_rel_grad_error(make_max, {xm}, 1e-6) < kTol);
}

TEST_CASE("gradcheck: dropout with a fixed mask stream") {
  Rng rng(111);
  auto x = oracles::random_tensor({4, 4}, rng, true);
  auto r = oracles::random_tensor({4, 4}, rng);
  auto make = [&]() {
    Rng mask_rng(777);  // same mask for every finite-difference evaluation
    return oracles::probe_loss(op::dropout(x, 0.3, Mode::Train, &mask_rng), r);
  };
  CHECK(oracles::max_rel_grad_error(make, {x}) < kTol);
}

TEST_CASE("gradcheck: channel_shuffle, concat, slice, add, scale, reshape, cwise_mul") {
  Rng rng(113);
  auto x = oracles::random_tensor({2, 6, 2, 2}, rng, true);
  auto r = oracles::random_tensor({2, 6, 2, 2}, rng);
  auto make_shuffle = [&]() { return oracles::probe_loss(op::channel_shuffle(x, 3), r); };
  CHECK(oracles::max_rel_grad_error(make_shuffle, {x}) < kTol);

  auto a = oracles::random_tensor({2, 2, 2, 2}, rng, true);
  auto b = oracles::random_tensor({2, 3, 2, 2}, rng, true);
  auto rc = oracles::random_tensor({2, 5, 2, 2}, rng);
  auto make_cat = [&]() { return oracles::probe_loss(op::concat_channels(a, b), rc); };
  CHECK(oracles::max_rel_grad_error(make_cat, {a, b}) < kTol);

  auto rs = oracles::random_tensor({2, 2, 2, 2}, rng);
  auto make_slice = [&]() { return oracles::probe_loss(op::slice_channels(x, 1, 3), rs); };
  CHECK(oracles::max_rel_grad_error(make_slice, {x}) < kTol);

  auto c = oracles::random_tensor({3, 4}, rng, true);
  auto d = oracles::random_tensor({3, 4}, rng, true);
  auto rr = oracles::random_tensor({3, 4}, rng);
  auto make_add = [&]() { return oracles::probe_loss(op::add(c, d), rr); };
  CHECK(oracles::max_rel_grad_error(make_add, {c, d}) < kTol);
  auto make_scale = [&]() { return oracles::probe_loss(op::scale(c, 2.5), rr); };
  CHECK(oracles::max_rel_grad_error(make_scale, {c}) < kTol);
  auto r1 = oracles::random_tensor({12}, rng);
  auto make_reshape = [&]() { return oracles::probe_loss(op::reshape(c, {12}), r1); };
  CHECK(oracles::max_rel_grad_error(make_reshape, {c}) < kTol);
  auto make_mul = [&]() { return oracles::probe_loss(op::cwise_mul(c, d), rr); };
  CHECK(oracles::max_rel_grad_error(make_mul, {c, d}) < kTol);
}

TEST_CASE("gradcheck: batched_matmul all transpose combinations") {
  Rng rng(115);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Shape sa = ta ? Shape{2, 4, 3} : Shape{2, 3, 4};
      Shape sb = tb ? Shape{2, 2, 4} : Shape{2, 4, 2};
      auto A = oracles::random_tensor(sa, rng, true);
      auto B = oracles::random_tensor(sb, rng, true);
      auto r = oracles::random_tensor({2, 3, 2}, rng);
      auto make = [&]() { return oracles::probe_loss(op::batched_matmul(A, B, ta, tb), r); };
      CHECK(oracles::max_rel_grad_error(make, {A, B}) < kTol);
    }
  }
}

TEST_CASE("gradcheck: softmax_lastdim and rank-2 bias broadcast") {
  Rng rng(117);
  auto x = oracles::random_tensor({2, 3, 4}, rng, true);
  auto r = oracles::random_tensor({2, 3, 4}, rng);
  auto make = [&]() { return oracles::probe_loss(op::softmax_lastdim(x), r); };
  CHECK(oracles::max_rel_grad_error(make, {x}) < kTol);

  auto bias = oracles::random_tensor({3, 4}, rng, true);
  auto make_bias = [&]() { return oracles::probe_loss(op::add_rank2_bias(x, bias), r); };
  CHECK(oracles::max_rel_grad_error(make_bias, {x, bias}) < kTol);
}

TEST_CASE("gradcheck: softmax cross-entropy") {
  Rng rng(119);
  auto logits = oracles::random_tensor({4, 3}, rng, true, 2.0);
  std::vector<long> labels{0, 2, 1, 2};
  auto make = [&]() { return op::softmax_cross_entropy(logits, labels); };
  CHECK(oracles::max_rel_grad_error(make, {logits}) < kTol);
}
