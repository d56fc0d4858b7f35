#pragma once

#include "ferlite/ops.hpp"
#include "ferlite/rng.hpp"
#include "ferlite/tensor.hpp"

#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

namespace ferlite {

template <typename S>
struct Ctx {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;  // consumed by dropout in Train mode
};

enum class ParamKind { Param, Buffer };

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  ParamKind kind = ParamKind::Param;

  bool trainable() const { return kind == ParamKind::Param && tensor.requires_grad(); }
};

template <typename S>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) = 0;
  virtual void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const = 0;
};

template <typename S>
std::vector<NamedParam<S>> named_params(const Module<S>& m) {
  std::vector<NamedParam<S>> out;
  m.collect("", out);
  std::unordered_set<std::string> seen;
  for (const auto& p : out)
    if (!seen.insert(p.name).second)
      throw ConfigError("duplicate parameter name: " + p.name);
  return out;
}

template <typename S>
long count_params(const Module<S>& m, bool trainable_only = true) {
  long n = 0;
  for (const auto& p : named_params(m)) {
    if (p.kind == ParamKind::Buffer) continue;
    if (trainable_only && !p.tensor.requires_grad()) continue;
    n += p.tensor.size();
  }
  return n;
}

template <typename S>
void zero_grads(const Module<S>& m) {
  for (auto& p : named_params(m)) p.tensor.zero_grad();
}

template <typename S>
void set_trainable(const Module<S>& m, bool trainable) {
  for (auto& p : named_params(m))
    if (p.kind == ParamKind::Param) p.tensor.set_requires_grad(trainable);
}

namespace init {

template <typename S>
void normal_(Tensor<S>& t, Rng& rng, double stddev) {
  for (long i = 0; i < t.size(); ++i) t.value()[i] = static_cast<S>(rng.normal(0.0, stddev));
}

}  // namespace init

template <typename S>
class Conv2d : public Module<S> {
 public:
  Conv2d(long in_ch, long out_ch, long k, long stride, long pad, long groups, bool bias,
         Rng& rng)
      : stride_(stride), pad_(pad), groups_(groups) {
    weight_ = Tensor<S>::zeros({out_ch, in_ch / groups, k, k}, true);
    const double fan_out = static_cast<double>(out_ch) * k * k / groups;
    init::normal_(weight_, rng, std::sqrt(2.0 / fan_out));
    if (bias) bias_ = Tensor<S>::zeros({out_ch}, true);
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>&) override {
    return ops::conv2d(x, weight_,
                       bias_.defined() ? std::optional<Tensor<S>>(bias_) : std::nullopt, stride_,
                       pad_, groups_);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    out.push_back({prefix + "weight", weight_, ParamKind::Param});
    if (bias_.defined()) out.push_back({prefix + "bias", bias_, ParamKind::Param});
  }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }

 private:
  Tensor<S> weight_, bias_;
  long stride_, pad_, groups_;
};

// Works as 2-D batch norm on NCHW inputs and 1-D on (N,D) feature matrices.
template <typename S>
class BatchNorm : public Module<S> {
 public:
  explicit BatchNorm(long channels, S momentum = S(0.1), S eps = S(1e-5))
      : momentum_(momentum), eps_(eps) {
    gamma_ = Tensor<S>::full({channels}, S(1), true);
    beta_ = Tensor<S>::zeros({channels}, true);
    running_mean_ = Tensor<S>::zeros({channels});
    running_var_ = Tensor<S>::full({channels}, S(1));
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    return ops::batch_norm(x, gamma_, beta_, running_mean_, running_var_, ctx.mode, momentum_,
                           eps_);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    out.push_back({prefix + "gamma", gamma_, ParamKind::Param});
    out.push_back({prefix + "beta", beta_, ParamKind::Param});
    out.push_back({prefix + "running_mean", running_mean_, ParamKind::Buffer});
    out.push_back({prefix + "running_var", running_var_, ParamKind::Buffer});
  }

  Tensor<S>& gamma() { return gamma_; }
  Tensor<S>& beta() { return beta_; }

 private:
  Tensor<S> gamma_, beta_, running_mean_, running_var_;
  S momentum_, eps_;
};

template <typename S>
class Linear : public Module<S> {
 public:
  Linear(long in_dim, long out_dim, Rng& rng) {
    weight_ = Tensor<S>::zeros({in_dim, out_dim}, true);
    init::normal_(weight_, rng, std::sqrt(2.0 / static_cast<double>(in_dim)));
    bias_ = Tensor<S>::zeros({out_dim}, true);
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>&) override {
    return ops::linear(x, weight_, std::optional<Tensor<S>>(bias_));
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    out.push_back({prefix + "weight", weight_, ParamKind::Param});
    out.push_back({prefix + "bias", bias_, ParamKind::Param});
  }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }

 private:
  Tensor<S> weight_, bias_;
};

template <typename S>
class Dropout : public Module<S> {
 public:
  explicit Dropout(double p) : p_(p) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout p must lie in [0,1)");
  }
  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    return ops::dropout(x, p_, ctx.mode, ctx.rng);
  }
  void collect(const std::string&, std::vector<NamedParam<S>>&) const override {}

 private:
  double p_;
};

// conv -> BN -> optional ReLU, the workhorse of both backbones.
template <typename S>
class ConvBN : public Module<S> {
 public:
  ConvBN(long in_ch, long out_ch, long k, long stride, long pad, long groups, bool relu,
         Rng& rng)
      : conv_(in_ch, out_ch, k, stride, pad, groups, /*bias=*/false, rng),
        bn_(out_ch),
        relu_(relu) {}

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    Tensor<S> y = bn_.forward(conv_.forward(x, ctx), ctx);
    return relu_ ? ops::relu(y) : y;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    conv_.collect(prefix + "conv.", out);
    bn_.collect(prefix + "bn.", out);
  }

  Conv2d<S>& conv() { return conv_; }
  BatchNorm<S>& bn() { return bn_; }

 private:
  Conv2d<S> conv_;
  BatchNorm<S> bn_;
  bool relu_;
};

template <typename S>
class Sequential : public Module<S> {
 public:
  Sequential() = default;

  template <typename M, typename... Args>
  M& emplace(const std::string& name, Args&&... args) {
    auto m = std::make_shared<M>(std::forward<Args>(args)...);
    M& ref = *m;
    children_.push_back({name, std::move(m)});
    return ref;
  }

  void add(const std::string& name, std::shared_ptr<Module<S>> m) {
    children_.push_back({name, std::move(m)});
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    Tensor<S> y = x;
    for (auto& [name, m] : children_) y = m->forward(y, ctx);
    return y;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    for (const auto& [name, m] : children_) m->collect(prefix + name + ".", out);
  }

  std::size_t size() const { return children_.size(); }
  Module<S>& child(std::size_t i) { return *children_[i].second; }

 private:
  std::vector<std::pair<std::string, std::shared_ptr<Module<S>>>> children_;
};

// y = x + inner(x)
template <typename S>
class Residual : public Module<S> {
 public:
  explicit Residual(std::shared_ptr<Module<S>> inner) : inner_(std::move(inner)) {}

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    return ops::add(x, inner_->forward(x, ctx));
  }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    inner_->collect(prefix, out);
  }
  Module<S>& inner() { return *inner_; }

 private:
  std::shared_ptr<Module<S>> inner_;
};

}  // namespace ferlite
