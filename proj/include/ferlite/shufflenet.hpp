#pragma once

#include "ferlite/layers.hpp"

#include <memory>

// ShuffleNet V2 feature extractor (1.0x width): stem conv, three shuffle
// stages, a 1x1 expansion conv and global average pooling. No classifier
// head; the output is the pooled feature vector.

namespace ferlite {

struct ShuffleNetConfig {
  std::vector<long> stage_repeats{4, 8, 4};
  std::vector<long> stage_out_channels{24, 116, 232, 464, 1024};
  long feature_dim() const { return stage_out_channels.back(); }

  void validate() const {
    if (stage_repeats.size() != 3 || stage_out_channels.size() != 5)
      throw ConfigError("shufflenet: want 3 stage repeats and 5 channel counts");
    for (std::size_t i = 1; i < 4; ++i)
      if (stage_out_channels[i] % 2 != 0)
        throw ConfigError("shufflenet: stage output channels must be even, got " +
                          std::to_string(stage_out_channels[i]));
  }
};

// Shape-preserving unit: channel split, one branch passes through, the other
// runs 1x1 -> depthwise 3x3 -> 1x1, then concat and shuffle(2).
template <typename S>
class ShuffleBasicUnit : public Module<S> {
 public:
  ShuffleBasicUnit(long channels, Rng& rng) : half_(channels / 2) {
    if (channels % 2 != 0)
      throw ConfigError("shuffle unit needs an even channel count for the split");
    branch_ = std::make_shared<Sequential<S>>();
    branch_->template emplace<ConvBN<S>>("0", half_, half_, 1, 1, 0, 1, true, rng);
    branch_->template emplace<ConvBN<S>>("1", half_, half_, 3, 1, 1, half_, false, rng);
    branch_->template emplace<ConvBN<S>>("2", half_, half_, 1, 1, 0, 1, true, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    Tensor<S> keep = ops::slice_channels(x, 0, half_);
    Tensor<S> work = ops::slice_channels(x, half_, 2 * half_);
    Tensor<S> y = ops::concat_channels(keep, branch_->forward(work, ctx));
    return ops::channel_shuffle(y, 2);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    branch_->collect(prefix + "branch.", out);
  }

 private:
  long half_;
  std::shared_ptr<Sequential<S>> branch_;
};

// Spatial downsampling unit: both branches are strided, concat doubles the
// channel count to the stage width, then shuffle(2).
template <typename S>
class ShuffleDownUnit : public Module<S> {
 public:
  ShuffleDownUnit(long in_ch, long out_ch, Rng& rng) {
    if (out_ch % 2 != 0) throw ConfigError("shuffle downsample output channels must be even");
    const long half = out_ch / 2;
    branch1_ = std::make_shared<Sequential<S>>();
    branch1_->template emplace<ConvBN<S>>("0", in_ch, in_ch, 3, 2, 1, in_ch, false, rng);
    branch1_->template emplace<ConvBN<S>>("1", in_ch, half, 1, 1, 0, 1, true, rng);
    branch2_ = std::make_shared<Sequential<S>>();
    branch2_->template emplace<ConvBN<S>>("0", in_ch, half, 1, 1, 0, 1, true, rng);
    branch2_->template emplace<ConvBN<S>>("1", half, half, 3, 2, 1, half, false, rng);
    branch2_->template emplace<ConvBN<S>>("2", half, half, 1, 1, 0, 1, true, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    Tensor<S> y =
        ops::concat_channels(branch1_->forward(x, ctx), branch2_->forward(x, ctx));
    return ops::channel_shuffle(y, 2);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    branch1_->collect(prefix + "branch1.", out);
    branch2_->collect(prefix + "branch2.", out);
  }

 private:
  std::shared_ptr<Sequential<S>> branch1_, branch2_;
};

template <typename S>
class ShuffleNetV2 : public Module<S> {
 public:
  explicit ShuffleNetV2(const ShuffleNetConfig& config, Rng& rng) : config_(config) {
    config.validate();
    const auto& ch = config.stage_out_channels;
    stem_ = std::make_shared<ConvBN<S>>(3, ch[0], 3, 2, 1, 1, true, rng);
    long in_ch = ch[0];
    for (std::size_t s = 0; s < 3; ++s) {
      auto stage = std::make_shared<Sequential<S>>();
      const long out_ch = ch[s + 1];
      stage->template emplace<ShuffleDownUnit<S>>("0", in_ch, out_ch, rng);
      for (long r = 1; r < config.stage_repeats[s]; ++r)
        stage->template emplace<ShuffleBasicUnit<S>>(std::to_string(r), out_ch, rng);
      stages_.push_back(stage);
      in_ch = out_ch;
    }
    conv5_ = std::make_shared<ConvBN<S>>(in_ch, ch[4], 1, 1, 0, 1, true, rng);
  }

  // (N,3,224,224) -> (N, feature_dim)
  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != 224 || x.dim(3) != 224)
      throw DimError("shufflenet: expected (N,3,224,224) input, got " + shape_str(x.shape()));
    Tensor<S> y = stem_->forward(x, ctx);
    y = ops::max_pool2d(y, 3, 2, 1);
    for (auto& stage : stages_) y = stage->forward(y, ctx);
    y = conv5_->forward(y, ctx);
    return ops::global_avg_pool(y);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    stem_->collect(prefix + "stem.", out);
    for (std::size_t s = 0; s < stages_.size(); ++s)
      stages_[s]->collect(prefix + "stage" + std::to_string(s + 2) + ".", out);
    conv5_->collect(prefix + "conv5.", out);
  }

  const ShuffleNetConfig& config() const { return config_; }
  ConvBN<S>& stem() { return *stem_; }
  Sequential<S>& stage(std::size_t i) { return *stages_[i]; }
  ConvBN<S>& conv5() { return *conv5_; }

 private:
  ShuffleNetConfig config_;
  std::shared_ptr<ConvBN<S>> stem_;
  std::vector<std::shared_ptr<Sequential<S>>> stages_;
  std::shared_ptr<ConvBN<S>> conv5_;
};

template <typename S>
std::shared_ptr<ShuffleNetV2<S>> build_shufflenet(const ShuffleNetConfig& config,
                                                  std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {0x5348554646u});  // independent init stream per backbone
  return std::make_shared<ShuffleNetV2<S>>(config, rng);
}

}  // namespace ferlite
