#pragma once

#include "ferlite/layers.hpp"

#include <cmath>
#include <memory>

// EfficientViT-style feature extractor: a 16x-downsampling convolutional
// patch embedding, three stages of sandwich blocks (depthwise token mixer +
// FFN around cascaded group attention) with patch-merging downsamples in
// between, then global pooling and a final feature norm.

namespace ferlite {

struct EfficientViTConfig {
  std::vector<long> embed_dims{64, 128, 192};
  std::vector<long> depths{1, 2, 3};
  std::vector<long> heads{4, 4, 4};
  long key_dim = 16;
  long ffn_ratio = 5;        // blocks
  long ds_ffn_ratio = 2;     // downsample sandwiches
  long merge_hidden_mult = 6;
  bool attention_bias = true;
  long feature_dim() const { return embed_dims.back(); }

  void validate() const {
    if (embed_dims.size() != 3 || depths.size() != 3 || heads.size() != 3)
      throw ConfigError("efficientvit: want 3 stages of dims/depths/heads");
    for (std::size_t i = 0; i < 3; ++i)
      if (embed_dims[i] % heads[i] != 0)
        throw ConfigError("efficientvit: embed dim " + std::to_string(embed_dims[i]) +
                          " not divisible by " + std::to_string(heads[i]) + " heads");
  }
};

// Multi-head attention over spatial tokens where each head reads one channel
// group and the output of head i is added to head i+1's input. Per-head
// attention logits optionally carry a learned (T x T) position bias.
template <typename S>
class CascadedGroupAttention : public Module<S> {
 public:
  CascadedGroupAttention(long dim, long heads, long key_dim, long tokens, bool use_bias,
                         Rng& rng)
      : dim_(dim), heads_(heads), key_dim_(key_dim), tokens_(tokens), use_bias_(use_bias) {
    if (dim % heads != 0)
      throw ConfigError("cascaded attention: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    head_dim_ = dim / heads;
    for (long h = 0; h < heads; ++h) {
      qkv_.push_back(std::make_shared<ConvBN<S>>(head_dim_, 2 * key_dim + head_dim_, 1, 1, 0, 1,
                                                 false, rng));
      bias_tables_.push_back(Tensor<S>::zeros({tokens, tokens}, true));
    }
    proj_ = std::make_shared<ConvBN<S>>(dim, dim, 1, 1, 0, 1, false, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    return forward_heads(x, ctx, nullptr);
  }

  // `head_outs`, when given, receives each head's pre-projection output.
  Tensor<S> forward_heads(const Tensor<S>& x, Ctx<S>& ctx,
                          std::vector<Tensor<S>>* head_outs) {
    if (x.rank() != 4 || x.dim(1) != dim_)
      throw DimError("cascaded attention: expected (N," + std::to_string(dim_) + ",H,W)");
    const long N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const long T = H * W;
    if (use_bias_ && T != tokens_)
      throw DimError("cascaded attention: bias table built for " + std::to_string(tokens_) +
                     " tokens, got " + std::to_string(T));
    const S inv_sqrt_dk = S(1) / static_cast<S>(std::sqrt(static_cast<double>(key_dim_)));
    Tensor<S> cat;
    Tensor<S> prev;
    for (long h = 0; h < heads_; ++h) {
      Tensor<S> xi = ops::slice_channels(x, h * head_dim_, (h + 1) * head_dim_);
      if (h > 0) xi = ops::add(xi, prev);
      Tensor<S> qkv = qkv_[h]->forward(xi, ctx);
      Tensor<S> q = ops::reshape(ops::slice_channels(qkv, 0, key_dim_), {N, key_dim_, T});
      Tensor<S> k =
          ops::reshape(ops::slice_channels(qkv, key_dim_, 2 * key_dim_), {N, key_dim_, T});
      Tensor<S> v = ops::reshape(
          ops::slice_channels(qkv, 2 * key_dim_, 2 * key_dim_ + head_dim_), {N, head_dim_, T});
      Tensor<S> attn = ops::scale(ops::batched_matmul(q, k, true, false), inv_sqrt_dk);
      if (use_bias_) attn = ops::add_rank2_bias(attn, bias_tables_[h]);
      attn = ops::softmax_lastdim(attn);
      Tensor<S> out = ops::reshape(ops::batched_matmul(v, attn, false, true), {N, head_dim_, H, W});
      if (head_outs) head_outs->push_back(out);
      prev = out;
      cat = (h == 0) ? out : ops::concat_channels(cat, out);
    }
    return proj_->forward(ops::relu(cat), ctx);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    for (long h = 0; h < heads_; ++h) {
      qkv_[h]->collect(prefix + "head" + std::to_string(h) + ".qkv.", out);
      if (use_bias_)
        out.push_back({prefix + "head" + std::to_string(h) + ".attn_bias", bias_tables_[h],
                       ParamKind::Param});
    }
    proj_->collect(prefix + "proj.", out);
  }

  ConvBN<S>& qkv(long h) { return *qkv_[h]; }
  ConvBN<S>& proj() { return *proj_; }
  long value_dim() const { return head_dim_; }
  long key_dim() const { return key_dim_; }
  bool bias_enabled() const { return use_bias_; }

 private:
  long dim_, heads_, key_dim_, tokens_, head_dim_;
  bool use_bias_;
  std::vector<std::shared_ptr<ConvBN<S>>> qkv_;
  std::vector<Tensor<S>> bias_tables_;
  std::shared_ptr<ConvBN<S>> proj_;
};

// 1x1 expand -> ReLU -> 1x1 reduce, both with BN.
template <typename S>
class FeedForward : public Module<S> {
 public:
  FeedForward(long dim, long hidden, Rng& rng)
      : expand_(dim, hidden, 1, 1, 0, 1, true, rng),
        reduce_(hidden, dim, 1, 1, 0, 1, false, rng) {}

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    return reduce_.forward(expand_.forward(x, ctx), ctx);
  }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    expand_.collect(prefix + "expand.", out);
    reduce_.collect(prefix + "reduce.", out);
  }
  ConvBN<S>& expand() { return expand_; }
  ConvBN<S>& reduce() { return reduce_; }

 private:
  ConvBN<S> expand_, reduce_;
};

// DW+FFN, attention, DW+FFN, every sub-layer wrapped in a residual.
template <typename S>
class SandwichBlock : public Module<S> {
 public:
  SandwichBlock(long dim, long heads, long key_dim, long tokens, long ffn_ratio, bool use_bias,
                Rng& rng) {
    seq_ = std::make_shared<Sequential<S>>();
    seq_->add("mix0", std::make_shared<Residual<S>>(
                          std::make_shared<ConvBN<S>>(dim, dim, 3, 1, 1, dim, false, rng)));
    seq_->add("ffn0", std::make_shared<Residual<S>>(
                          std::make_shared<FeedForward<S>>(dim, dim * ffn_ratio, rng)));
    attn_ = std::make_shared<CascadedGroupAttention<S>>(dim, heads, key_dim, tokens, use_bias,
                                                        rng);
    seq_->add("attn", std::make_shared<Residual<S>>(attn_));
    seq_->add("mix1", std::make_shared<Residual<S>>(
                          std::make_shared<ConvBN<S>>(dim, dim, 3, 1, 1, dim, false, rng)));
    seq_->add("ffn1", std::make_shared<Residual<S>>(
                          std::make_shared<FeedForward<S>>(dim, dim * ffn_ratio, rng)));
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override { return seq_->forward(x, ctx); }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    seq_->collect(prefix, out);
  }

  CascadedGroupAttention<S>& attention() { return *attn_; }
  Sequential<S>& layers() { return *seq_; }

 private:
  std::shared_ptr<Sequential<S>> seq_;
  std::shared_ptr<CascadedGroupAttention<S>> attn_;
};

// Halves the resolution and widens channels through an inverted bottleneck,
// with DW+FFN sandwiches on both sides.
template <typename S>
class PatchMergeBlock : public Module<S> {
 public:
  PatchMergeBlock(long in_dim, long out_dim, long hidden_mult, long ffn_ratio, Rng& rng) {
    const long hidden = in_dim * hidden_mult;
    seq_ = std::make_shared<Sequential<S>>();
    seq_->add("mix0", std::make_shared<Residual<S>>(
                          std::make_shared<ConvBN<S>>(in_dim, in_dim, 3, 1, 1, in_dim, false, rng)));
    seq_->add("ffn0", std::make_shared<Residual<S>>(
                          std::make_shared<FeedForward<S>>(in_dim, in_dim * ffn_ratio, rng)));
    seq_->template emplace<ConvBN<S>>("expand", in_dim, hidden, 1, 1, 0, 1, true, rng);
    seq_->template emplace<ConvBN<S>>("dw", hidden, hidden, 3, 2, 1, hidden, true, rng);
    seq_->template emplace<ConvBN<S>>("reduce", hidden, out_dim, 1, 1, 0, 1, false, rng);
    seq_->add("mix1", std::make_shared<Residual<S>>(std::make_shared<ConvBN<S>>(
                          out_dim, out_dim, 3, 1, 1, out_dim, false, rng)));
    seq_->add("ffn1", std::make_shared<Residual<S>>(
                          std::make_shared<FeedForward<S>>(out_dim, out_dim * ffn_ratio, rng)));
  }

  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override { return seq_->forward(x, ctx); }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    seq_->collect(prefix, out);
  }

 private:
  std::shared_ptr<Sequential<S>> seq_;
};

template <typename S>
class EfficientViT : public Module<S> {
 public:
  explicit EfficientViT(const EfficientViTConfig& config, Rng& rng) : config_(config) {
    config.validate();
    patch_embed_ = std::make_shared<Sequential<S>>();
    const long d0 = config.embed_dims[0];
    patch_embed_->template emplace<ConvBN<S>>("0", 3, d0 / 8, 3, 2, 1, 1, true, rng);
    patch_embed_->template emplace<ConvBN<S>>("1", d0 / 8, d0 / 4, 3, 2, 1, 1, true, rng);
    patch_embed_->template emplace<ConvBN<S>>("2", d0 / 4, d0 / 2, 3, 2, 1, 1, true, rng);
    patch_embed_->template emplace<ConvBN<S>>("3", d0 / 2, d0, 3, 2, 1, 1, false, rng);
    long res = 14;  // 224 / 16
    for (std::size_t s = 0; s < 3; ++s) {
      auto stage = std::make_shared<Sequential<S>>();
      for (long d = 0; d < config.depths[s]; ++d)
        stage->template emplace<SandwichBlock<S>>(
            std::to_string(d), config.embed_dims[s], config.heads[s], config.key_dim, res * res,
            config.ffn_ratio, config.attention_bias, rng);
      stages_.push_back(stage);
      if (s < 2) {
        merges_.push_back(std::make_shared<PatchMergeBlock<S>>(
            config.embed_dims[s], config.embed_dims[s + 1], config.merge_hidden_mult,
            config.ds_ffn_ratio, rng));
        res = (res + 2 - 3) / 2 + 1;  // stride-2 dw conv with k=3, p=1
      }
    }
    final_norm_ = std::make_shared<BatchNorm<S>>(config.feature_dim());
  }

  // (N,3,224,224) -> (N, feature_dim)
  Tensor<S> forward(const Tensor<S>& x, Ctx<S>& ctx) override {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != 224 || x.dim(3) != 224)
      throw DimError("efficientvit: expected (N,3,224,224) input, got " + shape_str(x.shape()));
    Tensor<S> y = patch_embed_->forward(x, ctx);
    for (std::size_t s = 0; s < 3; ++s) {
      y = stages_[s]->forward(y, ctx);
      if (s < 2) y = merges_[s]->forward(y, ctx);
    }
    return final_norm_->forward(ops::global_avg_pool(y), ctx);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    patch_embed_->collect(prefix + "patch_embed.", out);
    for (std::size_t s = 0; s < 3; ++s) {
      stages_[s]->collect(prefix + "stage" + std::to_string(s + 1) + ".", out);
      if (s < 2) merges_[s]->collect(prefix + "merge" + std::to_string(s + 1) + ".", out);
    }
    final_norm_->collect(prefix + "final_norm.", out);
  }

  const EfficientViTConfig& config() const { return config_; }
  Sequential<S>& patch_embed() { return *patch_embed_; }
  SandwichBlock<S>& block(std::size_t stage, std::size_t i) {
    return static_cast<SandwichBlock<S>&>(stages_[stage]->child(i));
  }

 private:
  EfficientViTConfig config_;
  std::shared_ptr<Sequential<S>> patch_embed_;
  std::vector<std::shared_ptr<Sequential<S>>> stages_;
  std::vector<std::shared_ptr<PatchMergeBlock<S>>> merges_;
  std::shared_ptr<BatchNorm<S>> final_norm_;
};

template <typename S>
std::shared_ptr<EfficientViT<S>> build_efficientvit(const EfficientViTConfig& config,
                                                    std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {0x45564954u});
  return std::make_shared<EfficientViT<S>>(config, rng);
}

}  // namespace ferlite
