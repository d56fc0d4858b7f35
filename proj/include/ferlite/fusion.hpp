#pragma once

#include "ferlite/efficientvit.hpp"
#include "ferlite/shufflenet.hpp"

#include <memory>

// Feature fusion and the classifier head: backbone outputs are concatenated
// (CNN features first) and classified by FC-BN-ReLU-Dropout x2 -> FC.

namespace ferlite {

struct ClassifierConfig {
  long in_dim = 1216;  // 1024 + 192
  std::vector<long> hidden{384, 128};
  std::vector<double> dropout{0.5, 0.5};
  long num_classes = 6;

  void validate() const {
    if (hidden.size() != 2 || dropout.size() != 2)
      throw ConfigError("classifier: want two hidden dims and two dropout rates");
    if (num_classes < 2) throw ConfigError("classifier: need at least two classes");
  }
};

// Ordered concatenation Z = (X | Y), X first.
template <typename S>
Tensor<S> fuse(const Tensor<S>& x, const Tensor<S>& y) {
  if (x.rank() != 2 || y.rank() != 2) throw DimError("fuse: feature matrices must be (N,D)");
  return ops::concat_channels(x, y);
}

template <typename S>
class Classifier : public Module<S> {
 public:
  Classifier(const ClassifierConfig& config, Rng& rng) : config_(config) {
    config.validate();
    seq_ = std::make_shared<Sequential<S>>();
    seq_->template emplace<Linear<S>>("fc1", config.in_dim, config.hidden[0], rng);
    seq_->template emplace<BatchNorm<S>>("bn1", config.hidden[0]);
    seq_->template emplace<Dropout<S>>("drop1", config.dropout[0]);
    seq_->template emplace<Linear<S>>("fc2", config.hidden[0], config.hidden[1], rng);
    seq_->template emplace<BatchNorm<S>>("bn2", config.hidden[1]);
    seq_->template emplace<Dropout<S>>("drop2", config.dropout[1]);
    seq_->template emplace<Linear<S>>("fc3", config.hidden[1], config.num_classes, rng);
  }

  Tensor<S> forward(const Tensor<S>& z, Ctx<S>& ctx) override {
    if (z.rank() != 2 || z.dim(1) != config_.in_dim)
      throw DimError("classifier: expected (N," + std::to_string(config_.in_dim) +
                     ") features, got " + shape_str(z.shape()));
    Tensor<S> y = z;
    for (std::size_t i = 0; i < seq_->size(); ++i) {
      y = seq_->child(i).forward(y, ctx);
      if (i == 1 || i == 4) y = ops::relu(y);
    }
    return y;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    seq_->collect(prefix, out);
  }

  const ClassifierConfig& config() const { return config_; }

 private:
  ClassifierConfig config_;
  std::shared_ptr<Sequential<S>> seq_;
};

struct FusedModelConfig {
  ShuffleNetConfig shufflenet{};
  EfficientViTConfig efficientvit{};
  long num_classes = 6;
  std::vector<long> classifier_hidden{384, 128};
  std::vector<double> classifier_dropout{0.5, 0.5};

  ClassifierConfig classifier() const {
    ClassifierConfig c;
    c.in_dim = shufflenet.feature_dim() + efficientvit.feature_dim();
    c.hidden = classifier_hidden;
    c.dropout = classifier_dropout;
    c.num_classes = num_classes;
    return c;
  }
};

template <typename S>
class FusedModel : public Module<S> {
 public:
  FusedModel(const FusedModelConfig& config, std::uint64_t seed) : config_(config) {
    shufflenet_ = build_shufflenet<S>(config.shufflenet, seed);
    efficientvit_ = build_efficientvit<S>(config.efficientvit, seed);
    Rng rng = Rng::derive(seed, {0x434c53u});
    classifier_ = std::make_shared<Classifier<S>>(config.classifier(), rng);
  }

  Tensor<S> forward(const Tensor<S>& images, Ctx<S>& ctx) override {
    Tensor<S> x = shufflenet_->forward(images, ctx);
    Tensor<S> y = efficientvit_->forward(images, ctx);
    return classifier_->forward(fuse(x, y), ctx);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) const override {
    shufflenet_->collect(prefix + "shufflenet.", out);
    efficientvit_->collect(prefix + "efficientvit.", out);
    classifier_->collect(prefix + "classifier.", out);
  }

  ShuffleNetV2<S>& shufflenet() { return *shufflenet_; }
  EfficientViT<S>& efficientvit() { return *efficientvit_; }
  Classifier<S>& classifier() { return *classifier_; }
  const FusedModelConfig& config() const { return config_; }

  void freeze_backbones() {
    set_trainable(*shufflenet_, false);
    set_trainable(*efficientvit_, false);
  }

 private:
  FusedModelConfig config_;
  std::shared_ptr<ShuffleNetV2<S>> shufflenet_;
  std::shared_ptr<EfficientViT<S>> efficientvit_;
  std::shared_ptr<Classifier<S>> classifier_;
};

}  // namespace ferlite
