#pragma once

#include "ferlite/tensor.hpp"

#include <string>
#include <vector>

namespace ferlite {

// Bias-corrected Adam. A step with an absent/zero gradient still advances t
// and decays (m, v); parameters only move where moments are nonzero.
template <typename S>
class Adam {
 public:
  struct Entry {
    std::string name;
    Tensor<S> param;
    VecX<S> m, v;
  };

  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0) throw ConfigError("adam: learning rate must be positive");
  }

  void attach(const std::string& name, Tensor<S> param) {
    Entry e;
    e.name = name;
    e.param = std::move(param);
    e.m = VecX<S>::Zero(e.param.size());
    e.v = VecX<S>::Zero(e.param.size());
    entries_.push_back(std::move(e));
  }

  long step_count() const { return t_; }
  void set_step(long t) { t_ = t; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void step() {
    ++t_;
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S bc1 = static_cast<S>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const S bc2 = static_cast<S>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    for (auto& e : entries_) {
      if (e.param.has_grad()) {
        const VecX<S>& g = e.param.grad();
        if (!g.allFinite())
          throw StateError("adam: non-finite gradient for " + e.name + " at step " +
                           std::to_string(t_));
        e.m = b1 * e.m + (S(1) - b1) * g;
        e.v = b2 * e.v + (S(1) - b2) * g.cwiseProduct(g);
      } else {
        e.m *= b1;
        e.v *= b2;
      }
      VecX<S> m_hat = e.m / bc1;
      VecX<S> v_hat = e.v / bc2;
      e.param.value().array() -=
          static_cast<S>(lr_) * m_hat.array() / (v_hat.array().sqrt() + static_cast<S>(eps_));
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.param.zero_grad();
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Entry> entries_;
};

}  // namespace ferlite
