#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ferlite {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Mode { Train, Eval };

namespace detail {
inline std::atomic<std::int64_t>& node_counter() {
  static std::atomic<std::int64_t> c{0};
  return c;
}
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Scoped guard disabling tape recording (inference / profiling).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatX<S>>;
template <typename S>
using MapConstMat = Eigen::Map<const MatX<S>>;
template <typename S>
using MapVec = Eigen::Map<VecX<S>>;
template <typename S>
using MapConstVec = Eigen::Map<const VecX<S>>;

template <typename S>
struct Node {
  Shape shape;
  VecX<S> value;
  VecX<S> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::int64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Node() : id(detail::node_counter().fetch_add(1, std::memory_order_relaxed)) {}

  bool has_grad() const { return grad.size() == value.size() && value.size() > 0; }
  void ensure_grad() {
    if (!has_grad()) grad = VecX<S>::Zero(value.size());
  }
};

// Value-semantics handle to a tape node. Copies share the node, matching how
// op outputs flow through the graph.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->shape = shape;
    n->value = VecX<S>::Zero(numel(shape));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(const Shape& shape, S v, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    t.node_->value.setConstant(v);
    return t;
  }

  static Tensor from_values(const Shape& shape, std::initializer_list<S> vals,
                            bool requires_grad = false) {
    if (static_cast<long>(vals.size()) != numel(shape))
      throw DimError("from_values: " + std::to_string(vals.size()) + " values for shape " +
                     shape_str(shape));
    Tensor t = zeros(shape, requires_grad);
    long i = 0;
    for (S v : vals) t.node_->value[i++] = v;
    return t;
  }

  static Tensor from_vector(const Shape& shape, const std::vector<S>& vals,
                            bool requires_grad = false) {
    if (static_cast<long>(vals.size()) != numel(shape))
      throw DimError("from_vector: size mismatch for shape " + shape_str(shape));
    Tensor t = zeros(shape, requires_grad);
    for (long i = 0; i < static_cast<long>(vals.size()); ++i) t.node_->value[i] = vals[i];
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  long dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long size() const { return node_->value.size(); }

  VecX<S>& value() { return node_->value; }
  const VecX<S>& value() const { return node_->value; }
  VecX<S>& grad() { return node_->grad; }
  const VecX<S>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }

  S item() const {
    if (size() != 1) throw DimError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  void zero_grad() { node_->grad.resize(0); }

  bool all_finite() const {
    return node_->value.allFinite();
  }

  std::shared_ptr<Node<S>> node() const { return node_; }

  // Reverse pass from this (scalar) tensor. Node ids increase monotonically
  // as the forward graph is built, so descending id order is a valid reverse
  // topological order of the reachable subgraph.
  void backward() const {
    if (!node_) throw StateError("backward on undefined tensor");
    if (size() != 1) throw DimError("backward requires a scalar loss");
    if (!node_->backward_fn && node_->parents.empty() && !node_->requires_grad)
      throw StateError("backward before forward: loss is not part of a recorded graph");
    std::vector<std::shared_ptr<Node<S>>> order;
    collect(node_, order);
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
    node_->ensure_grad();
    node_->grad.setConstant(S(1));
    for (auto& n : order) {
      if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
  }

 private:
  static void collect(const std::shared_ptr<Node<S>>& root,
                      std::vector<std::shared_ptr<Node<S>>>& out) {
    std::vector<std::shared_ptr<Node<S>>> stack{root};
    std::vector<const Node<S>*> seen;
    auto visited = [&](const Node<S>* p) {
      for (auto* q : seen)
        if (q == p) return true;
      return false;
    };
    // small graphs use linear probe; big graphs switch to a hash set
    std::unordered_set<const Node<S>*> big;
    bool use_big = false;
    while (!stack.empty()) {
      auto n = stack.back();
      stack.pop_back();
      if (!use_big && seen.size() > 64) {
        big.insert(seen.begin(), seen.end());
        use_big = true;
      }
      bool dup = use_big ? !big.insert(n.get()).second : visited(n.get());
      if (dup) continue;
      if (!use_big) seen.push_back(n.get());
      out.push_back(n);
      for (auto& p : n->parents) stack.push_back(p);
    }
  }

  std::shared_ptr<Node<S>> node_;
};

// Helper for op implementations: wire a fresh output node to its parents.
template <typename S>
Tensor<S> make_op_output(const Shape& shape, std::vector<Tensor<S>> inputs,
                         std::function<void(Node<S>&)> backward_fn) {
  auto n = std::make_shared<Node<S>>();
  n->shape = shape;
  n->value.resize(numel(shape));
  bool needs = false;
  for (auto& t : inputs) needs = needs || t.requires_grad();
  if (grad_enabled() && needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(n));
}

template <typename S>
void accumulate_grad(Node<S>& parent, const VecX<S>& g) {
  parent.ensure_grad();
  parent.grad += g;
}

}  // namespace ferlite
