#pragma once

// Reverse-mode tape over flat Eigen buffers. Every kernel appends one node
// holding its value and a closure that pushes the node's gradient back to its
// inputs. Scalar is double for gradient checks and float for training.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "cdua/errors.hpp"

namespace cdua::dg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s);

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Value with shape and an optional gradient of the same size.
template <typename Scalar>
struct NdValue {
  Shape shape;
  Vec<Scalar> data;
  Vec<Scalar> grad;  // empty when absent

  NdValue() = default;
  NdValue(Shape s, Vec<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) fail(ErrorKind::validation, "NdValue: size does not match shape");
  }
  static NdValue zeros(Shape s) {
    const Index n = numel(s);
    return NdValue(std::move(s), Vec<Scalar>::Zero(n));
  }
};

/// Trainable tensor with Adam moments.
template <typename Scalar>
struct Parameter {
  std::string name;
  NdValue<Scalar> value;
  Vec<Scalar> m, v;

  const Shape& shape() const { return value.shape; }
  Index size() const { return value.data.size(); }
};

/// Named parameters in registration order. Addresses of parameters are stable.
template <typename Scalar>
class ParamStore {
 public:
  using scalar_type = Scalar;
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<Scalar>& add(const std::string& name, Shape shape, Vec<Scalar> init) {
    if (index_.count(name)) fail(ErrorKind::validation, "duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<Scalar>>();
    p->name = name;
    p->value = NdValue<Scalar>(std::move(shape), std::move(init));
    p->value.grad = Vec<Scalar>::Zero(p->size());
    p->m = Vec<Scalar>::Zero(p->size());
    p->v = Vec<Scalar>::Zero(p->size());
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<Scalar>& operator[](const std::string& name) { return *params_.at(lookup(name)); }
  const Parameter<Scalar>& operator[](const std::string& name) const { return *params_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& at(std::size_t i) { return *params_[i]; }
  const Parameter<Scalar>& at(std::size_t i) const { return *params_[i]; }

  /// Total number of scalar parameters.
  Index scalar_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->value.grad.setZero();
  }

  std::int64_t step = 0;  // optimizer steps taken

 private:
  std::size_t lookup(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::validation, "unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Handle to a tape node.
struct Var {
  int id = -1;
};

template <typename Scalar>
class Tape {
 public:
  using VecT = Vec<Scalar>;
  using Backward = std::function<void(Tape&, Var self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Data that never receives a gradient.
  Var constant(Shape shape, VecT value) { return leaf(std::move(shape), std::move(value), false); }

  /// Leaf that collects a gradient readable through grad().
  Var input(Shape shape, VecT value) { return leaf(std::move(shape), std::move(value), grad_enabled_); }

  /// Leaf bound to a parameter; backward() adds its gradient into the parameter.
  Var param(Parameter<Scalar>& p) {
    const Var v = leaf(p.value.shape, p.value.data, grad_enabled_);
    if (grad_enabled_) bindings_.push_back({v.id, &p});
    return v;
  }

  /// Appends a computed node. `fn(tape, self)` runs during backward() once the
  /// node's gradient is complete; it is dropped when no input needs a gradient.
  Var push(Shape shape, VecT value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
    }
    if (value.size() != numel(shape)) {
      fail(ErrorKind::validation, "tape: node value size does not match shape " + shape_string(shape));
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  const Shape& shape(Var v) const { return node(v).shape; }
  const VecT& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  VecT& grad(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = VecT::Zero(n.value.size());
    return n.grad;
  }
  bool has_grad(Var v) const { return node(v).grad.size() != 0; }

  /// Back-propagates from `root`, seeding its gradient with `seed` (all ones
  /// when empty), then accumulates parameter gradients.
  void backward(Var root, const VecT& seed = VecT()) {
    if (!grad_enabled_) fail(ErrorKind::validation, "backward on a tape without gradients");
    auto& g = grad(root);
    if (seed.size() == 0) {
      g.setOnes();
    } else {
      if (seed.size() != g.size()) fail(ErrorKind::validation, "backward: seed size mismatch");
      g += seed;
    }
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, Var{i});
    }
    for (const auto& b : bindings_) {
      const auto& n = nodes_[static_cast<std::size_t>(b.node)];
      if (n.grad.size() != 0) b.param->value.grad += n.grad;
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    VecT value;
    VecT grad;
    bool requires_grad = false;
    Backward backward;
  };
  struct Binding {
    int node;
    Parameter<Scalar>* param;
  };

  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }

  Var leaf(Shape shape, VecT value, bool requires_grad) {
    if (value.size() != numel(shape)) {
      fail(ErrorKind::validation, "tape: leaf size does not match shape " + shape_string(shape));
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
};

inline std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace cdua::dg
