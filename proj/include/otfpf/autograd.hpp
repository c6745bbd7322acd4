#pragma once

// Reverse-mode differentiation over a recorded sequence of tensor operations.

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>

#include "otfpf/tensor.hpp"

namespace otfpf {

/// A named learnable tensor plus its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = true;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = BasicTensor<T>(value.shape());
    } else {
      grad.fill(T{0});
    }
  }
};

/// Insertion-ordered collection of uniquely named parameters. References
/// returned by add() stay valid for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, BasicTensor<T> value, bool requires_grad = true) {
    if (index_.count(name)) {
      throw ConfigError("duplicate parameter name: " + name);
    }
    index_.emplace(name, params_.size());
    params_.push_back(Parameter<T>{std::move(name), std::move(value), {}, requires_grad});
    return params_.back();
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Total number of scalar parameters.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Graph;

/// Handle to a value recorded in a Graph.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed operations. Every op node keeps a forward
/// closure (used by replay) and a backward closure that pushes the node's
/// output gradient into its inputs. Confined to one thread.
template <typename T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;
  using ForwardFn = std::function<TensorT(const Graph&)>;
  using BackwardFn = std::function<void(Graph&, const TensorT&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf bound to a parameter; the same parameter maps to one node.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return {this, it->second};
    }
    Node n;
    n.op = "parameter";
    n.value = p.value;
    n.param = &p;
    n.requires_grad = p.requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(TensorT t) { return leaf(std::move(t), false); }

  /// Leaf whose gradient is tracked and readable via grad().
  Var<T> input(TensorT t) { return leaf(std::move(t), true); }

  Var<T> record(std::string_view op, std::vector<std::size_t> inputs, ForwardFn fwd,
                BackwardFn bwd) {
    Node n;
    n.op = std::string(op);
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw std::logic_error("graph: dangling input");
      n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = fwd(*this);
    n.forward = std::move(fwd);
    if (n.requires_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  const TensorT& value(const Var<T>& v) const { return value(check(v)); }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Mutable value of an input/constant leaf, for perturbation before replay().
  TensorT& leaf_value(const Var<T>& v) {
    auto& n = nodes_.at(check(v));
    if (!n.leaf || n.param) {
      throw std::logic_error("graph: only input/constant leaves are mutable");
    }
    return n.value;
  }

  /// Zero-initialized gradient buffer of node `id`, created on first use.
  TensorT& grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  void accumulate_grad(std::size_t id, const TensorT& g) {
    if (!nodes_.at(id).requires_grad) return;
    auto& buf = grad_buffer(id);
    if (g.shape() != buf.shape()) {
      throw ShapeError("graph: gradient shape " + to_string(g.shape()) +
                       " does not match value " + to_string(buf.shape()));
    }
    for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += g[i];
  }

  /// Gradient of a leaf after backward(); null if it received none.
  const TensorT* grad(const Var<T>& v) const {
    const auto& n = nodes_.at(check(v));
    return n.grad.empty() ? nullptr : &n.grad;
  }

  /// Propagates d(out)/d(.) through the record. `out` must be a scalar
  /// produced by this graph. Parameter gradients are added into
  /// Parameter::grad (scaled by `seed`), or into `sink` when given so that
  /// several graphs can run concurrently over one parameter store.
  using GradSink = std::unordered_map<const Parameter<T>*, TensorT>;
  void backward(const Var<T>& out, T seed = T{1}, GradSink* sink = nullptr) {
    const std::size_t root = check(out);
    if (nodes_[root].value.numel() != 1) {
      throw ShapeError("graph: backward needs a scalar output, got " +
                       to_string(nodes_[root].value.shape()));
    }
    if (!nodes_[root].requires_grad) {
      throw std::logic_error("graph: output does not depend on any tracked leaf");
    }
    for (auto& n : nodes_) n.grad = TensorT();
    grad_buffer(root)[0] = seed;
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.leaf) {
        if (n.param && sink) {
          auto& pg = (*sink)[n.param];
          if (pg.empty()) pg = TensorT(n.param->value.shape());
          for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
        } else if (n.param) {
          auto& pg = n.param->grad;
          if (pg.shape() != n.param->value.shape()) n.param->zero_grad();
          for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
        }
        continue;
      }
      if (n.backward) {
        // backward may append to other nodes' grads but never to its own.
        TensorT g = std::move(n.grad);
        n.grad = TensorT();
        n.backward(*this, g);
      }
    }
  }

  /// Re-executes every recorded forward closure in order, re-reading
  /// parameter values. Ops with data-dependent control flow (Sinkhorn
  /// iteration counts) reuse the decisions made at record time.
  void replay() {
    for (auto& n : nodes_) {
      if (n.leaf) {
        if (n.param) n.value = n.param->value;
        continue;
      }
      n.value = n.forward(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    std::string op;
    TensorT value;
    TensorT grad;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    bool leaf = false;
  };

  Var<T> leaf(TensorT t, bool requires_grad) {
    Node n;
    n.op = requires_grad ? "input" : "constant";
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::size_t check(const Var<T>& v) const {
    if (!v.valid() || &v.graph() != this || v.id() >= nodes_.size()) {
      throw std::logic_error("graph: value was not recorded by this graph");
    }
    return v.id();
  }

  std::vector<Node> nodes_;
  std::map<const Parameter<T>*, std::size_t> param_nodes_;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  if (!graph_) throw std::logic_error("var: not bound to a graph");
  return graph_->value(*this);
}

}  // namespace otfpf
