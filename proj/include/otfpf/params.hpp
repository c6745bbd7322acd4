#pragma once

// Named parameter registration (with initialisers) and lookup during
// forward passes.

#include <cmath>
#include <random>
#include <string>
#include <string_view>

#include "otfpf/autograd.hpp"

namespace otfpf {

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one shared generator so that construction order fixes the values.
template <typename T>
class Initializer {
 public:
  Initializer(ParameterStore<T>& store, std::mt19937_64& rng, std::string prefix = "")
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  Initializer sub(std::string_view name) const {
    return Initializer(*store_, *rng_, prefix_ + std::string(name) + ".");
  }

  /// Normal(0, std) truncated to +-2 std by redrawing.
  Parameter<T>& trunc_normal(std::string_view name, Shape shape, double std = 0.02) {
    std::normal_distribution<double> nd(0.0, std);
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.storage()) {
      double d;
      do {
        d = nd(*rng_);
      } while (std::abs(d) > 2.0 * std);
      v = static_cast<T>(d);
    }
    return store_->add(prefix_ + std::string(name), std::move(t));
  }

  Parameter<T>& constant(std::string_view name, Shape shape, double value) {
    return store_->add(prefix_ + std::string(name),
                       BasicTensor<T>(std::move(shape), static_cast<T>(value)));
  }
  Parameter<T>& zeros(std::string_view name, Shape shape) { return constant(name, shape, 0.0); }
  Parameter<T>& ones(std::string_view name, Shape shape) { return constant(name, shape, 1.0); }

  Parameter<T>& tensor(std::string_view name, BasicTensor<T> value) {
    return store_->add(prefix_ + std::string(name), std::move(value));
  }

  std::mt19937_64& rng() { return *rng_; }
  const std::string& prefix() const { return prefix_; }

 private:
  ParameterStore<T>* store_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

/// Binds parameters into a graph by name, relative to a prefix.
template <typename T>
class Scope {
 public:
  Scope(Graph<T>& graph, ParameterStore<T>& store, std::string prefix = "")
      : graph_(&graph), store_(&store), prefix_(std::move(prefix)) {}

  Var<T> operator()(std::string_view name) const {
    return graph_->parameter(store_->at(prefix_ + std::string(name)));
  }
  bool has(std::string_view name) const { return store_->contains(prefix_ + std::string(name)); }

  Scope sub(std::string_view name) const {
    return Scope(*graph_, *store_, prefix_ + std::string(name) + ".");
  }

  Graph<T>& graph() const { return *graph_; }
  const std::string& prefix() const { return prefix_; }

 private:
  Graph<T>* graph_;
  ParameterStore<T>* store_;
  std::string prefix_;
};

}  // namespace otfpf
