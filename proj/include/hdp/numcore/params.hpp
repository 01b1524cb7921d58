#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hdp/error.hpp"
#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::nc {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Ordered collection of named parameter tensors owned by a model.
template <typename T>
class ParamStore {
 public:
  /// Registers a parameter and returns its index.
  std::size_t add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter<T>{std::move(name), std::move(value)});
    return params_.size() - 1;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
  std::size_t add_uniform(std::string name, Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(1, fan_in)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return add(std::move(name), std::move(t));
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter " + name);
    return it->second;
  }
  Tensor<T>& get(const std::string& name) { return params_[index_of(name)].value; }
  const Tensor<T>& get(const std::string& name) const { return params_[index_of(name)].value; }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

  /// Copies values from a store with identical names and shapes.
  template <typename U>
  void assign_from(const ParamStore<U>& other) {
    if (other.size() != size()) throw ShapeError("parameter count mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& src = other[i];
      if (src.name != params_[i].name) throw ShapeError("parameter name mismatch: " + src.name);
      require_same_shape(src.value.shape(), params_[i].value.shape(), src.name.c_str());
      params_[i].value = src.value.template cast<T>();
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters placed into one graph as leaves; graph ids keyed by store index.
template <typename T>
class BoundParams {
 public:
  BoundParams(Graph<T>& g, const ParamStore<T>& store) {
    vars_.reserve(store.size());
    for (const auto& p : store) {
      vars_.push_back(g.tracking() ? g.leaf(p.value) : g.constant(p.value));
    }
  }
  Var<T> operator[](std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }

  /// Substitutes the node used for parameter i (e.g. a probe leaf).
  void rebind(std::size_t i, Var<T> v) { vars_.at(i) = v; }

  /// Extracts per-parameter gradients in store order.
  std::vector<Tensor<T>> collect(Gradients<T>& grads) const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(std::move(grads.at(v.id())));
    return out;
  }

 private:
  std::vector<Var<T>> vars_;
};

}  // namespace hdp::nc
