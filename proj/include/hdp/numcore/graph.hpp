#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hdp/error.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::nc {

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, int id) : g_(g), id_(id) {}

  int id() const { return id_; }
  Graph<T>& graph() const { return *g_; }
  const Tensor<T>& value() const { return g_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return g_ != nullptr; }

 private:
  Graph<T>* g_ = nullptr;
  int id_ = -1;
};

template <typename T>
using Gradients = std::unordered_map<int, Tensor<T>>;

/// Tape of recorded primitive ops. Nodes are appended in evaluation order, so
/// the insertion order is a topological order and the reverse pass is a single
/// backwards sweep.
template <typename T>
class Graph {
 public:
  using TensorT = Tensor<T>;
  /// Receives the upstream gradient of the node and accumulates into inputs.
  using BackwardFn = std::function<void(Graph&, const TensorT&)>;

  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// A differentiable leaf (parameter or input whose gradient is wanted).
  Var<T> leaf(TensorT value) {
    check_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, nullptr, true, track_});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// A non-differentiable input.
  Var<T> constant(TensorT value) {
    check_finite(value, "constant");
    nodes_.push_back(Node{std::move(value), {}, nullptr, false, false});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Appends an op node. The backward closure is dropped when no input needs
  /// a gradient.
  Var<T> record(TensorT value, std::vector<int> inputs, BackwardFn fn,
                const char* op = "op") {
    check_finite(value, op);
    bool needs = false;
    for (int in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in)].requires_grad;
    needs = needs && track_;
    nodes_.push_back(Node{std::move(value), needs ? std::move(inputs) : std::vector<int>{},
                          needs ? std::move(fn) : nullptr, false, needs});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const TensorT& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool tracking() const { return track_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node during the reverse pass (zero-allocated on
  /// first touch). Only meaningful inside a BackwardFn.
  TensorT& grad(int id) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot) slot.emplace(value(id).shape(), T{0});
    return *slot;
  }

  /// Reverse pass from a rank-0 output. Returns a gradient for every
  /// differentiable leaf, zero-filled when the leaf does not reach the output.
  Gradients<T> backward(Var<T> output) {
    const int out = output.id();
    if (value(out).rank() != 0) {
      throw ShapeError("backward requires a scalar output, got shape " +
                       to_string(value(out).shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[static_cast<std::size_t>(out)].emplace(Shape{}, T{1});
    for (int id = out; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      auto& slot = grads_[static_cast<std::size_t>(id)];
      if (!slot || !node.backward) continue;
      if (!slot->all_finite()) {
        throw NumericError("non-finite gradient encountered in reverse pass at node " +
                           std::to_string(id));
      }
      const TensorT gout = std::move(*slot);
      slot.reset();
      node.backward(*this, gout);
    }
    Gradients<T> result;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (!nodes_[id].is_leaf || !nodes_[id].requires_grad) continue;
      auto& slot = grads_[id];
      if (slot) {
        if (!slot->all_finite()) {
          throw NumericError("non-finite gradient at leaf " + std::to_string(id));
        }
        result.emplace(static_cast<int>(id), std::move(*slot));
      } else {
        result.emplace(static_cast<int>(id), TensorT(nodes_[id].value.shape(), T{0}));
      }
    }
    grads_.clear();
    return result;
  }

 private:
  struct Node {
    TensorT value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool is_leaf;
    bool requires_grad;
  };

  static void check_finite(const TensorT& t, const char* op) {
    if (!t.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }

  bool track_;
  std::vector<Node> nodes_;
  std::vector<std::optional<TensorT>> grads_;
};

}  // namespace hdp::nc
