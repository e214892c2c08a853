#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "msnet/tensor.hpp"

namespace msnet {

/// Trainable tensor owned by a model. `grad` is written by Graph::accumulate_parameter_grads.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape()); }
};

using NodeId = std::size_t;

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid as long as its graph lives.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

enum class GradMode { kEnabled, kDisabled };

/// Append-only tape. Node order is a topological order because every input
/// must exist before the node that consumes it.
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::kEnabled) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return mode_ == GradMode::kEnabled; }

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Binds a model parameter. Binding the same parameter twice returns the same node.
  Var parameter(Parameter& param);

  /// Appends an operation node. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// Gradient after backward(); nullptr when the node was not reached.
  const Tensor* grad(Var v) const;
  Tensor grad_or_zero(Var v) const;

  /// Resets every node gradient, seeds d loss/d loss = 1 and runs the reverse sweep.
  void backward(Var loss);

  /// Adds each bound parameter's node gradient (zero if unreached) into Parameter::grad.
  void accumulate_parameter_grads() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);
  Tensor& grad_buffer(NodeId id);

  GradMode mode_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, NodeId> bound_params_;
};

/// View handed to a backward rule: upstream gradient, saved values and input gradient sinks.
class BackwardContext {
 public:
  BackwardContext(Graph& graph, NodeId self) : graph_(graph), self_(self) {}

  const Tensor& grad_output() const { return graph_.nodes_[self_].grad; }
  const Tensor& output() const { return graph_.nodes_[self_].value; }
  const Tensor& input(std::size_t i) const { return graph_.nodes_[input_id(i)].value; }
  bool wants(std::size_t i) const { return graph_.nodes_[input_id(i)].requires_grad; }
  /// Zero-initialized on first touch; rules add into it.
  Tensor& input_grad(std::size_t i) { return graph_.grad_buffer(input_id(i)); }

 private:
  NodeId input_id(std::size_t i) const { return graph_.nodes_[self_].inputs.at(i); }

  Graph& graph_;
  NodeId self_;
};

}  // namespace msnet
