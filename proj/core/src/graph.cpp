#include "msnet/graph.hpp"

#include <algorithm>

#include "msnet/errors.hpp"

namespace msnet {

const Tensor& Var::value() const {
  if (graph == nullptr) throw ContractError("Var is not bound to a graph");
  return graph->value(*this);
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  return push(std::move(node));
}

Var Graph::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = grad_enabled();
  return push(std::move(node));
}

Var Graph::parameter(Parameter& param) {
  if (auto it = bound_params_.find(&param); it != bound_params_.end()) return Var{this, it->second};
  Node node;
  node.value = param.value;
  node.requires_grad = grad_enabled();
  node.param = &param;
  Var v = push(std::move(node));
  bound_params_.emplace(&param, v.id);
  return v;
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.graph != this) throw ContractError("operation mixes nodes from different graphs");
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

const Tensor* Graph::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  return node.has_grad ? &node.grad : nullptr;
}

Tensor Graph::grad_or_zero(Var v) const {
  const Node& node = nodes_.at(v.id);
  return node.has_grad ? node.grad : Tensor(node.value.shape());
}

Tensor& Graph::grad_buffer(NodeId id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape());
    node.has_grad = true;
  }
  return node.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw ContractError("loss belongs to a different graph");
  if (nodes_.at(loss.id).value.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_to_string(nodes_[loss.id].value.shape()));
  }
  for (Node& node : nodes_) {
    node.grad = Tensor();
    node.has_grad = false;
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id).fill(1.0);
  for (NodeId id = loss.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.has_grad || !node.backward) continue;
    BackwardContext ctx(*this, id);
    node.backward(ctx);
  }
}

void Graph::accumulate_parameter_grads() const {
  for (const Node& node : nodes_) {
    if (node.param == nullptr) continue;
    Parameter& p = *node.param;
    if (!p.grad.same_shape(p.value)) p.zero_grad();
    if (!node.has_grad) continue;
    double* dst = p.grad.data();
    const double* src = node.grad.data();
    for (std::size_t i = 0; i < p.grad.numel(); ++i) dst[i] += src[i];
  }
}

}  // namespace msnet
