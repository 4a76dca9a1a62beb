#include "simvae/graph.hpp"

#include <string>

namespace simvae {

const Tensor& Var::value() const {
  if (graph == nullptr) throw GraphError("Var is not bound to a graph");
  return graph->value(*this);
}

const Tensor& BackwardContext::output() const { return graph_.nodes_[node_].value; }

const Tensor& BackwardContext::grad_output() const { return graph_.nodes_[node_].grad; }

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].value;
}

Tensor* BackwardContext::grad_input(std::size_t i) {
  auto& in = graph_.nodes_[graph_.nodes_[node_].inputs.at(i)];
  if (!in.tracked) return nullptr;
  if (in.grad.empty()) in.grad = Tensor(in.value.shape(), 0.0);
  return &in.grad;
}

std::size_t BackwardContext::num_inputs() const { return graph_.nodes_[node_].inputs.size(); }

void Graph::check_owner(Var v) const {
  if (v.graph != this || v.id >= nodes_.size()) {
    throw GraphError("Var does not belong to this graph");
  }
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  consumed_ = false;
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
  consumed_ = false;
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owner(in);
    node.inputs.push_back(in.id);
    node.tracked = node.tracked || nodes_[in.id].tracked;
  }
  nodes_.push_back(std::move(node));
  consumed_ = false;
  return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const {
  check_owner(v);
  return nodes_[v.id].value;
}

bool Graph::tracked(Var v) const {
  check_owner(v);
  return nodes_[v.id].tracked;
}

const Tensor& Graph::grad(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id];
  if (!n.tracked) throw GraphError("gradient requested for an untracked node");
  if (n.grad.empty()) {
    n.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  check_owner(loss);
  if (consumed_) {
    throw GraphError("backward() called twice without a new forward pass");
  }
  const Node& target = nodes_[loss.id];
  if (target.value.size() != 1) {
    throw GraphError("backward() needs a scalar loss, got shape " +
                     shape_string(target.value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  consumed_ = true;
  if (!target.tracked) return;

  nodes_[loss.id].grad = Tensor(target.value.shape(), 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.tracked || !n.backward || n.grad.empty()) continue;
    BackwardContext ctx(*this, i);
    n.backward(ctx);
  }
}

}  // namespace simvae
