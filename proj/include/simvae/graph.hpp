#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "simvae/tensor.hpp"

namespace simvae {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// View handed to a node's backward rule.
class BackwardContext {
 public:
  const Tensor& output() const;
  const Tensor& grad_output() const;
  const Tensor& input(std::size_t i) const;
  // Gradient accumulator of input i, or nullptr when that input is untracked.
  Tensor* grad_input(std::size_t i);
  std::size_t num_inputs() const;

 private:
  friend class Graph;
  BackwardContext(Graph& g, std::size_t node) : graph_(g), node_(node) {}
  Graph& graph_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

// Tape of operations in creation order, which is a topological order. backward()
// walks it once in reverse. A second backward() is only accepted after new nodes
// have been recorded.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target with respect to v. Zero-filled for
  // tracked nodes that did not contribute; throws for untracked nodes.
  const Tensor& grad(Var v) const;
  bool tracked(Var v) const;

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    mutable Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool tracked = false;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace simvae
