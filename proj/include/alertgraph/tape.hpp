#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "alertgraph/tensor.hpp"

namespace alertgraph::nn {

// A named trainable tensor. Gradients accumulate across backward passes until
// an optimizer step (or zero_grad) clears them. Frozen parameters never
// receive gradients.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;
  bool grad_seen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() {
    for (auto& g : grad.values()) g = 0.0;
    grad_seen = false;
  }
};

// In-neighbor lists in CSR form: in_list[in_offsets[v] .. in_offsets[v+1])
// holds the sources u of every edge u -> v.
struct InAdjacency {
  std::size_t n_nodes = 0;
  std::vector<std::uint32_t> in_offsets;
  std::vector<std::uint32_t> in_list;

  static InAdjacency from_edges(std::size_t n_nodes,
                                const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges);
};

// Dynamic reverse-mode tape over Tensor values. Nodes are recorded in
// topological (creation) order; backward() walks the record in reverse.
// Constructed with grad_enabled=false the tape computes values only.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until backward reaches this node
    bool needs_grad = false;
    Parameter* bound = nullptr;
    std::function<void(Tape&, Node&)> backprop;
  };

  explicit Tape(bool grad_enabled = true) : grad_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_; }
  std::size_t size() const { return nodes_.size(); }

  Node* leaf(Tensor t);
  Node* param(Parameter& p);

  // --- elementwise / shape ---
  Node* add(Node* a, Node* b);
  Node* add_const(Node* a, const Tensor& c);
  Node* scale(Node* a, double c);
  Node* relu(Node* a);
  Node* sigmoid(Node* a);
  Node* clamp(Node* a, double lo, double hi);
  Node* reshape(Node* a, std::vector<std::size_t> shape);
  Node* flatten(Node* a);
  Node* slice_rows(Node* a, std::size_t r0, std::size_t r1);
  Node* slice_cols(Node* a, std::size_t c0, std::size_t c1);
  Node* pad_rows_top(Node* a, std::size_t total_rows);
  Node* zero_rows_before(Node* a, std::size_t first_valid);
  Node* concat_rows(const std::vector<Node*>& parts);
  Node* concat_cols(const std::vector<Node*>& parts);
  Node* stack_channels(const std::vector<Node*>& channels);

  // --- linear algebra ---
  Node* matmul(Node* a, Node* b);
  Node* transpose(Node* a);
  Node* linear(Node* x, Node* W, Node* b);      // y = x W^T + b, W is {out,in}
  Node* perceptron(Node* x, Node* W, Node* b);  // relu(linear(x, W, b))
  Node* add_row_bias(Node* x, Node* b);

  // --- reductions / normalization ---
  Node* sum_rows(Node* a);   // {n,d} -> {d}
  Node* mean_rows(Node* a);  // {n,d} -> {d}
  Node* mean_all(Node* a);   // -> {1}
  Node* softmax_rows(Node* a);
  Node* log_softmax_rows(Node* a);
  Node* layer_norm(Node* x, Node* gamma, Node* beta, double eps = 1e-5);
  // Unit-normalizes a vector; a zero vector maps to the first basis vector
  // and bumps degenerate_norm_events.
  Node* l2_normalize_vec(Node* a);

  // --- graph / conv / task-specific ---
  Node* gin_aggregate(Node* h, Node* eps, std::shared_ptr<const InAdjacency> adj);
  Node* conv2d_3x3(Node* x, Node* k, Node* b);  // stride 1, pad 1
  Node* maxpool2(Node* x);                      // 2x2, stride 2
  Node* lincomb2(Node* a, Node* b, Node* alpha, std::size_t out_row);  // cross-stitch row
  Node* group_max_cols(Node* x, std::size_t group);                    // {B,C*K} -> {B,C}
  Node* arcface_margin(Node* cosines, const std::vector<std::size_t>& labels, double margin);
  Node* pick_per_row(Node* x, const std::vector<std::size_t>& cols);  // {B,C} -> {B}
  Node* bce_mean(Node* p, const Tensor& targets);                     // {B} -> {1}

  // Seeds d(root)/d(root) = 1 and accumulates gradients into every reachable
  // parameter. root must be scalar and produced by this tape.
  void backward(Node* root);

  int degenerate_norm_events = 0;

 private:
  Node* make(Tensor value, bool needs, std::function<void(Tape&, Node&)> bp);
  bool owns(const Node* n) const;

  std::vector<std::unique_ptr<Node>> nodes_;
  bool grad_;
};

// Allocates (zero-filled) the node's grad on first use.
Tensor& ensure_grad(Tape::Node* n);

}  // namespace alertgraph::nn
