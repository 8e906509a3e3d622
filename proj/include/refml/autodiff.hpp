#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "refml/tensor.hpp"

namespace refml::ad {

// first: gradients come back as constants with no history.
// second: gradients are themselves graph nodes, so a loss built from them
// (e.g. a query loss at adapted parameters) can be differentiated again.
enum class GradMode { first, second };

std::string_view to_string(GradMode mode);
GradMode parse_grad_mode(std::string_view text);

enum class Op {
  input,
  add,
  sub,
  mul,
  scale,
  sum,
  mean,
  broadcast_scalar,
  reshape,
  matmul,
  linear,
  add_bias,
  row_sum,
  broadcast_rows,
  relu,
  relu_mask,
  conv1d,
  batchnorm1d,
  maxpool1d,
  softmax_xent,
  xent_grad,
};

std::string_view to_string(Op op);

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

inline constexpr double kBatchNormEps = 1e-5;

// Append-only computation graph. Nodes are created in topological order, so
// a reverse sweep over indices is a valid backward schedule. A graph is
// single-threaded; build one per task.
class Graph {
 public:
  NodeId input(Tensor value);

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  Op op(NodeId id) const { return nodes_.at(id.index).op; }
  std::size_t size() const { return nodes_.size(); }

  // Elementwise. mul additionally accepts a one-element operand on either
  // side, broadcast over the other.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);

  NodeId sum(NodeId a);   // -> scalar
  NodeId mean(NodeId a);  // -> scalar
  NodeId broadcast_scalar(NodeId s, Shape shape);
  NodeId reshape(NodeId a, Shape shape);
  NodeId flatten(NodeId a);  // [B, ...] -> [B, prod(...)]

  // 2-D matrix product op(a) * op(b), op = optional transpose.
  NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false);
  // x[B,in] * w[out,in]^T + bias[out]
  NodeId linear(NodeId x, NodeId w, NodeId bias);
  NodeId add_bias(NodeId x, NodeId bias);
  NodeId row_sum(NodeId x);                          // [B,n] -> [n]
  NodeId broadcast_rows(NodeId v, std::size_t rows);  // [n] -> [rows,n]

  NodeId relu(NodeId x);
  // g * (x > 0); the mask is treated as locally constant in x.
  NodeId relu_mask(NodeId g, NodeId x);

  // x[B,Cin,L] with w[Cout,Cin,K], stride 1, same padding (left pad (K-1)/2).
  NodeId conv1d(NodeId x, NodeId w);
  // Batch statistics over (B, L) per channel; no running averages.
  NodeId batchnorm1d(NodeId x, NodeId gamma, NodeId beta);
  // Ties route to the lowest index.
  NodeId maxpool1d(NodeId x, std::size_t window, std::size_t stride);

  // Mean over rows of -log softmax(logits)[label]. logits is [B,N] or [N].
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels);

  // dLoss/dNode for every wrt node, as plain tensors.
  std::vector<Tensor> backward(NodeId loss, std::span<const NodeId> wrt);

  // Gradients as nodes of this graph. In GradMode::second they carry their
  // own history; in GradMode::first they are fresh inputs.
  std::vector<NodeId> grad(NodeId loss, std::span<const NodeId> wrt, GradMode mode);

 private:
  struct Node {
    Op op = Op::input;
    Tensor value;
    std::vector<NodeId> parents;
    double scalar = 0.0;
    std::size_t window = 0;
    std::size_t stride = 0;
    bool transpose_a = false;
    bool transpose_b = false;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> indices;  // maxpool argmax
    Tensor saved;                      // batchnorm x-hat
    std::vector<double> inv_std;       // batchnorm per-channel 1/sigma
  };

  NodeId push(Node node);
  NodeId xent_grad(NodeId logits, const std::vector<std::size_t>& labels);

  std::vector<bool> needed_mask(NodeId loss, std::span<const NodeId> wrt) const;
  Tensor vjp(std::size_t node, std::size_t parent_slot, const Tensor& upstream) const;
  NodeId vjp_node(std::size_t node, std::size_t parent_slot, NodeId upstream);

  // Deque keeps element addresses stable while backward appends nodes.
  std::deque<Node> nodes_;
};

// Builds a scalar loss from input nodes holding the given point.
using LossBuilder = std::function<NodeId(Graph&, std::span<const NodeId>)>;

// Max relative error between autodiff and central differences of step h,
// |a - n| / (|a| + |n| + 1e-12), over all coordinates of all tensors. When
// coords_per_tensor > 0, that many coordinates per tensor are sampled with
// the given seed instead of sweeping every element.
double grad_check(const LossBuilder& f, const std::vector<Tensor>& point, double h,
                  std::size_t coords_per_tensor = 0, std::uint64_t seed = 0);

// Scalar value of f at point.
double evaluate(const LossBuilder& f, const std::vector<Tensor>& point);

}  // namespace refml::ad
