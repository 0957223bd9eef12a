#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "padapter/tensor.hpp"

namespace padapter {

using NodeId = std::size_t;

enum class OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    HadamardMask,
    Scale,
    AddRow,
    LayerNorm,
    Gelu,
    Softmax,
    Attention,
    GatherRows,
    Mse,
    Sum,
};

// Multi-head scaled dot-product attention on plain tensors:
// per head h, softmax(Q_h K_h^T / sqrt(d_h)) V_h, heads concatenated along columns.
// When `probs` is non-null it receives the {heads, n_q, n_k} attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, Tensor* probs = nullptr);

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order, so the node vector is already a topological order. A Graph is not
// thread-safe; build one per forward pass.
class Graph {
public:
    NodeId leaf(Tensor value, bool requires_grad = false);
    NodeId constant(Tensor value) { return leaf(std::move(value), false); }

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    // a ⊙ mask with a constant mask of the same shape.
    NodeId hadamard_mask(NodeId a, const Tensor& mask);
    NodeId scale(NodeId a, double s);
    // Adds the 1×cols row vector to every row of a.
    NodeId add_row(NodeId a, NodeId row);
    NodeId layer_norm(NodeId a, NodeId gamma, NodeId beta, double eps = 1e-5);
    NodeId gelu(NodeId a);
    NodeId softmax(NodeId a);
    NodeId attention(NodeId q, NodeId k, NodeId v, std::size_t heads);
    NodeId gather_rows(NodeId table, std::vector<std::size_t> rows);
    NodeId mse(NodeId a, NodeId b);
    NodeId sum(NodeId a);

    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
    OpKind kind(NodeId id) const { return nodes_.at(id).op; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient of a scalar loss with respect to every leaf that requires grad.
    // Leaves the loss does not depend on receive zero tensors.
    std::map<NodeId, Tensor> backward(NodeId loss) const;

private:
    struct Node {
        OpKind op = OpKind::Leaf;
        NodeId in[3] = {0, 0, 0};
        Tensor value;
        Tensor aux;  // saved activations (mask, probabilities, normalized input, ...)
        Tensor aux2;
        std::vector<std::size_t> index;
        double scalar = 0.0;
        std::size_t heads = 1;
        bool requires_grad = false;
    };

    NodeId push(Node n);
    const Node& node(NodeId id) const;

    std::vector<Node> nodes_;
};

}  // namespace padapter
