#include "padapter/graph.hpp"

#include <Eigen/Core>
#include <cmath>
#include <optional>

#include "padapter/errors.hpp"

namespace padapter {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using BlockC = Eigen::Map<const RowMat, 0, Stride>;
using Block = Eigen::Map<RowMat, 0, Stride>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected matrix, got " + shape_str(t.shape()));
}

BlockC head_view(const Tensor& t, std::size_t h, std::size_t dh) {
    return BlockC(t.data() + h * dh, static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(dh),
                  Stride(static_cast<Eigen::Index>(t.cols())));
}

Block head_view(Tensor& t, std::size_t h, std::size_t dh) {
    return Block(t.data() + h * dh, static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(dh),
                 Stride(static_cast<Eigen::Index>(t.cols())));
}

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
    if (!slot) {
        slot = g;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
    }
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, Tensor* probs) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    if (q.cols() != k.cols() || k.rows() != v.rows() || v.cols() != q.cols())
        throw ShapeError("attention: incompatible Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()));
    if (heads == 0 || q.cols() % heads != 0)
        throw ShapeError("attention: model dim " + std::to_string(q.cols()) + " not divisible by " +
                         std::to_string(heads) + " heads");
    const std::size_t n = q.rows();
    const std::size_t m = k.rows();
    const std::size_t dh = q.cols() / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({n, q.cols()});
    if (probs) *probs = Tensor({heads, n, m});
    Tensor scores({n, m});
    for (std::size_t h = 0; h < heads; ++h) {
        Map(scores.data(), n, m).noalias() = s * (head_view(q, h, dh) * head_view(k, h, dh).transpose());
        Tensor p = softmax_rows(scores);
        head_view(out, h, dh).noalias() = MapC(p.data(), n, m) * head_view(v, h, dh);
        if (probs) std::copy(p.data(), p.data() + n * m, probs->data() + h * n * m);
    }
    return out;
}

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

const Graph::Node& Graph::node(NodeId id) const {
    if (id >= nodes_.size()) throw ContractError("graph: unknown node id " + std::to_string(id));
    return nodes_[id];
}

NodeId Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::MatMul;
    n.in[0] = a;
    n.in[1] = b;
    n.value = padapter::matmul(node(a).value, node(b).value);
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Add;
    n.in[0] = a;
    n.in[1] = b;
    n.value = padapter::add(node(a).value, node(b).value);
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Sub;
    n.in[0] = a;
    n.in[1] = b;
    n.value = padapter::sub(node(a).value, node(b).value);
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Mul;
    n.in[0] = a;
    n.in[1] = b;
    n.value = padapter::mul(node(a).value, node(b).value);
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return push(std::move(n));
}

NodeId Graph::hadamard_mask(NodeId a, const Tensor& mask) {
    Node n;
    n.op = OpKind::HadamardMask;
    n.in[0] = a;
    n.value = padapter::mul(node(a).value, mask);
    n.aux = mask;
    n.requires_grad = node(a).requires_grad;
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double s) {
    Node n;
    n.op = OpKind::Scale;
    n.in[0] = a;
    n.scalar = s;
    n.value = padapter::scale(node(a).value, s);
    n.requires_grad = node(a).requires_grad;
    return push(std::move(n));
}

NodeId Graph::add_row(NodeId a, NodeId row) {
    const Tensor& x = node(a).value;
    const Tensor& r = node(row).value;
    require_matrix(x, "add_row");
    if (r.size() != x.cols())
        throw ShapeError("add_row: row " + shape_str(r.shape()) + " does not match " + shape_str(x.shape()));
    Node n;
    n.op = OpKind::AddRow;
    n.in[0] = a;
    n.in[1] = row;
    n.value = x;
    const std::size_t cols = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) n.value[i * cols + j] += r[j];
    n.requires_grad = node(a).requires_grad || node(row).requires_grad;
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId a, NodeId gamma, NodeId beta, double eps) {
    const Tensor& x = node(a).value;
    const Tensor& g = node(gamma).value;
    const Tensor& b = node(beta).value;
    require_matrix(x, "layer_norm");
    const std::size_t rows = x.rows();
    const std::size_t cols = x.cols();
    if (g.size() != cols || b.size() != cols)
        throw ShapeError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
    Node n;
    n.op = OpKind::LayerNorm;
    n.in[0] = a;
    n.in[1] = gamma;
    n.in[2] = beta;
    n.value = Tensor(x.shape());
    n.aux = Tensor(x.shape());  // normalized input
    n.aux2 = Tensor({rows});    // reciprocal std per row
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += in[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + eps);
        n.aux2[r] = rstd;
        for (std::size_t c = 0; c < cols; ++c) {
            const double xh = (in[c] - mean) * rstd;
            n.aux[r * cols + c] = xh;
            n.value[r * cols + c] = xh * g[c] + b[c];
        }
    }
    n.requires_grad = node(a).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
    return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
    const Tensor& x = node(a).value;
    Node n;
    n.op = OpKind::Gelu;
    n.in[0] = a;
    n.value = Tensor(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
    n.requires_grad = node(a).requires_grad;
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
    Node n;
    n.op = OpKind::Softmax;
    n.in[0] = a;
    n.value = softmax_rows(node(a).value);
    n.requires_grad = node(a).requires_grad;
    return push(std::move(n));
}

NodeId Graph::attention(NodeId q, NodeId k, NodeId v, std::size_t heads) {
    Node n;
    n.op = OpKind::Attention;
    n.in[0] = q;
    n.in[1] = k;
    n.in[2] = v;
    n.heads = heads;
    n.requires_grad = node(q).requires_grad || node(k).requires_grad || node(v).requires_grad;
    n.value = padapter::attention(node(q).value, node(k).value, node(v).value, heads,
                                  n.requires_grad ? &n.aux : nullptr);
    return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId table, std::vector<std::size_t> rows) {
    const Tensor& t = node(table).value;
    require_matrix(t, "gather_rows");
    const std::size_t cols = t.cols();
    Node n;
    n.op = OpKind::GatherRows;
    n.in[0] = table;
    n.value = Tensor({rows.size(), cols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= t.rows())
            throw RangeError("gather_rows: row " + std::to_string(rows[i]) + " out of " + std::to_string(t.rows()));
        std::copy(t.data() + rows[i] * cols, t.data() + (rows[i] + 1) * cols, n.value.data() + i * cols);
    }
    n.index = std::move(rows);
    n.requires_grad = node(table).requires_grad;
    return push(std::move(n));
}

NodeId Graph::mse(NodeId a, NodeId b) {
    const Tensor& x = node(a).value;
    const Tensor& y = node(b).value;
    require_same_shape(x, y, "mse");
    Node n;
    n.op = OpKind::Mse;
    n.in[0] = a;
    n.in[1] = b;
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
    n.value = Tensor({1}, acc / static_cast<double>(x.size()));
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    const Tensor& x = node(a).value;
    Node n;
    n.op = OpKind::Sum;
    n.in[0] = a;
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    n.value = Tensor({1}, acc);
    n.requires_grad = node(a).requires_grad;
    return push(std::move(n));
}

std::map<NodeId, Tensor> Graph::backward(NodeId loss) const {
    if (node(loss).value.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(node(loss).value.shape()));

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss] = Tensor(node(loss).value.shape(), 1.0);

    for (std::size_t idx = loss + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        if (!n.requires_grad || !grads[idx] || n.op == OpKind::Leaf) continue;
        const Tensor& g = *grads[idx];
        auto wants = [&](int slot) { return nodes_[n.in[slot]].requires_grad; };

        switch (n.op) {
            case OpKind::Leaf:
                break;
            case OpKind::MatMul: {
                const Tensor& a = nodes_[n.in[0]].value;
                const Tensor& b = nodes_[n.in[1]].value;
                if (wants(0)) accumulate(grads[n.in[0]], matmul_bt(g, b));
                if (wants(1)) accumulate(grads[n.in[1]], matmul_at(a, g));
                break;
            }
            case OpKind::Add:
                if (wants(0)) accumulate(grads[n.in[0]], g);
                if (wants(1)) accumulate(grads[n.in[1]], g);
                break;
            case OpKind::Sub:
                if (wants(0)) accumulate(grads[n.in[0]], g);
                if (wants(1)) accumulate(grads[n.in[1]], padapter::scale(g, -1.0));
                break;
            case OpKind::Mul:
                if (wants(0)) accumulate(grads[n.in[0]], padapter::mul(g, nodes_[n.in[1]].value));
                if (wants(1)) accumulate(grads[n.in[1]], padapter::mul(g, nodes_[n.in[0]].value));
                break;
            case OpKind::HadamardMask:
                if (wants(0)) accumulate(grads[n.in[0]], padapter::mul(g, n.aux));
                break;
            case OpKind::Scale:
                if (wants(0)) accumulate(grads[n.in[0]], padapter::scale(g, n.scalar));
                break;
            case OpKind::AddRow: {
                if (wants(0)) accumulate(grads[n.in[0]], g);
                if (wants(1)) {
                    const std::size_t cols = g.cols();
                    Tensor gr(nodes_[n.in[1]].value.shape());
                    for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < cols; ++j) gr[j] += g[i * cols + j];
                    accumulate(grads[n.in[1]], gr);
                }
                break;
            }
            case OpKind::LayerNorm: {
                const Tensor& gamma = nodes_[n.in[1]].value;
                const std::size_t rows = g.rows();
                const std::size_t cols = g.cols();
                if (wants(0)) {
                    Tensor dx(g.shape());
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* gr = g.data() + r * cols;
                        const double* xh = n.aux.data() + r * cols;
                        double mean_dxh = 0.0;
                        double mean_dxh_xh = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double dxh = gr[c] * gamma[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= static_cast<double>(cols);
                        mean_dxh_xh /= static_cast<double>(cols);
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double dxh = gr[c] * gamma[c];
                            dx[r * cols + c] = n.aux2[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    accumulate(grads[n.in[0]], dx);
                }
                if (wants(1) || wants(2)) {
                    Tensor dg(gamma.shape());
                    Tensor db(gamma.shape());
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) {
                            dg[c] += g[r * cols + c] * n.aux[r * cols + c];
                            db[c] += g[r * cols + c];
                        }
                    if (wants(1)) accumulate(grads[n.in[1]], dg);
                    if (wants(2)) accumulate(grads[n.in[2]], db);
                }
                break;
            }
            case OpKind::Gelu: {
                if (!wants(0)) break;
                const Tensor& x = nodes_[n.in[0]].value;
                Tensor dx(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
                    dx[i] = g[i] * (cdf + x[i] * pdf);
                }
                accumulate(grads[n.in[0]], dx);
                break;
            }
            case OpKind::Softmax: {
                if (!wants(0)) break;
                const Tensor& p = n.value;
                const std::size_t cols = p.rank() == 1 ? p.dim(0) : p.cols();
                const std::size_t rows = p.size() / cols;
                Tensor dx(p.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c)
                        dx[r * cols + c] = p[r * cols + c] * (g[r * cols + c] - dot);
                }
                accumulate(grads[n.in[0]], dx);
                break;
            }
            case OpKind::Attention: {
                const Tensor& q = nodes_[n.in[0]].value;
                const Tensor& k = nodes_[n.in[1]].value;
                const Tensor& v = nodes_[n.in[2]].value;
                const std::size_t heads = n.heads;
                const std::size_t nq = q.rows();
                const std::size_t nk = k.rows();
                const std::size_t dh = q.cols() / heads;
                const double s = 1.0 / std::sqrt(static_cast<double>(dh));
                Tensor dq(q.shape()), dk(k.shape()), dv(v.shape());
                RowMat dp(nq, nk), ds(nq, nk);
                for (std::size_t h = 0; h < heads; ++h) {
                    MapC p(n.aux.data() + h * nq * nk, nq, nk);
                    auto go = head_view(g, h, dh);
                    if (wants(2)) head_view(dv, h, dh).noalias() = p.transpose() * go;
                    if (!wants(0) && !wants(1)) continue;
                    dp.noalias() = go * head_view(v, h, dh).transpose();
                    for (std::size_t r = 0; r < nq; ++r) {
                        const double dot = dp.row(r).dot(p.row(r));
                        ds.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
                    }
                    if (wants(0)) head_view(dq, h, dh).noalias() = s * (ds * head_view(k, h, dh));
                    if (wants(1)) head_view(dk, h, dh).noalias() = s * (ds.transpose() * head_view(q, h, dh));
                }
                if (wants(0)) accumulate(grads[n.in[0]], dq);
                if (wants(1)) accumulate(grads[n.in[1]], dk);
                if (wants(2)) accumulate(grads[n.in[2]], dv);
                break;
            }
            case OpKind::GatherRows: {
                if (!wants(0)) break;
                const Tensor& t = nodes_[n.in[0]].value;
                const std::size_t cols = t.cols();
                Tensor dt(t.shape());
                for (std::size_t i = 0; i < n.index.size(); ++i)
                    for (std::size_t c = 0; c < cols; ++c) dt[n.index[i] * cols + c] += g[i * cols + c];
                accumulate(grads[n.in[0]], dt);
                break;
            }
            case OpKind::Mse: {
                const Tensor& a = nodes_[n.in[0]].value;
                const Tensor& b = nodes_[n.in[1]].value;
                const double coef = 2.0 * g[0] / static_cast<double>(a.size());
                Tensor d(a.shape());
                for (std::size_t i = 0; i < a.size(); ++i) d[i] = coef * (a[i] - b[i]);
                if (wants(0)) accumulate(grads[n.in[0]], d);
                if (wants(1)) accumulate(grads[n.in[1]], padapter::scale(d, -1.0));
                break;
            }
            case OpKind::Sum: {
                if (wants(0)) accumulate(grads[n.in[0]], Tensor(nodes_[n.in[0]].value.shape(), g[0]));
                break;
            }
        }
    }

    std::map<NodeId, Tensor> out;
    for (NodeId i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.op != OpKind::Leaf || !n.requires_grad) continue;
        out.emplace(i, grads[i] ? std::move(*grads[i]) : Tensor(n.value.shape()));
    }
    return out;
}

}  // namespace padapter
