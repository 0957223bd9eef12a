#include <cmath>
#include <functional>

#include "doctest.h"
#include "padapter/errors.hpp"
#include "padapter/graph.hpp"
#include "padapter/rng.hpp"
#include "support.hpp"

using namespace padapter;

namespace {

using Builder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

// Worst relative error over every input of a random linear functional of the op output.
double op_gradient_error(std::vector<Tensor> inputs, const Builder& build, Rng& rng) {
    Tensor weights;
    {
        Graph g;
        std::vector<NodeId> ids;
        for (const auto& t : inputs) ids.push_back(g.constant(t));
        weights = Tensor::randn(g.value(build(g, ids)).shape(), rng);
    }
    auto evaluate = [&](bool track, std::map<NodeId, Tensor>* grads, std::vector<NodeId>* ids_out) {
        Graph g;
        std::vector<NodeId> ids;
        for (const auto& t : inputs) ids.push_back(g.leaf(t, track));
        const NodeId out = build(g, ids);
        const NodeId loss = g.sum(g.mul(out, g.constant(weights)));
        if (grads) *grads = g.backward(loss);
        if (ids_out) *ids_out = ids;
        return g.value(loss)[0];
    };
    std::map<NodeId, Tensor> grads;
    std::vector<NodeId> ids;
    evaluate(true, &grads, &ids);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        worst = std::max(worst, testutil::fd_relative_error(inputs[i], grads.at(ids[i]),
                                                            [&] { return evaluate(false, nullptr, nullptr); }));
    return worst;
}

}  // namespace

TEST_CASE("backward of sum of squares") {
    Graph g;
    const NodeId x = g.leaf(Tensor({2}, std::vector<double>{1, -2}), true);
    const auto grads = g.backward(g.sum(g.mul(x, x)));
    CHECK(grads.at(x) == Tensor({2}, std::vector<double>{2, -4}));
}

TEST_CASE("constant loss gives zero gradients for untouched leaves") {
    Graph g;
    const NodeId x = g.leaf(Tensor({2, 2}, 1.0), true);
    const NodeId c = g.constant(Tensor({1}, 3.0));
    const auto grads = g.backward(g.sum(c));
    CHECK(grads.at(x) == Tensor({2, 2}));
}

TEST_CASE("non-scalar loss is a contract error") {
    Graph g;
    const NodeId x = g.leaf(Tensor({2, 2}, 1.0), true);
    CHECK_THROWS_AS(g.backward(x), ContractError);
}

TEST_CASE("hadamard mask and mse identities") {
    Rng rng(1);
    Graph g;
    const Tensor zv = Tensor::randn({3, 4}, rng);
    const NodeId z = g.constant(zv);
    CHECK(g.value(g.hadamard_mask(z, Tensor({3, 4}, 1.0))) == zv);
    CHECK(g.value(g.hadamard_mask(z, Tensor({3, 4}, 0.0))) == Tensor({3, 4}));
    CHECK(g.value(g.mse(z, z))[0] == 0.0);
    CHECK_THROWS_AS(g.hadamard_mask(z, Tensor({4, 3}, 1.0)), ShapeError);
    CHECK_THROWS_AS(g.add(z, g.constant(Tensor({4, 3}))), ShapeError);
}

TEST_CASE("requires_grad propagates only through tracked inputs") {
    Graph g;
    const NodeId a = g.constant(Tensor({2, 2}, 1.0));
    const NodeId b = g.leaf(Tensor({2, 2}, 1.0), true);
    CHECK_FALSE(g.requires_grad(g.add(a, a)));
    CHECK(g.requires_grad(g.add(a, b)));
}

TEST_CASE("graph nodes are stored in topological order") {
    Rng rng(2);
    Graph g;
    const NodeId a = g.leaf(Tensor::randn({2, 3}, rng), true);
    const NodeId b = g.leaf(Tensor::randn({3, 2}, rng), true);
    const NodeId c = g.matmul(a, b);
    const NodeId d = g.gelu(c);
    CHECK(a < c);
    CHECK(b < c);
    CHECK(c < d);
    CHECK(g.kind(c) == OpKind::MatMul);
    CHECK(g.size() == 4);
}

TEST_CASE("single-head attention equals the explicit softmax formula") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(10), m = 1 + rng.below(10), d = 1 + rng.below(8);
        const Tensor q = Tensor::randn({n, d}, rng), k = Tensor::randn({m, d}, rng), v = Tensor::randn({m, d}, rng);
        CHECK(max_abs_diff(attention(q, k, v, 1), testutil::loop_attention(q, k, v)) < 1e-12);
    }
}

TEST_CASE("multi-head attention equals per-head explicit attention") {
    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t heads = 1 + rng.below(4), dh = 1 + rng.below(3), d = heads * dh;
        const std::size_t n = 1 + rng.below(8), m = 1 + rng.below(8);
        const Tensor q = Tensor::randn({n, d}, rng), k = Tensor::randn({m, d}, rng), v = Tensor::randn({m, d}, rng);
        Tensor want({n, d});
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh({n, dh}), kh({m, dh}), vh({m, dh});
            for (std::size_t c = 0; c < dh; ++c) {
                for (std::size_t i = 0; i < n; ++i) qh.at(i, c) = q.at(i, h * dh + c);
                for (std::size_t j = 0; j < m; ++j) {
                    kh.at(j, c) = k.at(j, h * dh + c);
                    vh.at(j, c) = v.at(j, h * dh + c);
                }
            }
            const Tensor oh = testutil::loop_attention(qh, kh, vh);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) want.at(i, h * dh + c) = oh.at(i, c);
        }
        CHECK(max_abs_diff(attention(q, k, v, heads), want) < 1e-12);
    }
    CHECK_THROWS_AS(attention(Tensor({2, 6}), Tensor({3, 6}), Tensor({3, 6}), 4), ShapeError);
    CHECK_THROWS_AS(attention(Tensor({2, 6}), Tensor({3, 5}), Tensor({3, 6}), 1), ShapeError);
}

TEST_CASE("every differentiable op matches central finite differences over 100 seeds") {
    struct OpCase {
        const char* name;
        std::function<std::vector<Tensor>(Rng&)> make;
        Builder build;
    };
    const std::vector<OpCase> cases = {
        {"matmul", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({4, 2}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.matmul(x[0], x[1]); }},
        {"add", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.add(x[0], x[1]); }},
        {"sub", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.sub(x[0], x[1]); }},
        {"mul", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.mul(x[0], x[1]); }},
        {"hadamard_mask", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) {
             return g.hadamard_mask(x[0], Tensor({3, 4}, std::vector<double>{1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 0}));
         }},
        {"scale", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({2, 5}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.scale(x[0], -1.7); }},
        {"add_row", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({1, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.add_row(x[0], x[1]); }},
        {"layer_norm",
         [](Rng& r) {
             return std::vector<Tensor>{Tensor::randn({3, 5}, r), Tensor::randn({1, 5}, r), Tensor::randn({1, 5}, r)};
         },
         [](Graph& g, const std::vector<NodeId>& x) { return g.layer_norm(x[0], x[1], x[2]); }},
        {"gelu", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r, 2.0)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.gelu(x[0]); }},
        {"softmax", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 5}, r, 2.0)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.softmax(x[0]); }},
        {"attention_1head",
         [](Rng& r) {
             return std::vector<Tensor>{Tensor::randn({4, 4}, r), Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)};
         },
         [](Graph& g, const std::vector<NodeId>& x) { return g.attention(x[0], x[1], x[2], 1); }},
        {"attention_2head",
         [](Rng& r) {
             return std::vector<Tensor>{Tensor::randn({4, 6}, r), Tensor::randn({5, 6}, r), Tensor::randn({5, 6}, r)};
         },
         [](Graph& g, const std::vector<NodeId>& x) { return g.attention(x[0], x[1], x[2], 2); }},
        {"gather_rows", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({5, 3}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.gather_rows(x[0], {4, 0, 4, 2}); }},
        {"mse", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r), Tensor::randn({3, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.mse(x[0], x[1]); }},
        {"sum", [](Rng& r) { return std::vector<Tensor>{Tensor::randn({3, 4}, r)}; },
         [](Graph& g, const std::vector<NodeId>& x) { return g.sum(x[0]); }},
    };
    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(derive_seed({seed, 0x6A0}));
            worst = std::max(worst, op_gradient_error(c.make(rng), c.build, rng));
        }
        INFO(c.name);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("composite attention-layer loss matches finite differences") {
    Rng rng(77);
    std::vector<Tensor> in = {Tensor::randn({6, 4}, rng), Tensor::randn({4, 4}, rng), Tensor::randn({4, 4}, rng),
                              Tensor::randn({4, 4}, rng), Tensor::randn({3, 4}, rng)};
    const Builder build = [](Graph& g, const std::vector<NodeId>& x) {
        const NodeId q = g.matmul(x[0], x[1]);
        const NodeId k = g.matmul(x[4], x[2]);
        const NodeId v = g.matmul(x[4], x[3]);
        const NodeId z = g.attention(q, k, v, 2);
        return g.gelu(g.add(z, x[0]));
    };
    CHECK(op_gradient_error(in, build, rng) < 1e-4);
}

TEST_CASE("graph ops are bit-deterministic") {
    Rng r1(5), r2(5);
    auto run = [](Rng& rng) {
        Graph g;
        const NodeId q = g.leaf(Tensor::randn({5, 4}, rng), true);
        const NodeId k = g.leaf(Tensor::randn({3, 4}, rng), true);
        const NodeId loss = g.sum(g.attention(q, k, k, 2));
        return g.backward(loss).at(q);
    };
    CHECK(run(r1) == run(r2));
}
