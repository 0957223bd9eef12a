#include "padapter/dca.hpp"

#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"
#include "padapter/training.hpp"

namespace padapter {

TokenMask mask_to_tokens(const Tensor& mask, std::size_t token) {
    require_binary_mask(mask, "mask_to_tokens");
    if (token == 0 || height(mask) % token || width(mask) % token)
        throw GeometryError("mask_to_tokens: " + shape_str(mask.shape()) + " not divisible by token size " +
                            std::to_string(token));
    TokenMask m;
    m.rows = height(mask) / token;
    m.cols = width(mask) / token;
    m.values.assign(m.rows * m.cols, 0.0);
    for (std::size_t y = 0; y < height(mask); ++y)
        for (std::size_t x = 0; x < width(mask); ++x)
            if (mask.at(0, y, x) != 0.0) m.values[(y / token) * m.cols + x / token] = 1.0;
    return m;
}

Tensor keep_matrix(const TokenMask& m, std::size_t dim) {
    Tensor keep({m.values.size(), dim});
    for (std::size_t i = 0; i < m.values.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j) keep.at(i, j) = 1.0 - m.values[i];
    return keep;
}

NodeId dca_forward(Graph& g, NodeId z, NodeId c, const TokenMask& m, const CrossAttentionWeights& base,
                   const DcaLayerWeights& w, std::size_t heads) {
    const std::size_t n = g.value(z).rows(), dim = g.value(z).cols();
    if (n != m.values.size())
        throw ShapeError("dca_forward: " + std::to_string(n) + " tokens but mask covers " +
                         std::to_string(m.values.size()));
    const NodeId q = g.matmul(z, base.wq);
    const NodeId k = g.matmul(c, base.wk);
    const NodeId v = g.matmul(c, base.wv);
    const NodeId z_base = g.attention(q, k, v, heads);

    const NodeId q_bg = g.matmul(g.hadamard_mask(z, keep_matrix(m, dim)), w.wq);
    const NodeId z1 = g.attention(q_bg, k, v, heads);
    const NodeId z2 = g.attention(q, g.matmul(z1, w.wk), g.matmul(z1, w.wv), heads);
    return g.add(z_base, z2);
}

FeatureMap dca_forward(const FeatureMap& z, const TextEmbedding& c, const TokenMask& m, const AttentionTriple& base,
                       const AttentionTriple& adapter, std::size_t heads) {
    if (m.rows != z.rows || m.cols != z.cols) throw ShapeError("dca_forward: token mask geometry mismatch");
    Graph g;
    const NodeId out = dca_forward(g, g.constant(z.tokens), g.constant(c.vectors), m,
                                   {g.constant(base.wq), g.constant(base.wk), g.constant(base.wv)},
                                   {g.constant(adapter.wq), g.constant(adapter.wk), g.constant(adapter.wv)}, heads);
    return {g.value(out), z.rows, z.cols};
}

void init_dca(ParameterStore& store, const DenoiserConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xDCA0}));
    const std::size_t d = cfg.dim;
    for (std::size_t l : cfg.adapted_list()) {
        const std::string p = layer_prefix("dca", l);
        store.set(p + "wq", Tensor::randn({d, d}, rng, 0.02), false);
        store.set(p + "wk", Tensor({d, d}), false);
        store.set(p + "wv", Tensor({d, d}), false);
    }
}

bool has_dca(const ParameterStore& store, const DenoiserConfig& cfg) {
    for (std::size_t l : cfg.adapted_list()) {
        const std::string p = layer_prefix("dca", l);
        if (!store.contains(p + "wq") || !store.contains(p + "wk") || !store.contains(p + "wv")) return false;
    }
    return true;
}

Stage1Result train_stage1(const ParameterStore& base, const std::vector<TrainingExample>& data,
                          const TrainHyper& hyper, std::uint64_t seed) {
    if (data.empty()) throw ContractError("train_stage1: empty dataset");
    const ParameterStore frozen_part = base.subset("base.");
    for (const auto& [name, e] : frozen_part.entries())
        if (!e.frozen) throw ContractError("train_stage1: base tensor '" + name + "' is not frozen");
    const DenoiserConfig cfg = config_from_store(base);
    const NoiseSchedule sched = default_schedule(cfg.timesteps);

    ParameterStore store = base;
    store.erase_prefix("dca.");
    init_dca(store, cfg, seed);
    Stage1Result result;
    result.loss_history = run_training(store, data.size(), hyper, derive_seed({seed, 0x57A1}),
                                       [&](Graph& g, ParamBinder& bind, std::size_t idx, Rng& rng) {
                                           return inpainting_loss(g, bind, cfg, sched, data[idx],
                                                                  AdapterMode{.dca = true}, hyper.cond_dropout, rng);
                                       });
    result.dca = store.subset("dca.");
    return result;
}

}  // namespace padapter
