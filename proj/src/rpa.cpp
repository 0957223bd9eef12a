#include "padapter/rpa.hpp"

#include <cmath>
#include <limits>

#include "padapter/control.hpp"
#include "padapter/embedder.hpp"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"
#include "padapter/training.hpp"

namespace padapter {

NodeId rpa_attend(Graph& g, NodeId q, NodeId zr, const RpaLayerWeights& w, std::size_t heads) {
    return g.attention(q, g.matmul(zr, w.wk), g.matmul(zr, w.wv), heads);
}

NodeId rpa_forward(Graph& g, NodeId z, NodeId c, const TokenMask& m, const CrossAttentionWeights& base,
                   const DcaLayerWeights* dca, NodeId zr, const RpaLayerWeights& w, std::size_t heads) {
    if (g.value(zr).rank() != 2 || g.value(zr).cols() != g.value(z).cols())
        throw ShapeError("rpa_forward: reference features " + shape_str(g.value(zr).shape()) +
                         " do not match model dim");
    const NodeId z_main = dca ? dca_forward(g, z, c, m, base, *dca, heads) : base_attention(g, z, c, base, heads);
    const NodeId q = g.matmul(z, base.wq);
    return g.add(rpa_attend(g, q, zr, w, heads), z_main);
}

FeatureMap rpa_forward(const FeatureMap& z, const TextEmbedding& c, const TokenMask& m, const AttentionTriple& base,
                       const AttentionTriple* dca, const Tensor& zr, const AttentionPair& adapter, std::size_t heads) {
    Graph g;
    const CrossAttentionWeights bw{g.constant(base.wq), g.constant(base.wk), g.constant(base.wv)};
    std::optional<DcaLayerWeights> dw;
    if (dca) dw = DcaLayerWeights{g.constant(dca->wq), g.constant(dca->wk), g.constant(dca->wv)};
    const NodeId out = rpa_forward(g, g.constant(z.tokens), g.constant(c.vectors), m, bw, dw ? &*dw : nullptr,
                                   g.constant(zr), {g.constant(adapter.wk), g.constant(adapter.wv)}, heads);
    return {g.value(out), z.rows, z.cols};
}

void init_rpa(ParameterStore& store, const DenoiserConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0x52FA}));
    const std::size_t d = cfg.dim;
    for (std::size_t l : cfg.adapted_list()) {
        const std::string p = layer_prefix("rpa", l);
        store.set(p + "wk", Tensor::randn({d, d}, rng, 0.02), false);
        store.set(p + "wv", Tensor({d, d}), false);
    }
}

int reference_timestep(const DenoiserConfig& cfg) { return cfg.timesteps / 2; }

ReferenceFeatures extract_reference_features(const Tensor& ref_masked, const Tensor& ref_mask, const Tokens& prompt,
                                             const ParameterStore& stage1, const DenoiserConfig& cfg, int t,
                                             std::uint64_t noise_seed, std::size_t source_patch) {
    if (!has_dca(stage1, cfg)) throw ContractError("extract_reference_features: stage-1 model has no DCA weights");
    const NoiseSchedule sched = default_schedule(cfg.timesteps);
    Rng rng(derive_seed({noise_seed, 0x2EF0}));
    const Tensor y_t = forward_diffuse(sched, ref_masked, t, Tensor::randn(ref_masked.shape(), rng));
    DenoiseRequest req;
    req.y_t = &y_t;
    req.timestep = t;
    req.prompt = &prompt;
    req.mask = &ref_mask;
    req.masked_image = &ref_masked;
    Capture cap;
    denoise(stage1, cfg, req, AdapterMode{.dca = true}, &cap);
    return {std::move(cap.cross_outputs), source_patch};
}

// Similarities within this margin count as ties.
constexpr double kTieTolerance = 1e-12;

std::size_t select_reference_embedded(std::span<const std::vector<double>> candidates,
                                      const std::vector<double>& query, std::size_t self_index) {
    std::size_t best = candidates.size();
    double best_sim = 0.0;
    for (std::size_t l = 0; l < candidates.size(); ++l) {
        if (l == self_index) continue;
        const double sim = cosine_sim(query, candidates[l]);
        if (best == candidates.size() || sim > best_sim + kTieTolerance) {
            best = l;
            best_sim = sim;
        }
    }
    if (best == candidates.size()) throw ContractError("select_reference: no candidate other than the target patch");
    return best;
}

std::size_t select_reference(const Tensor& stage1_patch, std::span<const Tensor> masked_patches,
                             std::size_t self_index) {
    std::vector<std::vector<double>> emb;
    emb.reserve(masked_patches.size());
    for (std::size_t l = 0; l < masked_patches.size(); ++l)
        emb.push_back(l == self_index ? std::vector<double>{} : embed_image(masked_patches[l]).values);
    return select_reference_embedded(emb, embed_image(stage1_patch).values, self_index);
}

Stage2Result train_stage2(const ParameterStore& stage1, const std::vector<PatchPairExample>& data,
                          const TrainHyper& hyper, std::uint64_t seed, bool use_rpa) {
    if (data.empty()) throw ContractError("train_stage2: empty dataset");
    for (const char* ns : {"base.", "dca."}) {
        const ParameterStore part = stage1.subset(ns);
        for (const auto& [name, e] : part.entries())
            if (!e.frozen) throw ContractError("train_stage2: tensor '" + name + "' is not frozen");
    }
    const DenoiserConfig cfg = config_from_store(stage1);
    if (!has_dca(stage1, cfg)) throw ContractError("train_stage2: stage-1 model has no DCA weights");
    const NoiseSchedule sched = default_schedule(cfg.timesteps);

    ParameterStore store = stage1;
    store.erase_prefix("rpa.");
    store.erase_prefix("ctrl.");
    if (use_rpa) init_rpa(store, cfg, seed);
    init_control(store, cfg);

    // The stage-1 model is frozen, so each pair's reference features are fixed.
    std::vector<ReferenceFeatures> refs;
    if (use_rpa) {
        refs.reserve(data.size());
        for (std::size_t i = 0; i < data.size(); ++i)
            refs.push_back(extract_reference_features(data[i].reference, data[i].reference_mask,
                                                      data[i].reference_prompt, stage1, cfg, reference_timestep(cfg),
                                                      derive_seed({seed, 0x2EF1, i})));
    }
    const AdapterMode mode{.dca = true, .rpa = use_rpa, .control = true};
    Stage2Result result;
    result.loss_history = run_training(
        store, data.size(), hyper, derive_seed({seed, 0x57A2}), [&](Graph& g, ParamBinder& bind, std::size_t idx, Rng& rng) {
            const PatchPairExample& ex = data[idx];
            const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
            const Tensor eps = Tensor::randn(ex.target.shape(), rng);
            const Tensor x_t = forward_diffuse(sched, ex.target, t, eps);
            static const Tokens kEmpty;
            const bool drop = rng.uniform() < hyper.cond_dropout;
            const Tensor masked = apply_mask(ex.target, ex.target_mask);
            DenoiseRequest req;
            req.y_t = &x_t;
            req.timestep = t;
            req.prompt = drop ? &kEmpty : &ex.prompt;
            req.mask = &ex.target_mask;
            req.masked_image = &masked;
            req.refs = use_rpa ? &refs[idx] : nullptr;
            req.control_source = &ex.degraded;
            const NodeId pred = build_denoiser(g, bind, cfg, req, mode);
            return g.mse(pred, g.constant(tokenize(eps, cfg.token)));
        });
    result.params = store.subset("rpa.");
    result.params.merge(store.subset("ctrl."));
    return result;
}

}  // namespace padapter
