#include <cmath>
#include <limits>

#include "doctest.h"
#include "padapter/control.hpp"
#include "padapter/data_synth.hpp"
#include "padapter/embedder.hpp"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"
#include "padapter/rpa.hpp"
#include "padapter/training.hpp"
#include "support.hpp"

using namespace padapter;

namespace {

struct Instance {
    FeatureMap z;
    TextEmbedding c;
    TokenMask m;
    AttentionTriple base, dca;
    Tensor zr;
    AttentionPair rpa;
    std::size_t heads = 1;
};

Instance random_instance(Rng& rng) {
    Instance in;
    in.heads = 1 + rng.below(2);
    const std::size_t d = in.heads * (1 + rng.below(4));
    const std::size_t rows = 1 + rng.below(4), cols = 1 + rng.below(4);
    const std::size_t n = rows * cols, nt = 1 + rng.below(5), nr = 1 + rng.below(16);
    in.z = {Tensor::randn({n, d}, rng), rows, cols};
    in.c = {Tensor::randn({nt, d}, rng), std::vector<bool>(nt, false)};
    in.m = {std::vector<double>(n), rows, cols};
    for (auto& v : in.m.values) v = rng.below(2) ? 1.0 : 0.0;
    auto mat = [&] { return Tensor::randn({d, d}, rng, 0.7); };
    in.base = {mat(), mat(), mat()};
    in.dca = {mat(), mat(), mat()};
    in.zr = Tensor::randn({nr, d}, rng);
    in.rpa = {mat(), mat()};
    return in;
}

Tensor run(const Instance& in, bool with_dca) {
    return rpa_forward(in.z, in.c, in.m, in.base, with_dca ? &in.dca : nullptr, in.zr, in.rpa, in.heads).tokens;
}

Tensor oracle(const Instance& in, bool with_dca) {
    const testutil::LoopTriple b{in.base.wq, in.base.wk, in.base.wv}, a{in.dca.wq, in.dca.wk, in.dca.wv};
    return testutil::loop_rpa(in.z.tokens, in.c.vectors, in.m.values, b, with_dca ? &a : nullptr, in.zr, in.rpa.wk,
                              in.rpa.wv, in.heads);
}

long double oracle_cos(const std::vector<double>& a, const std::vector<double>& b) {
    long double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<long double>(a[i]) * b[i];
        aa += static_cast<long double>(a[i]) * a[i];
        bb += static_cast<long double>(b[i]) * b[i];
    }
    if (aa == 0 || bb == 0) return -std::numeric_limits<long double>::infinity();
    return ab / std::sqrt(aa * bb);
}

// Exhaustive argmax with lowest-index tie breaking; ties are compared within 1e-12.
std::size_t oracle_select(const std::vector<std::vector<double>>& cands, const std::vector<double>& q,
                          std::size_t self) {
    std::vector<long double> sims(cands.size());
    long double best = -std::numeric_limits<long double>::infinity();
    for (std::size_t l = 0; l < cands.size(); ++l) {
        if (l == self) continue;
        sims[l] = oracle_cos(cands[l], q);
        best = std::max(best, sims[l]);
    }
    for (std::size_t l = 0; l < cands.size(); ++l) {
        if (l == self) continue;
        if (std::isinf(best) ? sims[l] == best : sims[l] >= best - 1e-12L) return l;
    }
    return cands.size();
}

ParameterStore stage1_model(const DenoiserConfig& cfg, std::uint64_t seed) {
    ParameterStore s = testutil::live_model(cfg, seed);
    init_dca(s, cfg, seed);
    testutil::randomize(s, "dca.", 0.3, seed + 5);
    s.freeze_all();
    return s;
}

}  // namespace

TEST_CASE("rpa_forward matches the explicit-loop oracle on 100 random instances") {
    Rng rng(1);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Instance in = random_instance(rng);
        worst = std::max(worst, max_abs_diff(run(in, true), oracle(in, true)));
        worst = std::max(worst, max_abs_diff(run(in, false), oracle(in, false)));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("zero reference values leave the dca output unchanged") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Instance in = random_instance(rng);
        in.rpa.wv = Tensor(in.rpa.wv.shape());
        CHECK(run(in, true) == dca_forward(in.z, in.c, in.m, in.base, in.dca, in.heads).tokens);
        CHECK(run(in, false) == base_attention(in.z, in.c, in.base.wq, in.base.wk, in.base.wv, in.heads).tokens);
    }
}

TEST_CASE("a single reference token is returned for every query") {
    Rng rng(3);
    Instance in = random_instance(rng);
    in.zr = Tensor::randn({1, in.z.tokens.cols()}, rng);
    const Tensor with = run(in, true);
    const Tensor v = testutil::naive_matmul(in.zr, in.rpa.wv);
    in.rpa.wv = Tensor(in.rpa.wv.shape());
    const Tensor without = run(in, true);
    for (std::size_t i = 0; i < with.rows(); ++i)
        for (std::size_t j = 0; j < with.cols(); ++j)
            CHECK(with.at(i, j) - without.at(i, j) == doctest::Approx(v.at(0, j)).epsilon(1e-10));
}

TEST_CASE("reference features with the wrong width are a shape error") {
    Rng rng(4);
    Instance in = random_instance(rng);
    in.zr = Tensor({2, in.z.tokens.cols() + 1});
    CHECK_THROWS_AS(run(in, true), ShapeError);
}

TEST_CASE("init_rpa shapes") {
    const DenoiserConfig cfg = testutil::small_config();
    ParameterStore s;
    init_rpa(s, cfg, 3);
    CHECK(s.size() == 2 * cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        CHECK(s.get(layer_prefix("rpa", l) + "wv") == Tensor({cfg.dim, cfg.dim}));
        CHECK(s.get(layer_prefix("rpa", l) + "wk") != Tensor({cfg.dim, cfg.dim}));
    }
    CHECK(reference_timestep(cfg) == cfg.timesteps / 2);
}

TEST_CASE("reference extraction equals an instrumented re-run of the stage-1 forward pass") {
    const DenoiserConfig cfg = testutil::small_config();
    const ParameterStore s1 = stage1_model(cfg, 5);
    Rng rng(6);
    const Tensor mask = testutil::random_mask(cfg.height, cfg.width, rng);
    const Tensor ref = apply_mask(testutil::uniform_image(3, cfg.height, cfg.width, rng), mask);
    const Tokens prompt = {vocab::id("green"), vocab::id("blobs")};
    const int t = reference_timestep(cfg);
    const ReferenceFeatures f = extract_reference_features(ref, mask, prompt, s1, cfg, t, 42, 3);
    CHECK(f.layers.size() == cfg.adapted_list().size());
    CHECK(f.source_patch == 3);
    for (const auto& z : f.layers) CHECK(z.shape() == Shape{cfg.grid_rows() * cfg.grid_cols(), cfg.dim});
    const ReferenceFeatures again = extract_reference_features(ref, mask, prompt, s1, cfg, t, 42, 3);
    for (std::size_t l = 0; l < f.layers.size(); ++l) CHECK(f.layers[l] == again.layers[l]);

    // Instrumented oracle: same noisy input, hooks on every adapted cross-attention output.
    Rng noise(derive_seed({42, 0x2EF0}));
    const Tensor y_t = forward_diffuse(default_schedule(cfg.timesteps), ref, t, Tensor::randn(ref.shape(), noise));
    DenoiseRequest req;
    req.y_t = &y_t;
    req.timestep = t;
    req.prompt = &prompt;
    req.mask = &mask;
    req.masked_image = &ref;
    Capture cap;
    denoise(s1, cfg, req, {.dca = true}, &cap);
    REQUIRE(cap.cross_outputs.size() == f.layers.size());
    for (std::size_t l = 0; l < f.layers.size(); ++l) CHECK(cap.cross_outputs[l] == f.layers[l]);

    DenoiserConfig partial = cfg;
    partial.adapter_layers = 0b01;
    ParameterStore p1 = testutil::live_model(partial, 5);
    init_dca(p1, partial, 5);
    CHECK(extract_reference_features(ref, mask, prompt, p1, partial, t, 42).layers.size() == 1);
    CHECK_THROWS_AS(extract_reference_features(ref, mask, prompt, testutil::live_model(cfg, 5), cfg, t, 42),
                    ContractError);
}

TEST_CASE("selection equals the exhaustive oracle on 200 random candidate sets with ties") {
    Rng rng(7);
    std::size_t agree = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(15);
        const std::size_t dim = 1 + rng.below(6);
        std::vector<std::vector<double>> cands(n, std::vector<double>(dim));
        for (auto& c : cands)
            for (auto& v : c) v = rng.normal();
        std::vector<double> q(dim);
        for (auto& v : q) v = rng.normal();
        const std::size_t self = rng.below(n + 1);  // n = no exclusion
        if (trial % 3 == 0) {
            // Duplicate the query direction at two positions: an exact tie at the maximum.
            const std::size_t a = rng.below(n), b = rng.below(n);
            for (std::size_t i = 0; i < dim; ++i) cands[a][i] = cands[b][i] = 2.0 * q[i];
        }
        if (trial % 5 == 0) {
            auto& zero = cands[rng.below(n)];
            std::fill(zero.begin(), zero.end(), 0.0);
        }
        if (trial % 7 == 0)
            for (auto& c : cands) std::fill(c.begin(), c.end(), 0.0);
        const std::size_t want = oracle_select(cands, q, self);
        if (want == n) continue;
        const std::size_t got = select_reference_embedded(cands, q, self);
        agree += got == want;
        CHECK(got == want);
    }
    CHECK(agree > 150);
}

TEST_CASE("selection examples and invariance") {
    Rng rng(8);
    const Tensor y = testutil::uniform_image(3, 16, 16, rng);
    Tensor other({3, 16, 16});
    for (std::size_t x = 0; x < 16; ++x)
        for (std::size_t r = 0; r < 16; ++r) other.at(1, r, x) = x % 2;
    const std::vector<Tensor> cands = {other, y, y};
    CHECK(select_reference(y, cands, 0) == 1);
    CHECK(select_reference(y, cands, 1) == 2);

    std::vector<std::vector<double>> emb;
    for (int i = 0; i < 10; ++i) {
        std::vector<double> v(8);
        for (auto& x : v) x = rng.normal();
        emb.push_back(v);
    }
    std::vector<double> q(8);
    for (auto& x : q) x = rng.normal();
    const std::size_t pick = select_reference_embedded(emb, q, 4);
    for (double s : {3.0, 1e-6, 1e6}) {
        auto scaled = emb;
        for (auto& v : scaled)
            for (auto& x : v) x *= s;
        CHECK(select_reference_embedded(scaled, q, 4) == pick);
    }
    const std::vector<std::vector<double>> none;
    CHECK_THROWS_AS(select_reference_embedded(none, q, 0), ContractError);
    CHECK_THROWS_AS(select_reference_embedded(std::vector<std::vector<double>>{q}, q, 0), ContractError);
}

TEST_CASE("image-level selection equals the oracle over embedded patches") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng.below(7);
        std::vector<Tensor> patches;
        std::vector<std::vector<double>> emb;
        for (std::size_t i = 0; i < n; ++i) {
            TextureSpec spec;
            spec.family = static_cast<Family>(rng.below(4));
            spec.orientation = static_cast<Orientation>(rng.below(3));
            spec.frequency = 2 + static_cast<int>(rng.below(6));
            spec.color_a = rng.below(12);
            spec.color_b = rng.below(12);
            patches.push_back(render_texture(spec, 16, 16));
            emb.push_back(embed_image(patches.back()).values);
        }
        const std::size_t self = rng.below(n);
        const Tensor& query = patches[rng.below(n)];
        CHECK(select_reference(query, patches, self) == oracle_select(emb, embed_image(query).values, self));
    }
}

TEST_CASE("rpa and control gradients match finite differences on a one-layer model") {
    const DenoiserConfig cfg = testutil::tiny_config();
    ParameterStore s = stage1_model(cfg, 10);
    init_rpa(s, cfg, 10);
    init_control(s, cfg);
    testutil::randomize(s, "rpa.", 0.5, 11);
    testutil::randomize(s, "ctrl.", 0.05, 12);
    Rng rng(13);
    const Tensor mask = testutil::random_mask(cfg.height, cfg.width, rng);
    const Tensor target = testutil::uniform_image(3, cfg.height, cfg.width, rng);
    const Tensor degraded = degrade(target, 3);
    const Tensor ref_mask = testutil::random_mask(cfg.height, cfg.width, rng);
    const Tensor ref = apply_mask(testutil::uniform_image(3, cfg.height, cfg.width, rng), ref_mask);
    const Tokens prompt = {vocab::id("red"), vocab::kSep, vocab::id("checker")};
    const ReferenceFeatures refs = extract_reference_features(ref, ref_mask, prompt, s, cfg, 10, 1);
    const NoiseSchedule sched = default_schedule(cfg.timesteps);
    const Tensor eps = Tensor::randn(target.shape(), rng);
    const Tensor y_t = forward_diffuse(sched, target, 7, eps);
    const Tensor masked = apply_mask(target, mask);
    std::size_t checked = 0;
    const double err = testutil::store_gradient_error(
        s, {"rpa.", "ctrl."},
        [&](Graph& g, ParamBinder& bind) {
            DenoiseRequest req;
            req.y_t = &y_t;
            req.timestep = 7;
            req.prompt = &prompt;
            req.mask = &mask;
            req.masked_image = &masked;
            req.refs = &refs;
            req.control_source = &degraded;
            const NodeId pred = build_denoiser(g, bind, cfg, req, {.dca = true, .rpa = true, .control = true});
            return g.mse(pred, g.constant(tokenize(eps, cfg.token)));
        },
        &checked);
    CHECK(checked == 2 * cfg.dim * cfg.dim + cfg.out_features() * cfg.dim);
    CHECK(err < 1e-4);
}

TEST_CASE("stage-2 training keeps base and dca frozen and lowers the loss") {
    const DenoiserConfig cfg = testutil::small_config();
    const auto data = training_examples(gen_items(200, cfg.height, 0.6, 5));
    ParameterStore s1 =
        pretrain_base(data, cfg, {.steps = 300, .batch = 8, .lr = 1e-3, .weight_decay = 0, .cond_dropout = 0.1}, 14);
    ParameterStore dca = train_stage1(s1, data, {.steps = 50, .batch = 8, .lr = 1e-4, .weight_decay = 0, .cond_dropout = 0.1}, 15).dca;
    dca.freeze_all();
    s1.merge(dca);
    const std::string base_hash = partition_hash(s1, "base."), dca_hash = partition_hash(s1, "dca.");
    const auto pairs = make_patch_pairs(gen_items(120, 2 * cfg.height, 0.6, 6), 7);
    const auto held = make_patch_pairs(gen_items(32, 2 * cfg.height, 0.6, 8), 9);

    const Stage2Result zero = train_stage2(s1, pairs, {.steps = 0}, 16);
    CHECK(zero.params.size() == 3 * cfg.layers);
    const TrainHyper hyper{.steps = 500, .batch = 8, .lr = 1e-3, .weight_decay = 0, .cond_dropout = 0.1};
    const Stage2Result r = train_stage2(s1, pairs, hyper, 16);
    CHECK(partition_hash(s1, "base.") == base_hash);
    CHECK(partition_hash(s1, "dca.") == dca_hash);
    CHECK_FALSE(r.params.has_prefix("base."));
    CHECK_FALSE(r.params.has_prefix("dca."));
    CHECK(r.params.get("rpa.l0.wv") != Tensor({cfg.dim, cfg.dim}));

    // Paired probe over fixed draws on held-out pairs.
    auto probe = [&](const ParameterStore& adapters) {
        ParameterStore m = s1;
        m.merge(adapters);
        const NoiseSchedule sched = default_schedule(cfg.timesteps);
        double total = 0.0;
        for (std::size_t i = 0; i < held.size(); ++i) {
            const auto& ex = held[i];
            const ReferenceFeatures refs = extract_reference_features(ex.reference, ex.reference_mask,
                                                                      ex.reference_prompt, s1, cfg,
                                                                      reference_timestep(cfg), i);
            for (std::uint64_t k = 0; k < 4; ++k) {
                Rng rng(derive_seed({88, i, k}));
                const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
                const Tensor eps = Tensor::randn(ex.target.shape(), rng);
                const Tensor y_t = forward_diffuse(sched, ex.target, t, eps);
                const Tensor masked = apply_mask(ex.target, ex.target_mask);
                DenoiseRequest req;
                req.y_t = &y_t;
                req.timestep = t;
                req.prompt = &ex.prompt;
                req.mask = &ex.target_mask;
                req.masked_image = &masked;
                req.refs = &refs;
                req.control_source = &ex.degraded;
                const Tensor pred = denoise(m, cfg, req, {.dca = true, .rpa = true, .control = true});
                total += [&] {
                    double se = 0;
                    for (std::size_t j = 0; j < pred.size(); ++j) se += (pred[j] - eps[j]) * (pred[j] - eps[j]);
                    return se / static_cast<double>(pred.size());
                }();
            }
        }
        return total / static_cast<double>(4 * held.size());
    };
    const double before = probe(zero.params), after = probe(r.params);
    INFO("held-out probe loss " << before << " -> " << after);
    CHECK(after < before);

    const Stage2Result ctrl_only = train_stage2(s1, pairs, {.steps = 2, .batch = 2}, 16, false);
    CHECK_FALSE(ctrl_only.params.has_prefix("rpa."));
    CHECK(ctrl_only.params.has_prefix("ctrl."));

    ParameterStore thawed = s1;
    thawed.set_frozen("dca.l0.wq", false);
    CHECK_THROWS_AS(train_stage2(thawed, pairs, {.steps = 1}, 16), ContractError);
    CHECK_THROWS_AS(train_stage2(s1, {}, {.steps = 1}, 16), ContractError);
}
