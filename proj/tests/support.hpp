#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "padapter/backbone.hpp"
#include "padapter/rng.hpp"
#include "padapter/tensor.hpp"

namespace testutil {

using padapter::Rng;
using padapter::Tensor;

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a.at(i, k)) * b.at(k, j);
            c.at(i, j) = static_cast<double>(s);
        }
    return c;
}

// Single-head softmax(Q K^T / sqrt(d)) V by explicit loops in extended precision.
inline Tensor loop_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
    Tensor out({n, v.cols()});
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<long double> s(m);
        long double mx = -INFINITY;
        for (std::size_t j = 0; j < m; ++j) {
            long double acc = 0;
            for (std::size_t c = 0; c < d; ++c) acc += static_cast<long double>(q.at(i, c)) * k.at(j, c);
            s[j] = acc / std::sqrt(static_cast<long double>(d));
            mx = std::max(mx, s[j]);
        }
        long double z = 0;
        for (auto& x : s) {
            x = std::exp(x - mx);
            z += x;
        }
        for (std::size_t c = 0; c < v.cols(); ++c) {
            long double acc = 0;
            for (std::size_t j = 0; j < m; ++j) acc += s[j] / z * v.at(j, c);
            out.at(i, c) = static_cast<double>(acc);
        }
    }
    return out;
}

inline Tensor loop_add(const Tensor& a, const Tensor& b) {
    Tensor c(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
    return c;
}

// Central finite difference of f with respect to every entry of x, compared
// against the analytic gradient; returns the worst relative error using
// max(|a|, |n|, 1e-6) as denominator.
inline double fd_relative_error(Tensor& x, const Tensor& analytic, const std::function<double()>& f,
                                double h = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f();
        x[i] = keep - h;
        const double fm = f();
        x[i] = keep;
        const double num = (fp - fm) / (2 * h);
        const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-6});
        worst = std::max(worst, std::abs(num - analytic[i]) / denom);
    }
    return worst;
}

// Multi-head attention by explicit loops: head h uses columns [h*dh, (h+1)*dh).
inline Tensor loop_mha(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    const std::size_t dh = q.cols() / heads;
    Tensor out({q.rows(), v.cols()});
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh({q.rows(), dh}), kh({k.rows(), dh}), vh({v.rows(), dh});
        for (std::size_t c = 0; c < dh; ++c) {
            for (std::size_t i = 0; i < q.rows(); ++i) qh.at(i, c) = q.at(i, h * dh + c);
            for (std::size_t j = 0; j < k.rows(); ++j) {
                kh.at(j, c) = k.at(j, h * dh + c);
                vh.at(j, c) = v.at(j, h * dh + c);
            }
        }
        const Tensor oh = loop_attention(qh, kh, vh);
        for (std::size_t i = 0; i < q.rows(); ++i)
            for (std::size_t c = 0; c < dh; ++c) out.at(i, h * dh + c) = oh.at(i, c);
    }
    return out;
}

struct LoopTriple {
    Tensor wq, wk, wv;
};

// Dual-context path: Z + Attn(Q, Z' Wk, Z' Wv) with Z' = Attn([z (1-m)] Wq', K, V).
inline Tensor loop_dca(const Tensor& z, const Tensor& c, const std::vector<double>& m, const LoopTriple& base,
                       const LoopTriple& ad, std::size_t heads) {
    Tensor zm(z.shape());
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) zm.at(i, j) = z.at(i, j) * (1.0 - m[i]);
    const Tensor q = naive_matmul(z, base.wq), k = naive_matmul(c, base.wk), v = naive_matmul(c, base.wv);
    const Tensor zbase = loop_mha(q, k, v, heads);
    const Tensor zp = loop_mha(naive_matmul(zm, ad.wq), k, v, heads);
    const Tensor zpp = loop_mha(q, naive_matmul(zp, ad.wk), naive_matmul(zp, ad.wv), heads);
    return loop_add(zbase, zpp);
}

// Reference path: Attn(z Wq*, zr Wk, zr Wv) added to the DCA (or plain base) output.
inline Tensor loop_rpa(const Tensor& z, const Tensor& c, const std::vector<double>& m, const LoopTriple& base,
                       const LoopTriple* dca, const Tensor& zr, const Tensor& wk, const Tensor& wv,
                       std::size_t heads) {
    const Tensor q = naive_matmul(z, base.wq);
    const Tensor main = dca ? loop_dca(z, c, m, base, *dca, heads)
                            : loop_mha(q, naive_matmul(c, base.wk), naive_matmul(c, base.wv), heads);
    return loop_add(loop_mha(q, naive_matmul(zr, wk), naive_matmul(zr, wv), heads), main);
}

// Worst finite-difference relative error over every store entry whose name
// starts with one of `prefixes`; `build` must be deterministic.
inline double store_gradient_error(padapter::ParameterStore& store, const std::vector<std::string>& prefixes,
                                   const std::function<padapter::NodeId(padapter::Graph&, padapter::ParamBinder&)>& build,
                                   std::size_t* checked = nullptr) {
    padapter::Graph g;
    padapter::ParamBinder bind(g, store, true);
    const auto grads = g.backward(build(g, bind));
    const auto tracked = bind.tracked();
    auto loss = [&] {
        padapter::Graph h;
        padapter::ParamBinder b(h, store, false);
        return h.value(build(h, b))[0];
    };
    double worst = 0.0;
    std::size_t n = 0;
    for (const auto& [name, node] : tracked) {
        bool want = false;
        for (const auto& p : prefixes) want |= name.rfind(p, 0) == 0;
        if (!want) continue;
        worst = std::max(worst, fd_relative_error(store.mutable_value(name), grads.at(node), loss));
        n += store.get(name).size();
    }
    if (checked) *checked = n;
    return worst;
}

inline padapter::DenoiserConfig tiny_config() {
    padapter::DenoiserConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.channels = 3;
    cfg.token = 4;
    cfg.dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.max_prompt = 12;
    cfg.ffn_mult = 2;
    cfg.timesteps = 20;
    return cfg;
}

inline padapter::DenoiserConfig small_config() {
    padapter::DenoiserConfig cfg;
    cfg.height = 32;
    cfg.width = 32;
    cfg.token = 8;
    cfg.dim = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_prompt = 16;
    cfg.ffn_mult = 2;
    return cfg;
}

// Seeded base with a random output head so predictions are non-trivial.
inline padapter::ParameterStore live_model(const padapter::DenoiserConfig& cfg, std::uint64_t seed) {
    padapter::ParameterStore s = padapter::init_base(cfg, seed);
    Rng rng(seed + 1);
    s.set("base.out.w", Tensor::randn(s.get("base.out.w").shape(), rng, 0.3), true);
    s.freeze_all();
    return s;
}

// Overwrites every entry under `prefix` with Gaussian values of the given scale.
inline void randomize(padapter::ParameterStore& s, const std::string& prefix, double stddev, std::uint64_t seed) {
    Rng rng(seed);
    const padapter::ParameterStore snapshot = s;
    for (const auto& [name, e] : snapshot.entries())
        if (name.rfind(prefix, 0) == 0) s.mutable_value(name) = Tensor::randn(e.value.shape(), rng, stddev);
}

inline padapter::Tensor random_mask(std::size_t h, std::size_t w, Rng& rng, std::uint64_t one_in = 3) {
    Tensor m({1, h, w});
    for (auto& v : m.storage()) v = rng.below(one_in) == 0 ? 1.0 : 0.0;
    return m;
}

inline padapter::Tensor uniform_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
    Tensor t({c, h, w});
    for (auto& v : t.storage()) v = rng.uniform();
    return t;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("padapter_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
