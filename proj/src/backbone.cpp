#include "padapter/backbone.hpp"

#include <cmath>

#include "padapter/control.hpp"
#include "padapter/dca.hpp"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"
#include "padapter/rpa.hpp"

namespace padapter {

namespace {

constexpr std::size_t kConfigFields = 12;
// Per-channel pixel skip terms: y_t, X_m, y_t * M, M, 1.
constexpr std::size_t kSkipTerms = 5;

void add_linear(ParameterStore& s, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                bool zero = false) {
    const double std = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    s.set(name + ".w", zero ? Tensor({in, out}) : Tensor::randn({in, out}, rng, std), false);
    s.set(name + ".b", Tensor({1, out}), false);
}

void add_matrix(ParameterStore& s, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    s.set(name, Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))), false);
}

void add_norm(ParameterStore& s, const std::string& name, std::size_t dim) {
    s.set(name + ".g", Tensor({1, dim}, 1.0), false);
    s.set(name + ".b", Tensor({1, dim}), false);
}

NodeId linear(Graph& g, ParamBinder& bind, NodeId x, const std::string& name) {
    return g.add_row(g.matmul(x, bind(name + ".w")), bind(name + ".b"));
}

NodeId norm(Graph& g, ParamBinder& bind, NodeId x, const std::string& name) {
    return g.layer_norm(x, bind(name + ".g"), bind(name + ".b"));
}

Tensor timestep_embedding(int t, std::size_t dim, int T) {
    Tensor e({1, dim});
    const std::size_t half = dim / 2;
    const double pos = static_cast<double>(t) * 1000.0 / static_cast<double>(T);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e[i] = std::sin(pos * freq);
        e[half + i] = std::cos(pos * freq);
    }
    return e;
}

// Per-pixel linear path whose channel-wise coefficients are predicted from the
// time embedding; carries pixel-level detail past the token bottleneck.
NodeId pixel_skip(Graph& g, ParamBinder& bind, const DenoiserConfig& cfg, const DenoiseRequest& req, NodeId temb) {
    const Tensor& y = *req.y_t;
    const std::size_t c = cfg.channels, h = height(y), w = width(y), area = cfg.token * cfg.token;
    Tensor y_in_hole(y.shape()), mask_c(y.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * w; ++i) {
            y_in_hole[ch * h * w + i] = y[ch * h * w + i] * (*req.mask)[i];
            mask_c[ch * h * w + i] = (*req.mask)[i];
        }
    const Tensor terms[kSkipTerms] = {tokenize(y, cfg.token), tokenize(*req.masked_image, cfg.token),
                                      tokenize(y_in_hole, cfg.token), tokenize(mask_c, cfg.token),
                                      Tensor({(h / cfg.token) * (w / cfg.token), c * area}, 1.0)};
    const NodeId coef = linear(g, bind, temb, "base.skip");
    const NodeId ones = g.constant(Tensor({terms[0].rows(), 1}, 1.0));
    NodeId out = 0;
    for (std::size_t j = 0; j < kSkipTerms; ++j) {
        Tensor select({kSkipTerms * c, c * area});
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < area; ++p) select.at(ch * kSkipTerms + j, ch * area + p) = 1.0;
        const NodeId spread = g.matmul(ones, g.matmul(coef, g.constant(std::move(select))));
        const NodeId term = g.mul(g.constant(terms[j]), spread);
        out = j == 0 ? term : g.add(out, term);
    }
    return out;
}

void check_request(const DenoiserConfig& cfg, const DenoiseRequest& req) {
    if (!req.y_t || !req.masked_image) throw ContractError("denoise: y_t and masked image are required");
    if (!req.mask) throw ContractError("denoise: mask is required");
    const Tensor& y = *req.y_t;
    require_image(y, "denoise");
    if (channels(y) != cfg.channels)
        throw ShapeError("denoise: expected " + std::to_string(cfg.channels) + " channels, got " +
                         shape_str(y.shape()));
    if (height(y) > cfg.height || width(y) > cfg.width || height(y) % cfg.token || width(y) % cfg.token)
        throw GeometryError("denoise: input " + shape_str(y.shape()) + " must fit " + std::to_string(cfg.height) +
                            "x" + std::to_string(cfg.width) + " and divide by token size " +
                            std::to_string(cfg.token));
    require_same_shape(y, *req.masked_image, "denoise");
    require_binary_mask(*req.mask, "denoise");
    if (height(*req.mask) != height(y) || width(*req.mask) != width(y))
        throw ShapeError("denoise: mask " + shape_str(req.mask->shape()) + " vs image " + shape_str(y.shape()));
    if (req.timestep < 0 || req.timestep >= cfg.timesteps)
        throw RangeError("denoise: timestep " + std::to_string(req.timestep) + " out of range");
}

}  // namespace

void DenoiserConfig::validate() const {
    if (token == 0 || height % token || width % token)
        throw ContractError("DenoiserConfig: image size must be divisible by token size");
    if (heads == 0 || dim % heads || dim % 2) throw ContractError("DenoiserConfig: dim must be even and divisible by heads");
    if (layers > 24) throw ContractError("DenoiserConfig: at most 24 layers");
    if (channels == 0 || layers == 0 || max_prompt == 0 || ffn_mult == 0 || timesteps < 1)
        throw ContractError("DenoiserConfig: zero-sized field");
}

std::size_t DenoiserConfig::vocab_size() const { return vocab ? vocab : vocab::size(); }

std::vector<std::size_t> DenoiserConfig::adapted_list() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < layers; ++l)
        if (adapted(l)) out.push_back(l);
    return out;
}

DenoiserConfig config_from_store(const ParameterStore& store) {
    const Tensor& t = store.get("base.config");
    if (t.size() != kConfigFields) throw FormatError("base.config has " + std::to_string(t.size()) + " fields");
    auto field = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
    DenoiserConfig cfg;
    cfg.height = field(0);
    cfg.width = field(1);
    cfg.channels = field(2);
    cfg.token = field(3);
    cfg.dim = field(4);
    cfg.layers = field(5);
    cfg.heads = field(6);
    cfg.vocab = field(7);
    cfg.max_prompt = field(8);
    cfg.ffn_mult = field(9);
    cfg.timesteps = static_cast<int>(t[10]);
    cfg.adapter_layers = static_cast<std::uint32_t>(t[11]);
    cfg.validate();
    return cfg;
}

ParameterStore init_base(const DenoiserConfig& cfg_in, std::uint64_t seed) {
    DenoiserConfig cfg = cfg_in;
    cfg.validate();
    const std::size_t d = cfg.dim;
    Rng rng(derive_seed({seed, 0xBA5E}));
    ParameterStore s;
    s.set("base.config",
          Tensor({kConfigFields},
                 std::vector<double>{double(cfg.height), double(cfg.width), double(cfg.channels), double(cfg.token),
                                     double(d), double(cfg.layers), double(cfg.heads), double(cfg.vocab_size()),
                                     double(cfg.max_prompt), double(cfg.ffn_mult), double(cfg.timesteps),
                                     double(cfg.adapter_layers & ((1u << cfg.layers) - 1u))}),
          true);
    add_linear(s, "base.embed", cfg.in_features(), d, rng);
    s.set("base.pos", Tensor::randn({cfg.grid_rows() * cfg.grid_cols(), d}, rng, 0.5), false);
    add_linear(s, "base.time", d, d, rng);
    s.set("base.text.table", Tensor::randn({cfg.vocab_size(), d}, rng, 1.0), false);
    s.set("base.text.pos", Tensor::randn({cfg.max_prompt, d}, rng, 0.1), false);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = layer_prefix("base", l);
        add_norm(s, p + "ln1", d);
        for (const char* m : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) add_matrix(s, p + m, d, d, rng);
        add_norm(s, p + "ln2", d);
        for (const char* m : {"cross.wq", "cross.wk", "cross.wv", "cross.wo"}) add_matrix(s, p + m, d, d, rng);
        add_norm(s, p + "ln3", d);
        add_linear(s, p + "ff1", d, d * cfg.ffn_mult, rng);
        add_linear(s, p + "ff2", d * cfg.ffn_mult, d, rng);
    }
    add_norm(s, "base.out.ln", d);
    add_linear(s, "base.out", d, cfg.out_features(), rng, /*zero=*/true);
    add_linear(s, "base.skip", d, kSkipTerms * cfg.channels, rng, /*zero=*/true);
    return s;
}

std::string layer_prefix(const char* ns, std::size_t layer) {
    return std::string(ns) + ".l" + std::to_string(layer) + ".";
}

NodeId ParamBinder::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool tracked = track_ && !store_.frozen(name);
    const NodeId id = g_.leaf(store_.get(name), tracked);
    bound_.emplace(name, id);
    if (tracked) tracked_.emplace(name, id);
    return id;
}

Tensor tokenize(const Tensor& img, std::size_t token) {
    require_image(img, "tokenize");
    const std::size_t c = channels(img), h = height(img), w = width(img);
    if (h % token || w % token) throw GeometryError("tokenize: " + shape_str(img.shape()) + " not divisible by token");
    const std::size_t rows = h / token, cols = w / token, feat = token * token * c;
    Tensor out({rows * cols, feat});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q) {
            double* dst = out.data() + (r * cols + q) * feat;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t dy = 0; dy < token; ++dy)
                    for (std::size_t dx = 0; dx < token; ++dx) *dst++ = img.at(ch, r * token + dy, q * token + dx);
        }
    return out;
}

Tensor untokenize(const Tensor& tokens, std::size_t c, std::size_t h, std::size_t w, std::size_t token) {
    const std::size_t rows = h / token, cols = w / token, feat = token * token * c;
    if (tokens.rank() != 2 || tokens.rows() != rows * cols || tokens.cols() != feat)
        throw ShapeError("untokenize: " + shape_str(tokens.shape()) + " does not match image geometry");
    Tensor img({c, h, w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q) {
            const double* src = tokens.data() + (r * cols + q) * feat;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t dy = 0; dy < token; ++dy)
                    for (std::size_t dx = 0; dx < token; ++dx) img.at(ch, r * token + dy, q * token + dx) = *src++;
        }
    return img;
}

NodeId encode_text(Graph& g, ParamBinder& bind, const Tokens& prompt, const DenoiserConfig& cfg) {
    if (prompt.size() > cfg.max_prompt)
        throw ContractError("encode_text: prompt has " + std::to_string(prompt.size()) + " tokens, max " +
                            std::to_string(cfg.max_prompt));
    std::vector<std::size_t> ids(cfg.max_prompt, vocab::kPad);
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        if (prompt[i] >= cfg.vocab_size() || prompt[i] == vocab::kPad)
            throw ContractError("encode_text: token id " + std::to_string(prompt[i]) + " outside vocabulary");
        ids[i] = prompt[i];
    }
    const NodeId rows = g.gather_rows(bind("base.text.table"), std::move(ids));
    return g.add(rows, bind("base.text.pos"));
}

TextEmbedding encode_text(const Tokens& prompt, const ParameterStore& store, const DenoiserConfig& cfg) {
    Graph g;
    ParamBinder bind(g, store, false);
    TextEmbedding e;
    e.vectors = g.value(encode_text(g, bind, prompt, cfg));
    e.padded.assign(cfg.max_prompt, true);
    for (std::size_t i = 0; i < prompt.size(); ++i) e.padded[i] = false;
    return e;
}

NodeId base_attention(Graph& g, NodeId z, NodeId c, const CrossAttentionWeights& w, std::size_t heads) {
    const NodeId q = g.matmul(z, w.wq);
    const NodeId k = g.matmul(c, w.wk);
    const NodeId v = g.matmul(c, w.wv);
    return g.attention(q, k, v, heads);
}

FeatureMap base_attention(const FeatureMap& z, const TextEmbedding& c, const Tensor& wq, const Tensor& wk,
                          const Tensor& wv, std::size_t heads) {
    if (z.tokens.cols() != c.vectors.cols())
        throw ShapeError("base_attention: feature dim " + std::to_string(z.tokens.cols()) + " vs text dim " +
                         std::to_string(c.vectors.cols()));
    Graph g;
    const NodeId out = base_attention(g, g.constant(z.tokens), g.constant(c.vectors),
                                      {g.constant(wq), g.constant(wk), g.constant(wv)}, heads);
    return {g.value(out), z.rows, z.cols};
}

NodeId build_denoiser(Graph& g, ParamBinder& bind, const DenoiserConfig& cfg, const DenoiseRequest& req,
                      const AdapterMode& mode, Capture* capture) {
    check_request(cfg, req);
    const Tensor& y = *req.y_t;
    const std::size_t h = height(y), w = width(y);
    const std::size_t rows = h / cfg.token, cols = w / cfg.token, n = rows * cols;
    const auto adapted = cfg.adapted_list();
    if (mode.rpa && (!req.refs || req.refs->layers.size() != adapted.size()))
        throw ContractError("denoise: RPA enabled but reference features missing for some adapted layer");
    if (mode.control && !req.control_source) throw ContractError("denoise: control enabled without a source patch");

    // Channel-concatenated conditioning (y_t, X_m, M), tokenized.
    const std::size_t c = cfg.channels;
    Tensor input({2 * c + 1, h, w});
    std::copy(y.data(), y.data() + y.size(), input.data());
    std::copy(req.masked_image->data(), req.masked_image->data() + y.size(), input.data() + y.size());
    std::copy(req.mask->data(), req.mask->data() + h * w, input.data() + 2 * y.size());
    NodeId x = linear(g, bind, g.constant(tokenize(input, cfg.token)), "base.embed");

    if (mode.positional) {
        std::vector<std::size_t> pos(n);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t q = 0; q < cols; ++q) pos[r * cols + q] = r * cfg.grid_cols() + q;
        x = g.add(x, g.gather_rows(bind("base.pos"), std::move(pos)));
    }
    const NodeId temb =
        linear(g, bind, g.constant(timestep_embedding(req.timestep, cfg.dim, cfg.timesteps)), "base.time");
    x = g.add_row(x, temb);

    static const Tokens kEmpty;
    const NodeId text = encode_text(g, bind, req.prompt ? *req.prompt : kEmpty, cfg);
    const TokenMask tmask = mask_to_tokens(*req.mask, cfg.token);
    const NodeId ctrl_src = mode.control ? g.constant(tokenize(*req.control_source, cfg.token)) : 0;
    if (mode.control && (height(*req.control_source) != h || width(*req.control_source) != w))
        throw ShapeError("denoise: control source must match the input geometry");

    std::size_t adapted_idx = 0;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = layer_prefix("base", l);
        if (mode.control) x = g.add(x, control_feature(g, bind, ctrl_src, l));

        const NodeId a_in = norm(g, bind, x, p + "ln1");
        const NodeId sa = g.attention(g.matmul(a_in, bind(p + "attn.wq")), g.matmul(a_in, bind(p + "attn.wk")),
                                      g.matmul(a_in, bind(p + "attn.wv")), cfg.heads);
        x = g.add(x, g.matmul(sa, bind(p + "attn.wo")));

        const NodeId z = norm(g, bind, x, p + "ln2");
        const CrossAttentionWeights cw{bind(p + "cross.wq"), bind(p + "cross.wk"), bind(p + "cross.wv")};
        NodeId zc;
        if (cfg.adapted(l)) {
            const std::string dp = layer_prefix("dca", l);
            std::optional<DcaLayerWeights> dw;
            if (mode.dca) dw = DcaLayerWeights{bind(dp + "wq"), bind(dp + "wk"), bind(dp + "wv")};
            if (mode.rpa) {
                const std::string rp = layer_prefix("rpa", l);
                const NodeId zr = g.constant(req.refs->layers[adapted_idx]);
                zc = rpa_forward(g, z, text, tmask, cw, dw ? &*dw : nullptr, zr, {bind(rp + "wk"), bind(rp + "wv")},
                                 cfg.heads);
            } else if (dw) {
                zc = dca_forward(g, z, text, tmask, cw, *dw, cfg.heads);
            } else {
                zc = base_attention(g, z, text, cw, cfg.heads);
            }
            if (capture) capture->cross_outputs.push_back(g.value(zc));
            ++adapted_idx;
        } else {
            zc = base_attention(g, z, text, cw, cfg.heads);
        }
        x = g.add(x, g.matmul(zc, bind(p + "cross.wo")));

        const NodeId f_in = norm(g, bind, x, p + "ln3");
        x = g.add(x, linear(g, bind, g.gelu(linear(g, bind, f_in, p + "ff1")), p + "ff2"));
    }
    return g.add(linear(g, bind, norm(g, bind, x, "base.out.ln"), "base.out"), pixel_skip(g, bind, cfg, req, temb));
}

Tensor denoise(const ParameterStore& store, const DenoiserConfig& cfg, const DenoiseRequest& req,
               const AdapterMode& mode, Capture* capture) {
    Graph g;
    ParamBinder bind(g, store, false);
    const NodeId out = build_denoiser(g, bind, cfg, req, mode, capture);
    return untokenize(g.value(out), cfg.channels, height(*req.y_t), width(*req.y_t), cfg.token);
}

}  // namespace padapter
