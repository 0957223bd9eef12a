#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "padapter/dataset.hpp"
#include "padapter/graph.hpp"
#include "padapter/params.hpp"
#include "padapter/tensor.hpp"
#include "padapter/vocab.hpp"

namespace padapter {

struct DenoiserConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t channels = 3;
    std::size_t token = 8;  // token cell edge in pixels
    std::size_t dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t vocab = 0;  // 0 = vocab::size()
    std::size_t max_prompt = 16;
    std::size_t ffn_mult = 4;
    int timesteps = 100;
    // Bit l set = cross-attention layer l hosts the DCA/RPA adapters.
    std::uint32_t adapter_layers = 0xFFFFFFFFu;

    void validate() const;
    std::size_t vocab_size() const;
    std::size_t grid_rows() const { return height / token; }
    std::size_t grid_cols() const { return width / token; }
    std::size_t in_features() const { return token * token * (2 * channels + 1); }
    std::size_t out_features() const { return token * token * channels; }
    bool adapted(std::size_t layer) const { return layer < 32 && ((adapter_layers >> layer) & 1u); }
    std::vector<std::size_t> adapted_list() const;
};

// base.config carries the architecture so checkpoints are self-describing.
DenoiserConfig config_from_store(const ParameterStore& store);
ParameterStore init_base(const DenoiserConfig& cfg, std::uint64_t seed);

struct TextEmbedding {
    Tensor vectors;  // max_prompt × dim
    std::vector<bool> padded;
};

// Token-grid activations.
struct FeatureMap {
    Tensor tokens;  // (rows * cols) × dim
    std::size_t rows = 0;
    std::size_t cols = 0;
};

// Per adapted layer z^r captured from a reference forward pass.
struct ReferenceFeatures {
    std::vector<Tensor> layers;
    std::size_t source_patch = 0;
};

struct AdapterMode {
    bool dca = false;
    bool rpa = false;
    bool control = false;
    bool positional = true;
};

struct DenoiseRequest {
    const Tensor* y_t = nullptr;           // {C,h,w}
    int timestep = 0;                      // schedule index in [0, T)
    const Tokens* prompt = nullptr;        // empty = unconditional
    const Tensor* mask = nullptr;          // {1,h,w}
    const Tensor* masked_image = nullptr;  // {C,h,w}
    const ReferenceFeatures* refs = nullptr;
    const Tensor* control_source = nullptr;  // upsampled stage-1 patch y^i
};

// Per adapted layer cross-attention outputs recorded during a forward pass.
struct Capture {
    std::vector<Tensor> cross_outputs;
};

// Binds store entries into a graph on first use. Unfrozen entries become
// gradient-tracked leaves when `track_unfrozen` is set.
class ParamBinder {
public:
    ParamBinder(Graph& g, const ParameterStore& store, bool track_unfrozen)
        : g_(g), store_(store), track_(track_unfrozen) {}

    NodeId operator()(const std::string& name);
    const std::map<std::string, NodeId>& tracked() const { return tracked_; }
    const ParameterStore& store() const { return store_; }

private:
    Graph& g_;
    const ParameterStore& store_;
    bool track_;
    std::map<std::string, NodeId> bound_;
    std::map<std::string, NodeId> tracked_;
};

// Image {C,h,w} -> (rows*cols) × (token*token*C); feature order is channel, dy, dx.
Tensor tokenize(const Tensor& img, std::size_t token);
Tensor untokenize(const Tensor& tokens, std::size_t channels, std::size_t h, std::size_t w, std::size_t token);

TextEmbedding encode_text(const Tokens& prompt, const ParameterStore& store, const DenoiserConfig& cfg);
NodeId encode_text(Graph& g, ParamBinder& bind, const Tokens& prompt, const DenoiserConfig& cfg);

std::string layer_prefix(const char* ns, std::size_t layer);

struct CrossAttentionWeights {
    NodeId wq, wk, wv;
};

// Softmax(Q K^T / sqrt(d_h)) V with Q = z W_q, K = c W_k, V = c W_v.
NodeId base_attention(Graph& g, NodeId z, NodeId c, const CrossAttentionWeights& w, std::size_t heads);
FeatureMap base_attention(const FeatureMap& z, const TextEmbedding& c, const Tensor& wq, const Tensor& wk,
                          const Tensor& wv, std::size_t heads);

// Builds the noise prediction (token layout, (rows*cols) × out_features).
NodeId build_denoiser(Graph& g, ParamBinder& bind, const DenoiserConfig& cfg, const DenoiseRequest& req,
                      const AdapterMode& mode, Capture* capture = nullptr);

// Predicted noise image {C,h,w}.
Tensor denoise(const ParameterStore& store, const DenoiserConfig& cfg, const DenoiseRequest& req,
               const AdapterMode& mode, Capture* capture = nullptr);

// Trains every base.* weight with noise-prediction MSE on masked-inpainting
// tuples. The returned store is fully frozen; steps = 0 returns the seeded
// initialization unchanged (but frozen).
ParameterStore pretrain_base(const std::vector<TrainingExample>& data, const DenoiserConfig& cfg,
                             const TrainHyper& hyper, std::uint64_t seed, std::vector<double>* loss_history = nullptr);

}  // namespace padapter
