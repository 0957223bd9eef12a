#pragma once

#include <cstdint>
#include <vector>

#include "padapter/backbone.hpp"
#include "padapter/dataset.hpp"

namespace padapter {

// Binary per-token hole mask on the feature grid.
struct TokenMask {
    std::vector<double> values;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

// A token is masked iff any pixel of its token×token cell is masked.
TokenMask mask_to_tokens(const Tensor& mask, std::size_t token);

// (1 - m) broadcast to n × dim, the factor applied to z before W_q.
Tensor keep_matrix(const TokenMask& m, std::size_t dim);

struct DcaLayerWeights {
    NodeId wq, wk, wv;
};

// Dual Context Adapter on one cross-attention layer:
//   Q' = [z ⊙ (1 - m)] W_q^l,  Z' = Attn(Q', K, V)
//   K' = Z' W_k^l, V' = Z' W_v^l,  Z'' = Attn(Q, K', V')
// and returns Z + Z'' where Z is the frozen base attention.
NodeId dca_forward(Graph& g, NodeId z, NodeId c, const TokenMask& m, const CrossAttentionWeights& base,
                   const DcaLayerWeights& w, std::size_t heads);

struct AttentionTriple {
    Tensor wq, wk, wv;
};

FeatureMap dca_forward(const FeatureMap& z, const TextEmbedding& c, const TokenMask& m, const AttentionTriple& base,
                       const AttentionTriple& adapter, std::size_t heads);

// dca.l<i>.{wq,wk,wv} for each adapted layer: W_q ~ N(0, 0.02^2), W_k = W_v = 0.
void init_dca(ParameterStore& store, const DenoiserConfig& cfg, std::uint64_t seed);
bool has_dca(const ParameterStore& store, const DenoiserConfig& cfg);

struct Stage1Result {
    ParameterStore dca;  // trainable dca.* only
    std::vector<double> loss_history;
};

// Fine-tunes only dca.* against the frozen base with noise-prediction MSE.
Stage1Result train_stage1(const ParameterStore& base, const std::vector<TrainingExample>& data,
                          const TrainHyper& hyper, std::uint64_t seed);

}  // namespace padapter
