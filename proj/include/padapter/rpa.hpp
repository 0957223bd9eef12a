#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "padapter/backbone.hpp"
#include "padapter/dataset.hpp"
#include "padapter/dca.hpp"

namespace padapter {

struct RpaLayerWeights {
    NodeId wk, wv;
};

// Z^r = Attn(Q, z^r W_k^l, z^r W_v^l) for a precomputed base query Q.
NodeId rpa_attend(Graph& g, NodeId q, NodeId zr, const RpaLayerWeights& w, std::size_t heads);

// Reference Patch Adapter layer: Z from the DCA-augmented path (or the plain
// base path when `dca` is null), Q = z W*_q, returns Z^r + Z.
NodeId rpa_forward(Graph& g, NodeId z, NodeId c, const TokenMask& m, const CrossAttentionWeights& base,
                   const DcaLayerWeights* dca, NodeId zr, const RpaLayerWeights& w, std::size_t heads);

struct AttentionPair {
    Tensor wk, wv;
};

FeatureMap rpa_forward(const FeatureMap& z, const TextEmbedding& c, const TokenMask& m, const AttentionTriple& base,
                       const AttentionTriple* dca, const Tensor& zr, const AttentionPair& adapter, std::size_t heads);

// rpa.l<i>.{wk,wv}: W_k ~ N(0, 0.02^2), W_v = 0.
void init_rpa(ParameterStore& store, const DenoiserConfig& cfg, std::uint64_t seed);

// Timestep index used for reference extraction (mid-schedule).
int reference_timestep(const DenoiserConfig& cfg);

// One conditioned stage-1 forward pass on the masked reference patch at
// timestep t; records every adapted layer's attention output as z^r.
ReferenceFeatures extract_reference_features(const Tensor& ref_masked, const Tensor& ref_mask, const Tokens& prompt,
                                             const ParameterStore& stage1, const DenoiserConfig& cfg, int t,
                                             std::uint64_t noise_seed, std::size_t source_patch = 0);

// Argmax of cosine similarity to the query, excluding self_index; ties resolve to
// the lowest index. Zero-norm embeddings rank below every real similarity.
std::size_t select_reference_embedded(std::span<const std::vector<double>> candidates,
                                      const std::vector<double>& query, std::size_t self_index);
std::size_t select_reference(const Tensor& stage1_patch, std::span<const Tensor> masked_patches,
                             std::size_t self_index);

struct Stage2Result {
    ParameterStore params;  // rpa.* (when enabled) and ctrl.*
    std::vector<double> loss_history;
};

// Trains rpa.* and ctrl.* with base and dca frozen. With use_rpa = false only
// the control branch trains (the no-RPA ablation arm).
Stage2Result train_stage2(const ParameterStore& stage1, const std::vector<PatchPairExample>& data,
                          const TrainHyper& hyper, std::uint64_t seed, bool use_rpa = true);

}  // namespace padapter
