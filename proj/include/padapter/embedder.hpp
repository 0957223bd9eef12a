#pragma once

#include <cstdint>
#include <vector>

#include "padapter/tensor.hpp"
#include "padapter/vocab.hpp"

namespace padapter {

inline constexpr std::size_t kEmbedDim = 64;
inline constexpr std::uint64_t kEmbedderSeed = 0xC11F;

struct EmbeddingVector {
    std::vector<double> values;
    bool zero = false;  // all-zero vector (cosine similarity undefined)
};

// Closed-form image descriptor: per-channel 16-bin intensity histograms, an
// 8-bin magnitude-weighted gradient-orientation histogram and a per-channel
// 4×4 mean-pool grid, centered and projected to kEmbedDim by a fixed seeded
// Gaussian matrix.
std::vector<double> image_descriptor(const Tensor& img);
EmbeddingVector embed_image(const Tensor& img);

// Mean of per-token vectors. Tokens naming a visual attribute use the
// embedding of a seeded prototype render of that attribute; other tokens use
// a seeded Gaussian vector.
EmbeddingVector embed_text(const Tokens& tokens);
const std::vector<double>& token_vector(TokenId id);

// a·b / (|a||b|); -infinity when either operand has zero norm.
double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace padapter
