#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "padapter/backbone.hpp"
#include "padapter/diffusion.hpp"
#include "padapter/params.hpp"
#include "padapter/vocab.hpp"

namespace padapter {

struct PixelRect {
    std::size_t y = 0, x = 0, h = 0, w = 0;
};

// Row-major tiling of an H×W image into n_h×n_w patches.
class PatchGrid {
public:
    PatchGrid(std::size_t height, std::size_t width, std::size_t patch_h, std::size_t patch_w);

    std::size_t height() const { return h_; }
    std::size_t width() const { return w_; }
    std::size_t patch_h() const { return ph_; }
    std::size_t patch_w() const { return pw_; }
    std::size_t rows() const { return h_ / ph_; }
    std::size_t cols() const { return w_ / pw_; }
    std::size_t count() const { return rows() * cols(); }
    PixelRect rect(std::size_t i) const;

private:
    std::size_t h_, w_, ph_, pw_;
};

std::vector<Tensor> split(const Tensor& img, const PatchGrid& grid);
Tensor assemble(const std::vector<Tensor>& patches, const PatchGrid& grid);

// Bilinear upsampling by an integer factor; factor 1 returns the input.
Tensor upsample(const Tensor& img, std::size_t factor);

struct InpaintTask {
    Tensor image;  // {C,H,W}; masked pixels are ignored
    Tensor mask;   // {1,H,W}
    Tokens prompt;
    std::map<std::size_t, Tokens> patch_prompts;
    std::uint64_t seed = 0;
};

struct PipelineConfig {
    SamplerConfig sampler;
    std::size_t patch_h = 64;
    std::size_t patch_w = 64;
    std::size_t jobs = 1;
    std::vector<std::size_t> order;  // patch processing order; empty = ascending
    bool use_rpa = true;
};

// Stage-1 sampling at (or below) base resolution with the DCA active when the
// model carries it. Unmasked pixels of the result equal `masked` exactly.
Tensor run_stage1(const Tensor& masked, const Tensor& mask, const Tokens& prompt, const ParameterStore& model,
                  const SamplerConfig& sampler, std::uint64_t seed);

struct StageOneResult {
    std::size_t factor = 1;
    Tensor low;              // stage-1 output at reduced resolution
    Tensor upsampled;        // upsampled and re-blended with the full-resolution known pixels
    std::vector<Tensor> patches;  // y^i
};

// Smallest integer factor that brings the image within the base resolution
// while keeping the reduced size a multiple of the token size.
std::size_t stage1_factor(std::size_t h, std::size_t w, const DenoiserConfig& cfg);
StageOneResult run_stage1(const InpaintTask& task, const ParameterStore& model, const SamplerConfig& sampler,
                          const PatchGrid& grid);

// Everything stage 2 needs to know about the patch set of one image.
struct PatchContext {
    std::vector<Tensor> masked;   // X_m^i
    std::vector<Tensor> masks;    // M^i
    std::vector<Tensor> stage1;   // y^i
    std::vector<Tokens> prompts;  // local prompts
};

PatchContext make_patch_context(const InpaintTask& task, const StageOneResult& s1, const PatchGrid& grid);

struct Stage2Options {
    bool use_rpa = true;
    std::optional<std::size_t> reference;  // overrides embedding-based selection
};

struct PatchOutput {
    Tensor image;
    std::optional<std::size_t> reference;
};

// Refines patch i. Returns the input patch unchanged when its mask is empty.
PatchOutput run_stage2_patch(std::size_t i, const PatchContext& ctx, const ParameterStore& model,
                             const SamplerConfig& sampler, std::uint64_t seed, const Stage2Options& opts = {});

struct PipelineModels {
    const ParameterStore* stage1 = nullptr;  // base + dca
    const ParameterStore* stage2 = nullptr;  // base + dca + rpa/ctrl; null = stage 1 only
};

struct PipelineResult {
    Tensor image;
    StageOneResult stage1;
    std::vector<std::optional<std::size_t>> references;
};

PipelineResult run_full_pipeline(const InpaintTask& task, const PipelineModels& models, const PipelineConfig& cfg);

}  // namespace padapter
