#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "padapter/dataset.hpp"
#include "padapter/tensor.hpp"
#include "padapter/vocab.hpp"

namespace padapter {

class Rng;

enum class Family { Stripes, Checker, Gradient, Blobs };
enum class Orientation { Horizontal, Vertical, Diagonal };
enum class ShapeKind { Circle, Square, Triangle, Diamond, Ring };
enum class Fill { Solid, Striped, Dotted };

using Rgb = std::array<double, 3>;
Rgb palette_color(std::size_t color_index);  // index into vocab::kColors

struct TextureSpec {
    Family family = Family::Stripes;
    Orientation orientation = Orientation::Vertical;
    int frequency = 4;  // cycles per image (stripes, checker) or blob count
    std::size_t color_a = 0;
    std::size_t color_b = 1;
    std::uint64_t seed = 0;  // blob placement
};

struct ForegroundSpec {
    ShapeKind shape = ShapeKind::Circle;
    Fill fill = Fill::Solid;
    std::size_t color = 0;
    double cx = 0.5, cy = 0.5;  // center, fraction of the image size
    double radius = 0.25;       // fraction of the image size
};

struct SceneSpec {
    TextureSpec background;
    std::optional<ForegroundSpec> foreground;
};

struct Scene {
    Tensor image;         // {3, size, size}
    Tokens fg_tokens;
    Tokens bg_tokens;
    Tensor segmentation;  // {1, size, size}, 1 on foreground pixels
};

// Weight of colour a at every pixel, in [0, 1].
Tensor texture_weights(const TextureSpec& spec, std::size_t h, std::size_t w);
Tensor render_texture(const TextureSpec& spec, std::size_t h, std::size_t w);
Tokens texture_tokens(const TextureSpec& spec);
Tokens foreground_tokens(const ForegroundSpec& spec);
bool foreground_contains(const ForegroundSpec& spec, double px, double py, std::size_t size);

SceneSpec random_scene_spec(Rng& rng, bool with_foreground = true);
// The image is a pure function of the spec; `seed` only varies sub-pixel
// details that the spec leaves open (currently none, kept for the contract).
Scene gen_scene(const SceneSpec& spec, std::size_t size, std::uint64_t seed = 0);

enum class MaskKind { Brush, Rectangle, RandomShape, Segmentation };
const char* mask_kind_name(MaskKind kind);
MaskKind mask_kind_from_name(const std::string& name);

struct MaskSpec {
    MaskKind kind = MaskKind::Brush;
    std::uint64_t seed = 0;
    // Rectangle: explicit half-open pixel box {y0, x0, y1, x1}; drawn from the
    // seed when absent.
    std::optional<std::array<std::size_t, 4>> rect;
    Tensor segmentation;  // Segmentation kind: the scene's foreground mask
};

Tensor gen_mask(const MaskSpec& spec, std::size_t size);

struct DegradeParams {
    double blur_sigma = 0.0;
    bool resample = false;
    double noise_sigma = 0.0;
};

DegradeParams draw_degrade_params(std::uint64_t seed);
// blur -> 2x bilinear down/up -> additive Gaussian noise (no clamping).
Tensor degrade(const Tensor& img, const DegradeParams& params, std::uint64_t noise_seed);
Tensor degrade(const Tensor& img, std::uint64_t seed);

struct DatasetItem {
    std::size_t index = 0;
    Tensor image;
    Tensor mask;
    Tokens fg_tokens;
    Tokens bg_tokens;
    MaskKind mask_kind = MaskKind::Brush;

    Tokens prompt() const;
    TrainingExample example() const;
};

// Number of random-kind masks among `count` items for a mix ratio.
std::size_t random_mask_count(std::size_t count, double mix);

// Item `index` of a (count, size, mix, seed) dataset. Items are independent,
// so a dataset can be generated in parallel or in slices.
DatasetItem gen_item(std::size_t index, std::size_t count, std::size_t size, double mix, std::uint64_t seed);
std::vector<DatasetItem> gen_items(std::size_t count, std::size_t size, double mix, std::uint64_t seed,
                                   std::size_t first = 0, std::size_t jobs = 1);

// Writes img_%05d.ppm, mask_%05d.pgm, meta_%05d.json and manifest.json.
nlohmann::json build_dataset(std::size_t count, std::size_t size, double mix, std::uint64_t seed,
                             const std::filesystem::path& out, std::size_t jobs = 1);
std::vector<DatasetItem> load_dataset(const std::filesystem::path& dir);

std::vector<TrainingExample> training_examples(const std::vector<DatasetItem>& items);

// Stage-2 pairs: each item is split into 2×2 patches of half its size; the
// target and the reference are two distinct patches chosen from the seed,
// the target is degraded to stand in for the upsampled stage-1 output and
// both patches carry their own random mask.
std::vector<PatchPairExample> make_patch_pairs(const std::vector<DatasetItem>& items, std::uint64_t seed);

}  // namespace padapter
