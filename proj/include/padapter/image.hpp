#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "padapter/tensor.hpp"

namespace padapter {

// Images are tensors of shape {C, H, W} with values in [0, 1] (C = 1 or 3).
// Masks are {1, H, W} with values in {0, 1}; 1 marks the hole.

std::size_t channels(const Tensor& img);
std::size_t height(const Tensor& img);
std::size_t width(const Tensor& img);
void require_image(const Tensor& img, const char* op);

// Binary Netpbm, maxval 255: P5 (grayscale) and P6 (RGB).
std::vector<std::uint8_t> encode_netpbm(const Tensor& img);
Tensor decode_netpbm(const std::vector<std::uint8_t>& bytes);
void write_netpbm(const std::filesystem::path& path, const Tensor& img);
Tensor read_netpbm(const std::filesystem::path& path);

// Masks are stored as P5 with only 0 and 255 bytes.
void write_mask(const std::filesystem::path& path, const Tensor& mask);
Tensor read_mask(const std::filesystem::path& path);

// round-half-up of v * 255, clamped to [0, 255].
std::uint8_t to_byte(double v);

bool is_binary(const Tensor& mask);
void require_binary_mask(const Tensor& mask, const char* op);
bool mask_is_empty(const Tensor& mask);

// X_m = X ⊙ (1 - M), mask broadcast over channels.
Tensor apply_mask(const Tensor& img, const Tensor& mask);
// Broadcasts a {1,H,W} mask to C channels.
Tensor expand_mask(const Tensor& mask, std::size_t c);

// Bilinear resampling with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w);
// A low-resolution pixel is masked iff any pixel of its factor×factor block is.
Tensor downsample_mask_any(const Tensor& mask, std::size_t factor);

Tensor crop(const Tensor& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w);
void paste(Tensor& dst, const Tensor& src, std::size_t y, std::size_t x);

// Separable Gaussian blur with clamp-to-edge borders; sigma <= 0 copies.
Tensor gaussian_blur(const Tensor& img, double sigma);

}  // namespace padapter
