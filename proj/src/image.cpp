#include "padapter/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "padapter/errors.hpp"

namespace padapter {

std::size_t channels(const Tensor& img) { return img.dim(0); }
std::size_t height(const Tensor& img) { return img.dim(1); }
std::size_t width(const Tensor& img) { return img.dim(2); }

void require_image(const Tensor& img, const char* op) {
    if (img.rank() != 3 || img.size() == 0)
        throw ShapeError(std::string(op) + ": expected nonempty {C,H,W} image, got " + shape_str(img.shape()));
}

std::uint8_t to_byte(double v) {
    const double s = std::floor(v * 255.0 + 0.5);
    return static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
}

std::vector<std::uint8_t> encode_netpbm(const Tensor& img) {
    require_image(img, "encode_netpbm");
    const std::size_t c = channels(img), h = height(img), w = width(img);
    if (c != 1 && c != 3) throw ShapeError("encode_netpbm: need 1 or 3 channels, got " + std::to_string(c));
    const std::string header =
        std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + c * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) out.push_back(to_byte(img.at(ch, y, x)));
    return out;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(const std::vector<std::uint8_t>& b, std::size_t& pos) {
    for (;;) {
        while (pos < b.size() && std::isspace(b[pos])) ++pos;
        if (pos < b.size() && b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') ++pos;
    if (start == pos) throw FormatError("netpbm: truncated header", start);
    return std::string(b.begin() + static_cast<long>(start), b.begin() + static_cast<long>(pos));
}

std::size_t header_number(const std::vector<std::uint8_t>& b, std::size_t& pos) {
    const std::size_t at = pos;
    const std::string tok = header_token(b, pos);
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) ||
        tok.size() > 9)
        throw FormatError("netpbm: bad header number '" + tok + "'", at);
    return static_cast<std::size_t>(std::stoul(tok));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

Tensor decode_netpbm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    const std::string magic = header_token(bytes, pos);
    std::size_t c;
    if (magic == "P5")
        c = 1;
    else if (magic == "P6")
        c = 3;
    else
        throw FormatError("netpbm: unsupported magic '" + magic + "'", 0);
    const std::size_t w = header_number(bytes, pos);
    const std::size_t h = header_number(bytes, pos);
    const std::size_t maxval_at = pos;
    const std::size_t maxval = header_number(bytes, pos);
    if (maxval != 255) throw FormatError("netpbm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
    if (w == 0 || h == 0) throw FormatError("netpbm: empty image", maxval_at);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("netpbm: missing raster separator", pos);
    ++pos;
    const std::size_t need = c * w * h;
    if (bytes.size() - pos < need) throw FormatError("netpbm: truncated raster", bytes.size());
    Tensor img({c, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) img.at(ch, y, x) = bytes[pos++] / 255.0;
    return img;
}

void write_netpbm(const std::filesystem::path& path, const Tensor& img) {
    const auto bytes = encode_netpbm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

Tensor read_netpbm(const std::filesystem::path& path) { return decode_netpbm(slurp(path)); }

void write_mask(const std::filesystem::path& path, const Tensor& mask) {
    require_binary_mask(mask, "write_mask");
    write_netpbm(path, mask);
}

Tensor read_mask(const std::filesystem::path& path) {
    const auto bytes = slurp(path);
    Tensor m = decode_netpbm(bytes);
    if (channels(m) != 1) throw FormatError("mask " + path.string() + " must be P5 grayscale");
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i] != 0.0 && m[i] != 1.0)
            throw FormatError("mask " + path.string() + " is not binary (only 0 and 255 allowed)");
    }
    return m;
}

bool is_binary(const Tensor& mask) {
    return std::all_of(mask.storage().begin(), mask.storage().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

void require_binary_mask(const Tensor& mask, const char* op) {
    require_image(mask, op);
    if (channels(mask) != 1) throw ShapeError(std::string(op) + ": mask must have 1 channel");
    if (!is_binary(mask)) throw ContractError(std::string(op) + ": mask values must be in {0, 1}");
}

bool mask_is_empty(const Tensor& mask) {
    return std::all_of(mask.storage().begin(), mask.storage().end(), [](double v) { return v == 0.0; });
}

Tensor expand_mask(const Tensor& mask, std::size_t c) {
    require_image(mask, "expand_mask");
    const std::size_t hw = height(mask) * width(mask);
    Tensor out({c, height(mask), width(mask)});
    for (std::size_t ch = 0; ch < c; ++ch) std::copy(mask.data(), mask.data() + hw, out.data() + ch * hw);
    return out;
}

Tensor apply_mask(const Tensor& img, const Tensor& mask) {
    require_image(img, "apply_mask");
    require_binary_mask(mask, "apply_mask");
    if (height(img) != height(mask) || width(img) != width(mask))
        throw ShapeError("apply_mask: image " + shape_str(img.shape()) + " vs mask " + shape_str(mask.shape()));
    Tensor out = img;
    const std::size_t hw = height(img) * width(img);
    for (std::size_t ch = 0; ch < channels(img); ++ch)
        for (std::size_t i = 0; i < hw; ++i)
            if (mask[i] != 0.0) out[ch * hw + i] = 0.0;
    return out;
}

Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
    require_image(img, "resize_bilinear");
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: empty target size");
    const std::size_t c = channels(img), h = height(img), w = width(img);
    if (out_h == h && out_w == w) return img;
    auto axis = [](std::size_t dst, std::size_t n_in, std::size_t n_out, std::size_t& i0, std::size_t& i1,
                   double& frac) {
        const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
        double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
        i0 = static_cast<std::size_t>(std::floor(src));
        i1 = std::min(i0 + 1, n_in - 1);
        frac = src - static_cast<double>(i0);
    };
    Tensor out({c, out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t y0, y1;
        double fy;
        axis(y, h, out_h, y0, y1, fy);
        for (std::size_t x = 0; x < out_w; ++x) {
            std::size_t x0, x1;
            double fx;
            axis(x, w, out_w, x0, x1, fx);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double top = img.at(ch, y0, x0) * (1.0 - fx) + img.at(ch, y0, x1) * fx;
                const double bot = img.at(ch, y1, x0) * (1.0 - fx) + img.at(ch, y1, x1) * fx;
                out.at(ch, y, x) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    return out;
}

Tensor downsample_mask_any(const Tensor& mask, std::size_t factor) {
    require_binary_mask(mask, "downsample_mask_any");
    if (factor == 0 || height(mask) % factor || width(mask) % factor)
        throw GeometryError("downsample_mask_any: " + shape_str(mask.shape()) + " not divisible by factor " +
                            std::to_string(factor));
    const std::size_t oh = height(mask) / factor, ow = width(mask) / factor;
    Tensor out({1, oh, ow});
    for (std::size_t y = 0; y < height(mask); ++y)
        for (std::size_t x = 0; x < width(mask); ++x)
            if (mask.at(0, y, x) != 0.0) out.at(0, y / factor, x / factor) = 1.0;
    return out;
}

Tensor crop(const Tensor& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
    require_image(img, "crop");
    if (y + h > height(img) || x + w > width(img))
        throw GeometryError("crop: rect exceeds image " + shape_str(img.shape()));
    Tensor out({channels(img), h, w});
    for (std::size_t ch = 0; ch < channels(img); ++ch)
        for (std::size_t r = 0; r < h; ++r)
            std::copy_n(&img.data()[(ch * height(img) + y + r) * width(img) + x], w, &out.at(ch, r, 0));
    return out;
}

void paste(Tensor& dst, const Tensor& src, std::size_t y, std::size_t x) {
    require_image(dst, "paste");
    require_image(src, "paste");
    if (channels(src) != channels(dst) || y + height(src) > height(dst) || x + width(src) > width(dst))
        throw GeometryError("paste: " + shape_str(src.shape()) + " does not fit in " + shape_str(dst.shape()));
    for (std::size_t ch = 0; ch < channels(src); ++ch)
        for (std::size_t r = 0; r < height(src); ++r)
            std::copy_n(src.data() + (ch * height(src) + r) * width(src), width(src), &dst.at(ch, y + r, x));
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
    require_image(img, "gaussian_blur");
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (auto& k : kernel) k /= norm;
    const int c = static_cast<int>(channels(img)), h = static_cast<int>(height(img)), w = static_cast<int>(width(img));
    Tensor tmp(img.shape()), out(img.shape());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * img.at(ch, y, std::clamp(x + i, 0, w - 1));
                tmp.at(ch, y, x) = acc;
            }
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * tmp.at(ch, std::clamp(y + i, 0, h - 1), x);
                out.at(ch, y, x) = acc;
            }
    return out;
}

}  // namespace padapter
