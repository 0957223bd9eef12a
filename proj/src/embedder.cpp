#include "padapter/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "padapter/data_synth.hpp"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"

namespace padapter {

namespace {

constexpr std::size_t kHistBins = 16;
constexpr std::size_t kOrientBins = 8;
constexpr std::size_t kGrid = 4;
constexpr std::size_t kDescriptorSize = 3 * kHistBins + kOrientBins + 3 * kGrid * kGrid;
constexpr std::size_t kPrototypeSize = 32;
constexpr double kPi = 3.14159265358979323846;

const std::vector<double>& projection() {
    static const std::vector<double> p = [] {
        Rng rng(kEmbedderSeed);
        std::vector<double> m(kEmbedDim * kDescriptorSize);
        const double s = 1.0 / std::sqrt(static_cast<double>(kDescriptorSize));
        for (auto& v : m) v = s * rng.normal();
        return m;
    }();
    return p;
}

EmbeddingVector finish(std::vector<double> v) {
    EmbeddingVector e;
    e.zero = true;
    for (double x : v)
        if (x != 0.0) e.zero = false;
    e.values = std::move(v);
    return e;
}

std::vector<double> normalized(const std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    std::vector<double> out(v.size());
    if (n > 0.0)
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

Tensor solid(const Rgb& c) {
    Tensor img({3, kPrototypeSize, kPrototypeSize});
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < kPrototypeSize * kPrototypeSize; ++i) img[ch * kPrototypeSize * kPrototypeSize + i] = c[ch];
    return img;
}

// Canonical black/white render isolating one vocabulary attribute.
std::optional<Tensor> prototype(const std::string& w) {
    const std::size_t white = 8, black = 9;
    for (std::size_t i = 0; i < vocab::kColors.size(); ++i)
        if (w == vocab::kColors[i]) return solid(palette_color(i));
    TextureSpec tex;
    tex.color_a = white;
    tex.color_b = black;
    for (std::size_t i = 0; i < vocab::kFamilies.size(); ++i)
        if (w == vocab::kFamilies[i]) {
            tex.family = static_cast<Family>(i);
            return render_texture(tex, kPrototypeSize, kPrototypeSize);
        }
    for (std::size_t i = 0; i < vocab::kOrientations.size(); ++i)
        if (w == vocab::kOrientations[i]) {
            tex.orientation = static_cast<Orientation>(i);
            return render_texture(tex, kPrototypeSize, kPrototypeSize);
        }
    if (w == "fine" || w == "coarse") {
        tex.frequency = w == "fine" ? 8 : 2;
        return render_texture(tex, kPrototypeSize, kPrototypeSize);
    }
    SceneSpec scene;
    scene.background.family = Family::Gradient;
    scene.background.color_a = black;
    scene.background.color_b = black;
    ForegroundSpec fg;
    fg.color = white;
    fg.radius = 0.4;
    for (std::size_t i = 0; i < vocab::kShapes.size(); ++i)
        if (w == vocab::kShapes[i]) {
            fg.shape = static_cast<ShapeKind>(i);
            scene.foreground = fg;
            return gen_scene(scene, kPrototypeSize).image;
        }
    for (std::size_t i = 0; i < vocab::kFills.size(); ++i)
        if (w == vocab::kFills[i]) {
            fg.shape = ShapeKind::Square;
            fg.radius = 0.5;
            fg.fill = static_cast<Fill>(i);
            scene.foreground = fg;
            return gen_scene(scene, kPrototypeSize).image;
        }
    return std::nullopt;
}

}  // namespace

std::vector<double> image_descriptor(const Tensor& img) {
    if (img.empty()) throw ContractError("embed_image: empty image");
    require_image(img, "embed_image");
    const std::size_t c = channels(img), h = height(img), w = width(img);
    auto chan = [&](std::size_t k) { return c == 1 ? 0 : std::min(k, c - 1); };
    std::vector<double> f;
    f.reserve(kDescriptorSize);
    const double npx = static_cast<double>(h * w);

    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> hist(kHistBins, 0.0);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double v = std::clamp(img.at(chan(k), y, x), 0.0, 1.0);
                hist[std::min(kHistBins - 1, static_cast<std::size_t>(v * kHistBins))] += 1.0;
            }
        for (double b : hist) f.push_back(b / npx - 1.0 / kHistBins);
    }

    std::vector<double> orient(kOrientBins, 0.0);
    double total = 0.0;
    auto lum = [&](std::size_t y, std::size_t x) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += img.at(k, y, x);
        return s / static_cast<double>(c);
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double gx = lum(y, std::min(x + 1, w - 1)) - lum(y, x ? x - 1 : 0);
            const double gy = lum(std::min(y + 1, h - 1), x) - lum(y ? y - 1 : 0, x);
            const double mag = std::hypot(gx, gy);
            if (mag == 0.0) continue;
            double a = std::atan2(gy, gx);
            if (a < 0) a += kPi;
            if (a >= kPi) a -= kPi;
            orient[std::min(kOrientBins - 1, static_cast<std::size_t>(a / kPi * kOrientBins))] += mag;
            total += mag;
        }
    for (double b : orient) f.push_back(total > 0.0 ? 2.0 * (b / total - 1.0 / kOrientBins) : 0.0);

    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t gy = 0; gy < kGrid; ++gy)
            for (std::size_t gx = 0; gx < kGrid; ++gx) {
                const std::size_t y0 = gy * h / kGrid, x0 = gx * w / kGrid;
                const std::size_t y1 = std::max(y0 + 1, (gy + 1) * h / kGrid);
                const std::size_t x1 = std::max(x0 + 1, (gx + 1) * w / kGrid);
                double s = 0.0;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x) s += img.at(chan(k), y, x);
                f.push_back(s / static_cast<double>((y1 - y0) * (x1 - x0)) - 0.5);
            }
    return f;
}

EmbeddingVector embed_image(const Tensor& img) {
    const std::vector<double> f = image_descriptor(img);
    const auto& p = projection();
    std::vector<double> e(kEmbedDim, 0.0);
    for (std::size_t i = 0; i < kEmbedDim; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < kDescriptorSize; ++j) s += p[i * kDescriptorSize + j] * f[j];
        e[i] = s;
    }
    return finish(std::move(e));
}

const std::vector<double>& token_vector(TokenId id) {
    if (id == vocab::kPad || id >= vocab::size())
        throw ContractError("embed_text: token id " + std::to_string(id) + " outside vocabulary");
    static const std::vector<std::vector<double>> table = [] {
        std::vector<std::vector<double>> t(vocab::size());
        for (TokenId i = 1; i < vocab::size(); ++i) {
            if (auto img = prototype(vocab::word(i))) {
                t[i] = normalized(embed_image(*img).values);
            } else {
                Rng rng(derive_seed({kEmbedderSeed, 0x7E47, i}));
                std::vector<double> v(kEmbedDim);
                for (auto& x : v) x = rng.normal();
                t[i] = normalized(v);
            }
        }
        return t;
    }();
    return table[id];
}

EmbeddingVector embed_text(const Tokens& tokens) {
    std::vector<double> e(kEmbedDim, 0.0);
    for (TokenId t : tokens) {
        const auto& v = token_vector(t);
        for (std::size_t i = 0; i < kEmbedDim; ++i) e[i] += v[i];
    }
    if (!tokens.empty())
        for (auto& x : e) x /= static_cast<double>(tokens.size());
    return finish(std::move(e));
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw ShapeError("cosine_sim: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return -std::numeric_limits<double>::infinity();
    return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

}  // namespace padapter
