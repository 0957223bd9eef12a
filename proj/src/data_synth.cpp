#include "padapter/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"

namespace padapter {

namespace {

constexpr double kTwoPi = 6.283185307179586476925;

const std::array<Rgb, 12> kPalette = {{
    {0.85, 0.15, 0.15},  // red
    {0.20, 0.70, 0.25},  // green
    {0.15, 0.30, 0.85},  // blue
    {0.95, 0.85, 0.20},  // yellow
    {0.20, 0.80, 0.85},  // cyan
    {0.80, 0.25, 0.75},  // magenta
    {0.95, 0.55, 0.10},  // orange
    {0.50, 0.25, 0.65},  // purple
    {0.95, 0.95, 0.95},  // white
    {0.05, 0.05, 0.05},  // black
    {0.50, 0.50, 0.50},  // gray
    {0.50, 0.32, 0.15},  // brown
}};

template <typename E>
void check_enum(E v, int count, const char* what) {
    const int i = static_cast<int>(v);
    if (i < 0 || i >= count) throw ContractError(std::string("invalid ") + what + " " + std::to_string(i));
}

std::string pad5(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05zu", i);
    return buf;
}

void stamp_disc(Tensor& mask, double cy, double cx, double r) {
    const std::size_t h = height(mask), w = width(mask);
    const long y0 = std::max(0L, static_cast<long>(std::floor(cy - r)));
    const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::ceil(cy + r)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(cx - r)));
    const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::ceil(cx + r)));
    for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) mask.at(0, y, x) = 1.0;
        }
}

bool in_triangle(double px, double py, const std::array<double, 6>& v) {
    auto edge = [](double ax, double ay, double bx, double by, double x, double y) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
    };
    const double d1 = edge(v[0], v[1], v[2], v[3], px, py);
    const double d2 = edge(v[2], v[3], v[4], v[5], px, py);
    const double d3 = edge(v[4], v[5], v[0], v[1], px, py);
    const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
    const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(neg && pos);
}

Tensor random_primitive(Rng& rng, std::size_t size) {
    Tensor mask({1, size, size});
    const double s = static_cast<double>(size);
    if (rng.below(2) == 0) {
        const double cy = rng.uniform(0.25, 0.75) * s, cx = rng.uniform(0.25, 0.75) * s;
        const double ry = rng.uniform(0.1, 0.3) * s, rx = rng.uniform(0.1, 0.3) * s;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
                if (dy * dy + dx * dx <= 1.0) mask.at(0, y, x) = 1.0;
            }
    } else {
        std::array<double, 6> v{};
        for (auto& c : v) c = rng.uniform(0.1, 0.9) * s;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                if (in_triangle(x + 0.5, y + 0.5, v)) mask.at(0, y, x) = 1.0;
    }
    // Degenerate slivers can miss every pixel center; fall back to the center pixel.
    if (mask_is_empty(mask)) mask.at(0, size / 2, size / 2) = 1.0;
    return mask;
}

Tensor brush_mask(Rng& rng, std::size_t size) {
    Tensor mask({1, size, size});
    const int n = rng.range_int(3, 8);
    const double s = static_cast<double>(size);
    std::vector<std::array<double, 3>> pts;  // y, x, radius
    for (int i = 0; i < n; ++i) pts.push_back({rng.uniform(0.0, s), rng.uniform(0.0, s), rng.uniform(2.0, 6.0)});
    stamp_disc(mask, pts[0][0], pts[0][1], pts[0][2]);
    for (int i = 1; i < n; ++i) {
        const auto& a = pts[i - 1];
        const auto& b = pts[i];
        const double len = std::hypot(b[0] - a[0], b[1] - a[1]);
        const int k = std::max(1, static_cast<int>(std::ceil(len)));
        for (int j = 1; j <= k; ++j) {
            const double u = static_cast<double>(j) / k;
            stamp_disc(mask, a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), a[2] + u * (b[2] - a[2]));
        }
    }
    return mask;
}

nlohmann::json tokens_json(const Tokens& t) {
    nlohmann::json out = nlohmann::json::array();
    for (TokenId id : t) out.push_back(vocab::word(id));
    return out;
}

Tokens tokens_from_json(const nlohmann::json& j) {
    Tokens out;
    for (const auto& w : j) out.push_back(vocab::id(w.get<std::string>()));
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace

Rgb palette_color(std::size_t i) {
    if (i >= kPalette.size()) throw ContractError("palette index " + std::to_string(i) + " out of range");
    return kPalette[i];
}

Tensor texture_weights(const TextureSpec& spec, std::size_t h, std::size_t w) {
    check_enum(spec.family, 4, "texture family");
    check_enum(spec.orientation, 3, "orientation");
    if (spec.frequency < 1) throw ContractError("texture frequency must be >= 1");
    Tensor out({h, w});
    const double f = spec.frequency;
    auto coord = [&](double u, double v) {
        switch (spec.orientation) {
            case Orientation::Horizontal: return v;
            case Orientation::Vertical: return u;
            case Orientation::Diagonal: return 0.5 * (u + v);
        }
        return u;
    };
    std::vector<std::array<double, 3>> blobs;
    if (spec.family == Family::Blobs) {
        Rng rng(derive_seed({spec.seed, 0xB10B}));
        for (int i = 0; i < spec.frequency; ++i)
            blobs.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.06, 0.18)});
    }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double u = static_cast<double>(x) / static_cast<double>(w);
            const double v = static_cast<double>(y) / static_cast<double>(h);
            double s = 0.0;
            switch (spec.family) {
                case Family::Stripes: s = 0.5 + 0.5 * std::cos(kTwoPi * f * coord(u, v)); break;
                case Family::Checker: {
                    const long a = static_cast<long>(std::floor(2.0 * f * u));
                    const long b = static_cast<long>(std::floor(2.0 * f * v));
                    s = ((a + b) % 2 == 0) ? 1.0 : 0.0;
                    break;
                }
                case Family::Gradient: s = 1.0 - coord(u, v); break;
                case Family::Blobs:
                    for (const auto& b : blobs) {
                        const double du = u - b[0], dv = v - b[1];
                        s += std::exp(-(du * du + dv * dv) / (2.0 * b[2] * b[2]));
                    }
                    s = std::min(1.0, s);
                    break;
            }
            out.at(y, x) = s;
        }
    return out;
}

Tensor render_texture(const TextureSpec& spec, std::size_t h, std::size_t w) {
    const Tensor wts = texture_weights(spec, h, w);
    const Rgb a = palette_color(spec.color_a), b = palette_color(spec.color_b);
    Tensor img({3, h, w});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double s = wts.at(y, x);
                img.at(c, y, x) = s * a[c] + (1.0 - s) * b[c];
            }
    return img;
}

Tokens texture_tokens(const TextureSpec& spec) {
    check_enum(spec.family, 4, "texture family");
    Tokens t{vocab::id(vocab::kFamilies[static_cast<std::size_t>(spec.family)])};
    if (spec.family == Family::Stripes || spec.family == Family::Gradient)
        t.push_back(vocab::id(vocab::kOrientations[static_cast<std::size_t>(spec.orientation)]));
    if (spec.family != Family::Gradient) t.push_back(vocab::id(spec.frequency >= 5 ? "fine" : "coarse"));
    t.push_back(vocab::id(vocab::kColors.at(spec.color_a)));
    if (spec.color_b != spec.color_a) t.push_back(vocab::id(vocab::kColors.at(spec.color_b)));
    return t;
}

Tokens foreground_tokens(const ForegroundSpec& spec) {
    check_enum(spec.shape, 5, "shape");
    check_enum(spec.fill, 3, "fill");
    return {vocab::id(vocab::kColors.at(spec.color)), vocab::id(vocab::kFills[static_cast<std::size_t>(spec.fill)]),
            vocab::id(vocab::kShapes[static_cast<std::size_t>(spec.shape)])};
}

bool foreground_contains(const ForegroundSpec& spec, double px, double py, std::size_t size) {
    const double s = static_cast<double>(size);
    const double dx = px - spec.cx * s, dy = py - spec.cy * s, r = spec.radius * s;
    switch (spec.shape) {
        case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
        case ShapeKind::Square: return std::max(std::abs(dx), std::abs(dy)) <= r;
        case ShapeKind::Diamond: return std::abs(dx) + std::abs(dy) <= r;
        case ShapeKind::Triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
        case ShapeKind::Ring: {
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.25 * r * r;
        }
    }
    throw ContractError("invalid shape");
}

SceneSpec random_scene_spec(Rng& rng, bool with_foreground) {
    SceneSpec s;
    s.background.family = static_cast<Family>(rng.below(4));
    s.background.orientation = static_cast<Orientation>(rng.below(3));
    s.background.frequency = rng.range_int(2, 8);
    s.background.color_a = rng.below(kPalette.size());
    s.background.color_b = (s.background.color_a + 1 + rng.below(kPalette.size() - 1)) % kPalette.size();
    s.background.seed = rng.next_u64();
    if (with_foreground) {
        ForegroundSpec f;
        f.shape = static_cast<ShapeKind>(rng.below(5));
        f.fill = static_cast<Fill>(rng.below(3));
        f.color = rng.below(kPalette.size());
        f.radius = rng.uniform(0.12, 0.25);
        f.cx = rng.uniform(f.radius, 1.0 - f.radius);
        f.cy = rng.uniform(f.radius, 1.0 - f.radius);
        s.foreground = f;
    }
    return s;
}

Scene gen_scene(const SceneSpec& spec, std::size_t size, std::uint64_t /*seed*/) {
    if (size == 0) throw ContractError("gen_scene: size must be positive");
    Scene out;
    out.image = render_texture(spec.background, size, size);
    out.bg_tokens = texture_tokens(spec.background);
    out.segmentation = Tensor({1, size, size});
    if (!spec.foreground) return out;
    const ForegroundSpec& f = *spec.foreground;
    out.fg_tokens = foreground_tokens(f);
    const Rgb col = palette_color(f.color);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            if (!foreground_contains(f, x + 0.5, y + 0.5, size)) continue;
            out.segmentation.at(0, y, x) = 1.0;
            double shade = 1.0;
            if (f.fill == Fill::Striped && (y / 3) % 2 == 1) shade = 0.45;
            if (f.fill == Fill::Dotted && (x % 6) >= 1 && (x % 6) <= 3 && (y % 6) >= 1 && (y % 6) <= 3) shade = 0.45;
            for (std::size_t c = 0; c < 3; ++c) out.image.at(c, y, x) = shade * col[c];
        }
    return out;
}

const char* mask_kind_name(MaskKind kind) {
    switch (kind) {
        case MaskKind::Brush: return "brush";
        case MaskKind::Rectangle: return "rectangle";
        case MaskKind::RandomShape: return "random-shape";
        case MaskKind::Segmentation: return "segmentation";
    }
    throw ContractError("invalid mask kind " + std::to_string(static_cast<int>(kind)));
}

MaskKind mask_kind_from_name(const std::string& name) {
    for (MaskKind k : {MaskKind::Brush, MaskKind::Rectangle, MaskKind::RandomShape, MaskKind::Segmentation})
        if (name == mask_kind_name(k)) return k;
    throw ContractError("unknown mask kind '" + name + "'");
}

Tensor gen_mask(const MaskSpec& spec, std::size_t size) {
    check_enum(spec.kind, 4, "mask kind");
    if (size == 0) throw ContractError("gen_mask: size must be positive");
    Rng rng(derive_seed({spec.seed, 0x3A5C}));
    switch (spec.kind) {
        case MaskKind::Brush: return brush_mask(rng, size);
        case MaskKind::Rectangle: {
            std::array<std::size_t, 4> r{};
            if (spec.rect) {
                r = *spec.rect;
                if (r[0] > r[2] || r[1] > r[3] || r[2] > size || r[3] > size)
                    throw ContractError("gen_mask: rectangle outside the image");
            } else {
                const std::size_t lo = std::max<std::size_t>(1, size / 4), hi = std::max(lo, size / 2);
                const std::size_t rh = lo + rng.below(hi - lo + 1), rw = lo + rng.below(hi - lo + 1);
                r[0] = rng.below(size - rh + 1);
                r[1] = rng.below(size - rw + 1);
                r[2] = r[0] + rh;
                r[3] = r[1] + rw;
            }
            Tensor mask({1, size, size});
            for (std::size_t y = r[0]; y < r[2]; ++y)
                for (std::size_t x = r[1]; x < r[3]; ++x) mask.at(0, y, x) = 1.0;
            return mask;
        }
        case MaskKind::RandomShape: return random_primitive(rng, size);
        case MaskKind::Segmentation: {
            const Shape want{1, size, size};
            if (spec.segmentation.shape() != want)
                throw ShapeError("gen_mask: segmentation mask " + shape_str(spec.segmentation.shape()) + " vs " +
                                 shape_str(want));
            require_binary_mask(spec.segmentation, "gen_mask");
            return spec.segmentation;
        }
    }
    throw ContractError("invalid mask kind");
}

DegradeParams draw_degrade_params(std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xDE60}));
    DegradeParams p;
    p.blur_sigma = rng.uniform(0.5, 2.0);
    p.resample = true;
    p.noise_sigma = rng.uniform(0.01, 0.05);
    return p;
}

Tensor degrade(const Tensor& img, const DegradeParams& p, std::uint64_t noise_seed) {
    require_image(img, "degrade");
    Tensor out = gaussian_blur(img, p.blur_sigma);
    if (p.resample) {
        const std::size_t h = height(img), w = width(img);
        out = resize_bilinear(resize_bilinear(out, std::max<std::size_t>(1, h / 2), std::max<std::size_t>(1, w / 2)),
                              h, w);
    }
    if (p.noise_sigma > 0.0) {
        Rng rng(derive_seed({noise_seed, 0x9015}));
        for (auto& v : out.storage()) v += p.noise_sigma * rng.normal();
    }
    return out;
}

Tensor degrade(const Tensor& img, std::uint64_t seed) { return degrade(img, draw_degrade_params(seed), seed); }

Tokens DatasetItem::prompt() const { return compose_prompt(fg_tokens, bg_tokens); }

TrainingExample DatasetItem::example() const { return {image, mask, prompt()}; }

std::size_t random_mask_count(std::size_t count, double mix) {
    if (!(mix >= 0.0 && mix <= 1.0)) throw ContractError("mask mix ratio must lie in [0, 1]");
    // The small slack keeps e.g. 0.6 * 1000 from rounding up to 601.
    return std::min(count, static_cast<std::size_t>(std::ceil(mix * static_cast<double>(count) - 1e-9)));
}

DatasetItem gen_item(std::size_t index, std::size_t count, std::size_t size, double mix, std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xDA7A, index}));
    const SceneSpec spec = random_scene_spec(rng, true);
    Scene scene = gen_scene(spec, size);
    DatasetItem item;
    item.index = index;
    MaskSpec ms;
    ms.seed = rng.next_u64();
    if (index < random_mask_count(count, mix)) {
        ms.kind = static_cast<MaskKind>(rng.below(3));
    } else {
        ms.kind = MaskKind::Segmentation;
        ms.segmentation = scene.segmentation;
    }
    item.mask = gen_mask(ms, size);
    item.mask_kind = ms.kind;
    item.image = std::move(scene.image);
    item.fg_tokens = std::move(scene.fg_tokens);
    item.bg_tokens = std::move(scene.bg_tokens);
    return item;
}

std::vector<DatasetItem> gen_items(std::size_t count, std::size_t size, double mix, std::uint64_t seed,
                                   std::size_t first, std::size_t jobs) {
    std::vector<DatasetItem> items(count);
    const std::size_t total = first + count;
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
        pool.emplace_back([&, j] {
            for (std::size_t i = j; i < count; i += jobs) items[i] = gen_item(first + i, total, size, mix, seed);
        });
    for (auto& t : pool) t.join();
    return items;
}

nlohmann::json build_dataset(std::size_t count, std::size_t size, double mix, std::uint64_t seed,
                             const std::filesystem::path& out, std::size_t jobs) {
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create directory " + out.string() + ": " + ec.message());
    const auto items = gen_items(count, size, mix, seed, 0, jobs);
    nlohmann::json manifest;
    manifest["count"] = count;
    manifest["size"] = size;
    manifest["mix"] = mix;
    manifest["seed"] = seed;
    manifest["items"] = nlohmann::json::array();
    for (const auto& it : items) {
        const std::string id = pad5(it.index);
        const std::string img = "img_" + id + ".ppm", mask = "mask_" + id + ".pgm", meta = "meta_" + id + ".json";
        write_netpbm(out / img, it.image);
        write_mask(out / mask, it.mask);
        nlohmann::json m;
        m["index"] = it.index;
        m["fg"] = tokens_json(it.fg_tokens);
        m["bg"] = tokens_json(it.bg_tokens);
        m["prompt"] = vocab::render(it.prompt());
        m["mask_kind"] = mask_kind_name(it.mask_kind);
        write_text(out / meta, m.dump(2) + "\n");
        manifest["items"].push_back({{"index", it.index}, {"image", img}, {"mask", mask}, {"meta", meta}});
    }
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

std::vector<DatasetItem> load_dataset(const std::filesystem::path& dir) {
    const nlohmann::json manifest = read_json(dir / "manifest.json");
    std::vector<DatasetItem> out;
    try {
        for (const auto& e : manifest.at("items")) {
            DatasetItem it;
            it.index = e.at("index").get<std::size_t>();
            it.image = read_netpbm(dir / e.at("image").get<std::string>());
            it.mask = read_mask(dir / e.at("mask").get<std::string>());
            const nlohmann::json meta = read_json(dir / e.at("meta").get<std::string>());
            it.fg_tokens = tokens_from_json(meta.at("fg"));
            it.bg_tokens = tokens_from_json(meta.at("bg"));
            it.mask_kind = mask_kind_from_name(meta.at("mask_kind").get<std::string>());
            out.push_back(std::move(it));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    return out;
}

std::vector<TrainingExample> training_examples(const std::vector<DatasetItem>& items) {
    std::vector<TrainingExample> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.example());
    return out;
}

std::vector<PatchPairExample> make_patch_pairs(const std::vector<DatasetItem>& items, std::uint64_t seed) {
    std::vector<PatchPairExample> out;
    out.reserve(items.size());
    for (const auto& it : items) {
        const std::size_t h = height(it.image), w = width(it.image);
        if (h % 2 || w % 2) throw GeometryError("make_patch_pairs: image size must be even");
        const std::size_t ph = h / 2, pw = w / 2;
        Rng rng(derive_seed({seed, 0x9A12, it.index}));
        const std::size_t ti = rng.below(4);
        const std::size_t ri = (ti + 1 + rng.below(3)) % 4;
        auto patch = [&](std::size_t i) { return crop(it.image, (i / 2) * ph, (i % 2) * pw, ph, pw); };
        auto random_mask = [&] {
            MaskSpec ms;
            ms.kind = static_cast<MaskKind>(rng.below(3));
            ms.seed = rng.next_u64();
            return gen_mask(ms, ph);
        };
        if (ph != pw) throw GeometryError("make_patch_pairs: square images required");
        PatchPairExample ex;
        ex.target = patch(ti);
        ex.target_mask = random_mask();
        ex.degraded = degrade(ex.target, rng.next_u64());
        ex.reference_mask = random_mask();
        ex.reference = apply_mask(patch(ri), ex.reference_mask);
        ex.prompt = it.prompt();
        ex.reference_prompt = ex.prompt;
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace padapter
