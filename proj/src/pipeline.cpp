#include "padapter/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "padapter/control.hpp"
#include "padapter/dca.hpp"
#include "padapter/embedder.hpp"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"
#include "padapter/rpa.hpp"

namespace padapter {

namespace {

constexpr std::uint64_t kStage1Stream = 0x5761;
constexpr std::uint64_t kPatchStream = 0x5762;
constexpr std::uint64_t kRefStream = 0x5763;

bool has_rpa(const ParameterStore& store, const DenoiserConfig& cfg) {
    for (std::size_t l : cfg.adapted_list())
        if (!store.contains(layer_prefix("rpa", l) + "wk") || !store.contains(layer_prefix("rpa", l) + "wv"))
            return false;
    return true;
}

}  // namespace

PatchGrid::PatchGrid(std::size_t height, std::size_t width, std::size_t patch_h, std::size_t patch_w)
    : h_(height), w_(width), ph_(patch_h), pw_(patch_w) {
    if (ph_ == 0 || pw_ == 0 || h_ == 0 || w_ == 0 || h_ % ph_ || w_ % pw_)
        throw GeometryError("patch grid: " + std::to_string(h_) + "x" + std::to_string(w_) +
                            " is not divisible into " + std::to_string(ph_) + "x" + std::to_string(pw_) + " patches");
}

PixelRect PatchGrid::rect(std::size_t i) const {
    if (i >= count()) throw RangeError("patch index " + std::to_string(i) + " out of range");
    return {(i / cols()) * ph_, (i % cols()) * pw_, ph_, pw_};
}

std::vector<Tensor> split(const Tensor& img, const PatchGrid& grid) {
    require_image(img, "split");
    if (height(img) != grid.height() || width(img) != grid.width())
        throw GeometryError("split: image " + shape_str(img.shape()) + " does not match the patch grid");
    std::vector<Tensor> out;
    out.reserve(grid.count());
    for (std::size_t i = 0; i < grid.count(); ++i) {
        const PixelRect r = grid.rect(i);
        out.push_back(crop(img, r.y, r.x, r.h, r.w));
    }
    return out;
}

Tensor assemble(const std::vector<Tensor>& patches, const PatchGrid& grid) {
    if (patches.size() != grid.count())
        throw ContractError("assemble: " + std::to_string(patches.size()) + " patches for a grid of " +
                            std::to_string(grid.count()));
    const std::size_t c = channels(patches.at(0));
    Tensor img({c, grid.height(), grid.width()});
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const PixelRect r = grid.rect(i);
        const Shape want{c, r.h, r.w};
        if (patches[i].shape() != want)
            throw ShapeError("assemble: patch " + std::to_string(i) + " is " + shape_str(patches[i].shape()) +
                             ", expected " + shape_str(want));
        paste(img, patches[i], r.y, r.x);
    }
    return img;
}

Tensor upsample(const Tensor& img, std::size_t factor) {
    if (factor < 1) throw ContractError("upsample: factor must be >= 1");
    require_image(img, "upsample");
    if (factor == 1) return img;
    return resize_bilinear(img, height(img) * factor, width(img) * factor);
}

Tensor run_stage1(const Tensor& masked, const Tensor& mask, const Tokens& prompt, const ParameterStore& model,
                  const SamplerConfig& sampler, std::uint64_t seed) {
    const DenoiserConfig cfg = config_from_store(model);
    require_image(masked, "run_stage1");
    if (height(masked) > cfg.height || width(masked) > cfg.width)
        throw GeometryError("run_stage1: input " + shape_str(masked.shape()) + " exceeds base resolution " +
                            std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    require_binary_mask(mask, "run_stage1");
    const Tensor known = apply_mask(masked, mask);
    if (mask_is_empty(mask)) return known;
    const AdapterMode mode{.dca = has_dca(model, cfg)};
    const NoiseSchedule sched = default_schedule(cfg.timesteps);
    static const Tokens kEmpty;
    const NoisePredictor predict = [&](const Tensor& x_t, int t, bool conditional) {
        DenoiseRequest req;
        req.y_t = &x_t;
        req.timestep = t;
        req.prompt = conditional ? &prompt : &kEmpty;
        req.mask = &mask;
        req.masked_image = &known;
        return denoise(model, cfg, req, mode);
    };
    return sample_inpaint(predict, known, mask, sched, sampler, derive_seed({seed, kStage1Stream}));
}

std::size_t stage1_factor(std::size_t h, std::size_t w, const DenoiserConfig& cfg) {
    for (std::size_t f = 1; f <= std::max(h, w); ++f) {
        if (h % f || w % f) continue;
        const std::size_t lh = h / f, lw = w / f;
        if (lh <= cfg.height && lw <= cfg.width && lh % cfg.token == 0 && lw % cfg.token == 0) return f;
        if (lh < cfg.token || lw < cfg.token) break;
    }
    throw GeometryError("no integer downsampling factor maps " + std::to_string(h) + "x" + std::to_string(w) +
                        " onto the " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                        " base resolution");
}

StageOneResult run_stage1(const InpaintTask& task, const ParameterStore& model, const SamplerConfig& sampler,
                          const PatchGrid& grid) {
    const DenoiserConfig cfg = config_from_store(model);
    require_image(task.image, "run_stage1");
    if (height(task.image) != grid.height() || width(task.image) != grid.width())
        throw GeometryError("run_stage1: image " + shape_str(task.image.shape()) + " does not match the patch grid");
    const Tensor masked = apply_mask(task.image, task.mask);
    StageOneResult r;
    r.factor = stage1_factor(grid.height(), grid.width(), cfg);
    const Tensor low_in = r.factor == 1 ? masked
                                        : resize_bilinear(masked, grid.height() / r.factor, grid.width() / r.factor);
    const Tensor low_mask = downsample_mask_any(task.mask, r.factor);
    r.low = run_stage1(low_in, low_mask, task.prompt, model, sampler, task.seed);
    r.upsampled = blend_step(upsample(r.low, r.factor), masked, task.mask);
    r.patches = split(r.upsampled, grid);
    return r;
}

PatchContext make_patch_context(const InpaintTask& task, const StageOneResult& s1, const PatchGrid& grid) {
    PatchContext ctx;
    ctx.masked = split(apply_mask(task.image, task.mask), grid);
    ctx.masks = split(task.mask, grid);
    ctx.stage1 = s1.patches;
    for (std::size_t i = 0; i < grid.count(); ++i) {
        auto it = task.patch_prompts.find(i);
        ctx.prompts.push_back(it != task.patch_prompts.end() ? it->second : task.prompt);
    }
    for (const auto& [i, p] : task.patch_prompts)
        if (i >= grid.count()) throw RangeError("patch prompt index " + std::to_string(i) + " out of range");
    return ctx;
}

PatchOutput run_stage2_patch(std::size_t i, const PatchContext& ctx, const ParameterStore& model,
                             const SamplerConfig& sampler, std::uint64_t seed, const Stage2Options& opts) {
    const std::size_t n = ctx.masked.size();
    if (i >= n) throw RangeError("run_stage2_patch: patch index " + std::to_string(i) + " out of range");
    if (ctx.masks.size() != n || ctx.stage1.size() != n || ctx.prompts.size() != n)
        throw ContractError("run_stage2_patch: inconsistent patch context");
    const Tensor& known = ctx.masked[i];
    const Tensor& mask = ctx.masks[i];
    if (mask_is_empty(mask)) return {known, std::nullopt};

    const DenoiserConfig cfg = config_from_store(model);
    AdapterMode mode{.dca = has_dca(model, cfg), .control = has_control(model, cfg)};
    PatchOutput out;
    ReferenceFeatures refs;
    if (opts.use_rpa) {
        if (!has_rpa(model, cfg)) throw ContractError("run_stage2_patch: RPA requested but model has no rpa weights");
        if (n < 2) throw ContractError("run_stage2_patch: no candidate reference patches");
        std::size_t r;
        if (opts.reference) {
            r = *opts.reference;
            if (r >= n || r == i) throw ContractError("run_stage2_patch: invalid reference patch index");
        } else {
            r = select_reference(ctx.stage1[i], ctx.masked, i);
        }
        refs = extract_reference_features(ctx.masked[r], ctx.masks[r], ctx.prompts[r], model, cfg,
                                          reference_timestep(cfg), derive_seed({seed, kRefStream, i}), r);
        mode.rpa = true;
        out.reference = r;
    }
    const NoiseSchedule sched = default_schedule(cfg.timesteps);
    static const Tokens kEmpty;
    const NoisePredictor predict = [&](const Tensor& x_t, int t, bool conditional) {
        DenoiseRequest req;
        req.y_t = &x_t;
        req.timestep = t;
        req.prompt = conditional ? &ctx.prompts[i] : &kEmpty;
        req.mask = &mask;
        req.masked_image = &known;
        req.refs = mode.rpa ? &refs : nullptr;
        req.control_source = mode.control ? &ctx.stage1[i] : nullptr;
        return denoise(model, cfg, req, mode);
    };
    out.image = sample_inpaint(predict, known, mask, sched, sampler, derive_seed({seed, kPatchStream, i}));
    return out;
}

PipelineResult run_full_pipeline(const InpaintTask& task, const PipelineModels& models, const PipelineConfig& cfg) {
    if (!models.stage1) throw ContractError("run_full_pipeline: stage-1 model required");
    require_image(task.image, "run_full_pipeline");
    require_binary_mask(task.mask, "run_full_pipeline");
    if (height(task.mask) != height(task.image) || width(task.mask) != width(task.image))
        throw ShapeError("run_full_pipeline: mask " + shape_str(task.mask.shape()) + " vs image " +
                         shape_str(task.image.shape()));
    const PatchGrid grid(height(task.image), width(task.image), cfg.patch_h, cfg.patch_w);
    PipelineResult res;
    res.stage1 = run_stage1(task, *models.stage1, cfg.sampler, grid);
    res.references.assign(grid.count(), std::nullopt);
    if (!models.stage2) {
        res.image = res.stage1.upsampled;
        return res;
    }
    const PatchContext ctx = make_patch_context(task, res.stage1, grid);

    std::vector<std::size_t> order = cfg.order;
    if (order.empty()) {
        for (std::size_t i = 0; i < grid.count(); ++i) order.push_back(i);
    } else {
        std::vector<std::size_t> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i)
            if (sorted[i] != i || sorted.size() != grid.count())
                throw ContractError("run_full_pipeline: processing order is not a permutation of the patches");
    }
    // A single patch has no reference candidates; refine it without RPA.
    Stage2Options opts;
    opts.use_rpa = cfg.use_rpa && grid.count() > 1;
    std::vector<Tensor> out(grid.count());
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= order.size()) return;
            const std::size_t i = order[k];
            try {
                PatchOutput p = run_stage2_patch(i, ctx, *models.stage2, cfg.sampler, task.seed, opts);
                out[i] = std::move(p.image);
                res.references[i] = p.reference;
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                next = order.size();
            }
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, order.size()));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    res.image = assemble(out, grid);
    return res;
}

}  // namespace padapter
