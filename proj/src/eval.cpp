#include "padapter/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "padapter/embedder.hpp"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"

namespace padapter {

namespace {

void check_triplet(const Tensor& a, const Tensor& b, const Tensor& mask, const char* op) {
    require_image(a, op);
    require_same_shape(a, b, op);
    require_binary_mask(mask, op);
    if (height(mask) != height(a) || width(mask) != width(a))
        throw ShapeError(std::string(op) + ": mask " + shape_str(mask.shape()) + " vs image " + shape_str(a.shape()));
}

nlohmann::json number(double v) {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
}

const std::vector<std::string> kMetrics = {"masked_mse", "masked_psnr", "unmasked_max_abs", "seam", "alignment"};

std::optional<double> metric(const ImageRecord& r, const std::string& name) {
    if (name == "masked_mse") return r.masked_mse;
    if (name == "masked_psnr") return r.masked_psnr;
    if (name == "unmasked_max_abs") return r.unmasked_max_abs;
    if (name == "seam") return r.seam;
    if (name == "alignment") return r.alignment;
    throw ContractError("unknown metric " + name);
}

}  // namespace

double masked_mse(const Tensor& pred, const Tensor& truth, const Tensor& mask) {
    check_triplet(pred, truth, mask, "masked_mse");
    const std::size_t c = channels(pred), h = height(pred), w = width(pred);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (mask.at(0, y, x) == 0.0) continue;
            for (std::size_t k = 0; k < c; ++k) {
                const double d = pred.at(k, y, x) - truth.at(k, y, x);
                sum += d * d;
            }
            n += c;
        }
    if (n == 0) throw ContractError("masked_mse: mask is empty");
    return sum / static_cast<double>(n);
}

double masked_psnr(const Tensor& pred, const Tensor& truth, const Tensor& mask) {
    const double mse = masked_mse(pred, truth, mask);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double unmasked_preservation(const Tensor& pred, const Tensor& input, const Tensor& mask) {
    check_triplet(pred, input, mask, "unmasked_preservation");
    const std::size_t c = channels(pred), h = height(pred), w = width(pred);
    double worst = 0.0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (mask.at(0, y, x) != 0.0) continue;
            for (std::size_t k = 0; k < c; ++k) worst = std::max(worst, std::abs(pred.at(k, y, x) - input.at(k, y, x)));
        }
    return worst;
}

double seam_score(const Tensor& img, const PatchGrid& grid) {
    require_image(img, "seam_score");
    if (height(img) != grid.height() || width(img) != grid.width())
        throw GeometryError("seam_score: image " + shape_str(img.shape()) + " does not match the patch grid");
    const std::size_t c = channels(img), h = height(img), w = width(img);
    double boundary = 0.0, interior = 0.0;
    std::size_t pairs = 0;
    // Pairs (x - 1, x) at each internal vertical boundary and at the column
    // half a patch to its left; same for horizontal boundaries.
    for (std::size_t k = 1; k < grid.cols(); ++k) {
        const std::size_t xb = k * grid.patch_w(), xi = xb - grid.patch_w() / 2;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y) {
                boundary += std::abs(img.at(ch, y, xb) - img.at(ch, y, xb - 1));
                interior += std::abs(img.at(ch, y, xi) - img.at(ch, y, xi - 1));
                ++pairs;
            }
    }
    for (std::size_t k = 1; k < grid.rows(); ++k) {
        const std::size_t yb = k * grid.patch_h(), yi = yb - grid.patch_h() / 2;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t x = 0; x < w; ++x) {
                boundary += std::abs(img.at(ch, yb, x) - img.at(ch, yb - 1, x));
                interior += std::abs(img.at(ch, yi, x) - img.at(ch, yi - 1, x));
                ++pairs;
            }
    }
    if (pairs == 0) return 0.0;
    if (grid.patch_w() < 2 || grid.patch_h() < 2)
        throw GeometryError("seam_score: patches must be at least 2 pixels wide");
    return (boundary - interior) / static_cast<double>(pairs);
}

double prompt_alignment(const Tensor& img, const Tokens& prompt) {
    Tokens content;
    for (TokenId t : prompt)
        if (t != vocab::kSep) content.push_back(t);
    return cosine_sim(embed_image(img).values, embed_text(content).values);
}

double median(std::vector<double> xs) {
    if (xs.empty()) throw ContractError("median of an empty set");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::map<std::string, MetricSummary> MetricReport::aggregates() const {
    std::map<std::string, MetricSummary> out;
    for (const auto& name : kMetrics) {
        std::vector<double> xs;
        for (const auto& r : records)
            if (auto v = metric(r, name)) xs.push_back(*v);
        if (xs.empty()) continue;
        double s = 0.0;
        for (double x : xs) s += x;
        out[name] = {median(xs), s / static_cast<double>(xs.size())};
    }
    return out;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["arm"] = arm;
    j["config"] = config;
    j["seeds"] = seeds;
    j["per_image"] = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json e;
        e["task"] = r.task;
        e["seed"] = r.seed;
        e["masked_mse"] = number(r.masked_mse);
        e["masked_psnr"] = number(r.masked_psnr);
        e["unmasked_max_abs"] = number(r.unmasked_max_abs);
        e["seam"] = r.seam ? number(*r.seam) : nlohmann::json(nullptr);
        e["alignment"] = number(r.alignment);
        j["per_image"].push_back(e);
    }
    nlohmann::json agg = nlohmann::json::object();
    for (const auto& [name, s] : aggregates()) agg[name] = {{"median", number(s.median)}, {"mean", number(s.mean)}};
    j["aggregates"] = agg;
    return j;
}

ImageRecord score(const Tensor& pred, const EvalTask& task) {
    ImageRecord r;
    r.masked_mse = masked_mse(pred, task.truth, task.mask);
    r.masked_psnr = masked_psnr(pred, task.truth, task.mask);
    r.unmasked_max_abs = unmasked_preservation(pred, task.truth, task.mask);
    if (task.grid) r.seam = seam_score(pred, *task.grid);
    r.alignment = prompt_alignment(pred, task.prompt);
    return r;
}

MetricReport evaluate_arm(const ArmSpec& arm, const std::vector<EvalTask>& tasks, std::size_t jobs) {
    if (!arm.run) throw ContractError("evaluate_arm: arm '" + arm.name + "' has no runner");
    if (arm.seeds.empty()) throw ContractError("evaluate_arm: arm '" + arm.name + "' has no seeds");
    MetricReport rep;
    rep.arm = arm.name;
    rep.config = arm.config;
    rep.seeds = arm.seeds;
    const std::size_t n = tasks.size() * arm.seeds.size();
    rep.records.resize(n);
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= n) return;
            const std::size_t s = k / tasks.size(), t = k % tasks.size();
            try {
                ImageRecord r = score(arm.run(tasks[t], t, arm.seeds[s]), tasks[t]);
                r.task = t;
                r.seed = arm.seeds[s];
                rep.records[k] = r;
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!error) error = std::current_exception();
                next = n;
            }
        }
    };
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (error) std::rethrow_exception(error);
    return rep;
}

AblationResult run_ablation(const ArmSpec& a, const ArmSpec& b, const std::vector<EvalTask>& tasks, std::size_t jobs) {
    if (a.seeds != b.seeds) throw ContractError("run_ablation: arms '" + a.name + "' and '" + b.name + "' use different seeds");
    AblationResult res;
    res.a = evaluate_arm(a, tasks, jobs);
    res.b = evaluate_arm(b, tasks, jobs);
    const auto agg_a = res.a.aggregates(), agg_b = res.b.aggregates();
    res.deltas = nlohmann::json::object();
    for (const auto& name : kMetrics) {
        if (!agg_a.count(name) || !agg_b.count(name)) continue;
        std::vector<double> paired;
        for (std::size_t k = 0; k < res.a.records.size(); ++k) {
            const auto va = metric(res.a.records[k], name), vb = metric(res.b.records[k], name);
            if (va && vb && std::isfinite(*va) && std::isfinite(*vb)) paired.push_back(*vb - *va);
        }
        nlohmann::json d;
        d["median_a"] = number(agg_a.at(name).median);
        d["median_b"] = number(agg_b.at(name).median);
        const double diff = agg_b.at(name).median - agg_a.at(name).median;
        d["median_delta"] = number(std::isnan(diff) ? 0.0 : diff);
        d["paired_median_delta"] = paired.empty() ? nlohmann::json(0.0) : number(median(paired));
        res.deltas[name] = d;
    }
    return res;
}

}  // namespace padapter
