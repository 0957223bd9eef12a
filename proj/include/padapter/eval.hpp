#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "padapter/pipeline.hpp"
#include "padapter/tensor.hpp"
#include "padapter/vocab.hpp"

namespace padapter {

// Mean squared error over masked pixels (all channels). Empty mask is a
// contract error.
double masked_mse(const Tensor& pred, const Tensor& truth, const Tensor& mask);
// 10 log10(1 / mse) for [0, 1] images; +infinity when mse = 0.
double masked_psnr(const Tensor& pred, const Tensor& truth, const Tensor& mask);
// Max |pred - input| over unmasked pixels; 0 when everything is masked.
double unmasked_preservation(const Tensor& pred, const Tensor& input, const Tensor& mask);

// Mean |difference| over pixel pairs straddling patch boundaries minus the
// mean over the pairs half a patch further in, averaged over channels. Zero
// for a grid without internal boundaries.
double seam_score(const Tensor& img, const PatchGrid& grid);

double prompt_alignment(const Tensor& img, const Tokens& prompt);

struct ImageRecord {
    std::size_t task = 0;
    std::uint64_t seed = 0;
    double masked_mse = 0.0;
    double masked_psnr = 0.0;
    double unmasked_max_abs = 0.0;
    std::optional<double> seam;
    double alignment = 0.0;
};

struct MetricSummary {
    double median = 0.0;
    double mean = 0.0;
};

double median(std::vector<double> xs);

struct MetricReport {
    std::string arm;
    nlohmann::json config;
    std::vector<std::uint64_t> seeds;
    std::vector<ImageRecord> records;

    // Aggregates over records, keyed by metric name.
    std::map<std::string, MetricSummary> aggregates() const;
    nlohmann::json to_json() const;
};

struct EvalTask {
    Tensor truth;
    Tensor mask;
    Tokens prompt;
    std::optional<PatchGrid> grid;  // seam score only when set
};

ImageRecord score(const Tensor& pred, const EvalTask& task);

using ArmRunner = std::function<Tensor(const EvalTask& task, std::size_t task_index, std::uint64_t seed)>;

struct ArmSpec {
    std::string name;
    ArmRunner run;
    std::vector<std::uint64_t> seeds;
    nlohmann::json config;
};

MetricReport evaluate_arm(const ArmSpec& arm, const std::vector<EvalTask>& tasks, std::size_t jobs = 1);

struct AblationResult {
    MetricReport a;
    MetricReport b;
    // Per metric: median of a, median of b, median(b) - median(a) and the
    // median of paired per-record differences b - a.
    nlohmann::json deltas;
};

// Evaluates both arms on matched (task, seed) pairs; the seed lists must agree.
AblationResult run_ablation(const ArmSpec& a, const ArmSpec& b, const std::vector<EvalTask>& tasks,
                            std::size_t jobs = 1);

}  // namespace padapter
