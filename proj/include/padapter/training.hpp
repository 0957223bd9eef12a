#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "padapter/backbone.hpp"
#include "padapter/dataset.hpp"
#include "padapter/diffusion.hpp"

namespace padapter {

class Rng;

// Builds one example's scalar loss into a fresh graph.
using SampleLoss = std::function<NodeId(Graph& g, ParamBinder& bind, std::size_t example, Rng& rng)>;

// Minibatch AdamW over every unfrozen entry of `store`. Each example gets its
// own graph; gradients are summed in batch order, so results depend only on
// the seed. Returns the mean batch loss per step.
std::vector<double> run_training(ParameterStore& store, std::size_t dataset_size, const TrainHyper& hyper,
                                 std::uint64_t seed, const SampleLoss& sample_loss);

// Standard noise-prediction objective on one inpainting tuple: draws t and
// eps, drops the prompt with probability hyper.cond_dropout.
NodeId inpainting_loss(Graph& g, ParamBinder& bind, const DenoiserConfig& cfg, const NoiseSchedule& sched,
                       const TrainingExample& ex, const AdapterMode& mode, double cond_dropout, Rng& rng);

// Mean of consecutive non-overlapping windows of `window` entries.
std::vector<double> window_means(const std::vector<double>& xs, std::size_t window);

}  // namespace padapter
