#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "padapter/tensor.hpp"

namespace padapter {

class Rng;

// Linear-beta DDPM schedule. Schedule index i in [0, T) has noise level
// alpha_bar[i]. Sampling-chain states are numbered t in [0, T]: state 0 is the
// clean image (alpha_bar = 1) and state t >= 1 sits at schedule index t - 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    double alpha_bar_state(int t) const;
};

inline constexpr int kDefaultTimesteps = 100;
inline constexpr double kDefaultBetaStart = 1e-3;
inline constexpr double kDefaultBetaEnd = 0.2;

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);
// Linear ramp scaled so the total noise budget matches the T = 100 default
// (beta from 0.1/T to 20/T).
NoiseSchedule default_schedule(int T = kDefaultTimesteps);

// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps, t a schedule index.
Tensor forward_diffuse(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps);
// Noisy copy of x0 at chain state t; state 0 returns x0 itself.
Tensor diffuse_to_state(const NoiseSchedule& sched, const Tensor& x0, int state, const Tensor& eps);

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale);

struct LatentState {
    Tensor value;
    int t = 0;
};

struct StepOptions {
    bool clip_x0 = true;
    double clip_lo = 0.0;
    double clip_hi = 1.0;
    double eta = 1.0;  // 1 = ancestral (posterior) noise, 0 = deterministic
};

// Clean-image estimate (x_t - sqrt(1 - a) eps) / sqrt(a) at chain state t >= 1.
Tensor predict_x0(const NoiseSchedule& sched, const LatentState& state, const Tensor& eps_hat);

// One reverse step from state.t to t_prev (< state.t) along the posterior
// q(x_prev | x_t, x0_hat). Stepping to state 0 returns x0_hat with no noise.
LatentState sample_step(const LatentState& state, const Tensor& eps_hat, const NoiseSchedule& sched, Rng& rng,
                        int t_prev, const StepOptions& opts = {});
inline LatentState sample_step(const LatentState& state, const Tensor& eps_hat, const NoiseSchedule& sched, Rng& rng) {
    return sample_step(state, eps_hat, sched, rng, state.t - 1);
}

// gen ⊙ M + known ⊙ (1 - M), with a {1,H,W} binary mask broadcast over channels.
Tensor blend_step(const Tensor& gen, const Tensor& known, const Tensor& mask);

// Evenly strided chain states [0, s_1, ..., T] (ascending, steps + 1 entries).
std::vector<int> sampling_states(int T, int steps);

struct SamplerConfig {
    int steps = 30;
    double cfg_scale = 7.0;
    StepOptions step;
};

// Predicts noise for chain state t (model timestep index t - 1).
using NoisePredictor = std::function<Tensor(const Tensor& x_t, int timestep_index, bool conditional)>;

// Full blended-diffusion inpainting loop: starts from seeded Gaussian noise,
// applies CFG at every step and re-imposes the forward-diffused known image
// outside the mask after every step, including the last one.
Tensor sample_inpaint(const NoisePredictor& predict, const Tensor& known, const Tensor& mask,
                      const NoiseSchedule& sched, const SamplerConfig& cfg, std::uint64_t seed);

}  // namespace padapter
