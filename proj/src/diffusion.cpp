#include "padapter/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"

namespace padapter {

namespace {
constexpr std::uint64_t kInitStream = 0x1A17;
constexpr std::uint64_t kStepStream = 0x57E9;
constexpr std::uint64_t kBlendStream = 0xB1E4;
}  // namespace

double NoiseSchedule::alpha_bar_state(int t) const {
    if (t < 0 || t > T) throw RangeError("chain state " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ContractError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ContractError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
        s.beta[static_cast<std::size_t>(i)] = b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

NoiseSchedule default_schedule(int T) {
    if (T < 1) throw ContractError("default_schedule: T must be >= 1");
    const double scale = static_cast<double>(kDefaultTimesteps) / T;
    return make_schedule(T, std::min(kDefaultBetaStart * scale, 0.5), std::min(kDefaultBetaEnd * scale, 0.999));
}

Tensor forward_diffuse(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps) {
    if (t < 0 || t >= sched.T)
        throw RangeError("forward_diffuse: timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) +
                         ")");
    require_same_shape(x0, eps, "forward_diffuse");
    const double a = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = sa * x0[i] + sn * eps[i];
    return out;
}

Tensor diffuse_to_state(const NoiseSchedule& sched, const Tensor& x0, int state, const Tensor& eps) {
    if (state == 0) return x0;
    return forward_diffuse(sched, x0, state - 1, eps);
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale) {
    require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    Tensor out(eps_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
    return out;
}

Tensor predict_x0(const NoiseSchedule& sched, const LatentState& state, const Tensor& eps_hat) {
    if (state.t < 1) throw ContractError("predict_x0: state must be noisy (t >= 1)");
    require_same_shape(state.value, eps_hat, "predict_x0");
    const double a = sched.alpha_bar_state(state.t);
    const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
    Tensor x0(state.value.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = (state.value[i] - sn * eps_hat[i]) / sa;
    return x0;
}

LatentState sample_step(const LatentState& state, const Tensor& eps_hat, const NoiseSchedule& sched, Rng& rng,
                        int t_prev, const StepOptions& opts) {
    if (state.t <= 0) throw ContractError("sample_step: already at t = 0");
    if (t_prev < 0 || t_prev >= state.t) throw ContractError("sample_step: t_prev must lie in [0, t)");
    Tensor x0 = predict_x0(sched, state, eps_hat);
    const double a_t = sched.alpha_bar_state(state.t);
    const double a_s = sched.alpha_bar_state(t_prev);
    Tensor eps = eps_hat;
    if (opts.clip_x0) {
        bool clipped = false;
        for (auto& v : x0.storage()) {
            const double c = std::clamp(v, opts.clip_lo, opts.clip_hi);
            clipped |= c != v;
            v = c;
        }
        if (clipped) {
            // Keep the direction term consistent with the clipped estimate.
            const double sa = std::sqrt(a_t), sn = std::sqrt(1.0 - a_t);
            for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (state.value[i] - sa * x0[i]) / sn;
        }
    }
    if (t_prev == 0) return {std::move(x0), 0};

    const double sigma = opts.eta * std::sqrt((1.0 - a_s) / (1.0 - a_t)) * std::sqrt(1.0 - a_t / a_s);
    const double dir = std::sqrt(std::max(0.0, 1.0 - a_s - sigma * sigma));
    const double sa_s = std::sqrt(a_s);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa_s * x0[i] + dir * eps[i];
    if (sigma > 0.0)
        for (auto& v : out.storage()) v += sigma * rng.normal();
    return {std::move(out), t_prev};
}

Tensor blend_step(const Tensor& gen, const Tensor& known, const Tensor& mask) {
    require_same_shape(gen, known, "blend_step");
    require_image(gen, "blend_step");
    require_binary_mask(mask, "blend_step");
    if (height(mask) != height(gen) || width(mask) != width(gen))
        throw ShapeError("blend_step: mask " + shape_str(mask.shape()) + " vs image " + shape_str(gen.shape()));
    const std::size_t hw = height(gen) * width(gen);
    Tensor out(gen.shape());
    for (std::size_t ch = 0; ch < channels(gen); ++ch)
        for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t k = ch * hw + i;
            out[k] = mask[i] != 0.0 ? gen[k] : known[k];
        }
    return out;
}

std::vector<int> sampling_states(int T, int steps) {
    if (steps < 1 || steps > T) throw ContractError("sampling_states: steps must lie in [1, T]");
    std::vector<int> states(static_cast<std::size_t>(steps) + 1);
    for (int k = 0; k <= steps; ++k)
        states[static_cast<std::size_t>(k)] = static_cast<int>((static_cast<long>(k) * T) / steps);
    return states;
}

Tensor sample_inpaint(const NoisePredictor& predict, const Tensor& known, const Tensor& mask,
                      const NoiseSchedule& sched, const SamplerConfig& cfg, std::uint64_t seed) {
    require_image(known, "sample_inpaint");
    require_binary_mask(mask, "sample_inpaint");
    const auto states = sampling_states(sched.T, cfg.steps);
    Rng init(derive_seed({seed, kInitStream}));
    LatentState state{Tensor::randn(known.shape(), init), sched.T};
    for (std::size_t k = states.size() - 1; k >= 1; --k) {
        const int t = states[k];
        const int t_prev = states[k - 1];
        Tensor eps = predict(state.value, t - 1, true);
        if (cfg.cfg_scale != 1.0) eps = cfg_combine(predict(state.value, t - 1, false), eps, cfg.cfg_scale);
        Rng step_rng(derive_seed({seed, kStepStream, static_cast<std::uint64_t>(t)}));
        state = sample_step(state, eps, sched, step_rng, t_prev, cfg.step);
        Rng blend_rng(derive_seed({seed, kBlendStream, static_cast<std::uint64_t>(t_prev)}));
        const Tensor noise = Tensor::randn(known.shape(), blend_rng);
        state.value = blend_step(state.value, diffuse_to_state(sched, known, t_prev, noise), mask);
    }
    return state.value;
}

}  // namespace padapter
