#include "padapter/training.hpp"

#include <map>

#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/optim.hpp"
#include "padapter/rng.hpp"

namespace padapter {

std::vector<double> run_training(ParameterStore& store, std::size_t dataset_size, const TrainHyper& hyper,
                                 std::uint64_t seed, const SampleLoss& sample_loss) {
    if (dataset_size == 0) throw ContractError("training: empty dataset");
    if (hyper.batch < 1 || hyper.steps < 0) throw ContractError("training: invalid batch or step count");
    AdamW opt({.lr = hyper.lr, .weight_decay = hyper.weight_decay});
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(hyper.steps));
    for (int step = 0; step < hyper.steps; ++step) {
        Rng batch_rng(derive_seed({seed, 0xBA7C, static_cast<std::uint64_t>(step)}));
        std::map<std::string, Tensor> grads;
        double loss_sum = 0.0;
        for (int b = 0; b < hyper.batch; ++b) {
            const std::size_t idx = batch_rng.below(dataset_size);
            Rng rng(derive_seed({seed, 0x5A3E, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)}));
            Graph g;
            ParamBinder bind(g, store, true);
            const NodeId loss = sample_loss(g, bind, idx, rng);
            loss_sum += g.value(loss)[0];
            const auto grad_map = g.backward(loss);
            for (const auto& [name, id] : bind.tracked()) {
                auto [it, inserted] = grads.try_emplace(name, grad_map.at(id));
                if (!inserted) axpy(1.0, grad_map.at(id), it->second);
            }
        }
        history.push_back(loss_sum / hyper.batch);
        opt.begin_step();
        const double inv = 1.0 / hyper.batch;
        for (auto& [name, g] : grads) {
            for (auto& v : g.storage()) v *= inv;
            opt.update(name, store.mutable_value(name), g);
        }
    }
    return history;
}

NodeId inpainting_loss(Graph& g, ParamBinder& bind, const DenoiserConfig& cfg, const NoiseSchedule& sched,
                       const TrainingExample& ex, const AdapterMode& mode, double cond_dropout, Rng& rng) {
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
    const Tensor eps = Tensor::randn(ex.image.shape(), rng);
    const Tensor x_t = forward_diffuse(sched, ex.image, t, eps);
    const bool drop = rng.uniform() < cond_dropout;
    static const Tokens kEmpty;
    const Tensor masked = apply_mask(ex.image, ex.mask);
    DenoiseRequest req;
    req.y_t = &x_t;
    req.timestep = t;
    req.prompt = drop ? &kEmpty : &ex.prompt;
    req.mask = &ex.mask;
    req.masked_image = &masked;
    const NodeId pred = build_denoiser(g, bind, cfg, req, mode);
    return g.mse(pred, g.constant(tokenize(eps, cfg.token)));
}

std::vector<double> window_means(const std::vector<double>& xs, std::size_t window) {
    std::vector<double> out;
    if (window == 0) return out;
    for (std::size_t i = 0; i + window <= xs.size(); i += window) {
        double s = 0.0;
        for (std::size_t j = 0; j < window; ++j) s += xs[i + j];
        out.push_back(s / static_cast<double>(window));
    }
    return out;
}

ParameterStore pretrain_base(const std::vector<TrainingExample>& data, const DenoiserConfig& cfg,
                             const TrainHyper& hyper, std::uint64_t seed, std::vector<double>* loss_history) {
    if (data.empty()) throw ContractError("pretrain_base: empty dataset");
    ParameterStore store = init_base(cfg, seed);
    const NoiseSchedule sched = default_schedule(cfg.timesteps);
    auto history = run_training(store, data.size(), hyper, derive_seed({seed, 0x9E7A}),
                                [&](Graph& g, ParamBinder& bind, std::size_t idx, Rng& rng) {
                                    return inpainting_loss(g, bind, cfg, sched, data[idx], AdapterMode{},
                                                           hyper.cond_dropout, rng);
                                });
    if (loss_history) *loss_history = std::move(history);
    store.freeze_all();
    return store;
}

}  // namespace padapter
