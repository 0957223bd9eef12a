#include "padapter/control.hpp"

#include "padapter/errors.hpp"

namespace padapter {

void init_control(ParameterStore& store, const DenoiserConfig& cfg) {
    for (std::size_t l = 0; l < cfg.layers; ++l)
        store.set(layer_prefix("ctrl", l) + "w", Tensor({cfg.out_features(), cfg.dim}), false);
}

bool has_control(const ParameterStore& store, const DenoiserConfig& cfg) {
    for (std::size_t l = 0; l < cfg.layers; ++l)
        if (!store.contains(layer_prefix("ctrl", l) + "w")) return false;
    return true;
}

NodeId control_feature(Graph& g, ParamBinder& bind, NodeId source_tokens, std::size_t layer) {
    return g.matmul(source_tokens, bind(layer_prefix("ctrl", layer) + "w"));
}

std::vector<Tensor> control_features(const Tensor& stage1_patch, const ParameterStore& store,
                                     const DenoiserConfig& cfg) {
    const Tensor tokens = tokenize(stage1_patch, cfg.token);
    if (tokens.cols() != cfg.out_features())
        throw ShapeError("control_features: patch " + shape_str(stage1_patch.shape()) + " has wrong channel count");
    std::vector<Tensor> out;
    out.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) out.push_back(matmul(tokens, store.get(layer_prefix("ctrl", l) + "w")));
    return out;
}

}  // namespace padapter
