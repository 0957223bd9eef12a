#pragma once

#include <vector>

#include "padapter/backbone.hpp"

namespace padapter {

// Simplified structure-guidance branch: per layer a zero-initialized linear
// projection ctrl.l<i>.w of the tokenized stage-1 patch, added to the residual
// stream at the start of block i.
void init_control(ParameterStore& store, const DenoiserConfig& cfg);
bool has_control(const ParameterStore& store, const DenoiserConfig& cfg);

NodeId control_feature(Graph& g, ParamBinder& bind, NodeId source_tokens, std::size_t layer);

std::vector<Tensor> control_features(const Tensor& stage1_patch, const ParameterStore& store,
                                     const DenoiserConfig& cfg);

}  // namespace padapter
