#pragma once

#include <vector>

#include "padapter/tensor.hpp"
#include "padapter/vocab.hpp"

namespace padapter {

// One masked-inpainting tuple: clean image, binary hole mask, global prompt.
struct TrainingExample {
    Tensor image;  // {C,H,W}
    Tensor mask;   // {1,H,W}
    Tokens prompt;
};

// Stage-2 training pair: a degraded/masked target patch and a clean
// reference patch cut from the same scene.
struct PatchPairExample {
    Tensor target;         // clean target patch
    Tensor target_mask;
    Tensor degraded;       // stands in for the upsampled stage-1 output y^i
    Tensor reference;      // masked reference patch X_m^r
    Tensor reference_mask;
    Tokens prompt;
    Tokens reference_prompt;
};

// Base pretraining runs from scratch and uses a larger step than adapter training.
inline constexpr double kPretrainLr = 3e-4;

struct TrainHyper {
    int steps = 2000;
    int batch = 16;
    double lr = 1e-4;
    double weight_decay = 0.0;
    double cond_dropout = 0.1;  // probability of training on the empty prompt
};

}  // namespace padapter
