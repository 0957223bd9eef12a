#pragma once

#include <map>
#include <string>

#include "padapter/tensor.hpp"

namespace padapter {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with decoupled weight decay over a named set of parameters.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    // Applies one update to `param` using `grad`; state is keyed by name.
    void update(const std::string& name, Tensor& param, const Tensor& grad);
    // Call once per optimizer step, before the per-parameter updates.
    void begin_step() { ++step_; }
    long step() const { return step_; }

private:
    struct Moments {
        Tensor m;
        Tensor v;
    };
    AdamWConfig cfg_;
    long step_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace padapter
