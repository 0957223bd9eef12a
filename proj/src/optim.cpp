#include "padapter/optim.hpp"

#include <cmath>

#include "padapter/errors.hpp"

namespace padapter {

void AdamW::update(const std::string& name, Tensor& param, const Tensor& grad) {
    require_same_shape(param, grad, "adamw");
    if (step_ == 0) throw ContractError("adamw: begin_step() not called");
    auto [it, inserted] = state_.try_emplace(name);
    if (inserted) {
        it->second.m = Tensor(param.shape());
        it->second.v = Tensor(param.shape());
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * param[i]);
    }
}

}  // namespace padapter
