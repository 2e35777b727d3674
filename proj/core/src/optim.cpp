#include "mutr/optim.hpp"

#include <cmath>

#include "mutr/errors.hpp"

namespace mutr {

double lr_at(double epoch, const ScheduleSpec& spec) {
    if (epoch < 0.0 || epoch > static_cast<double>(spec.total_epochs)) {
        throw ArgumentError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(spec.total_epochs) + "]");
    }
    const double w = static_cast<double>(spec.warmup_epochs);
    if (epoch <= w) {
        const double start = spec.base_lr / w;
        return start + (spec.base_lr - start) * (epoch / w);
    }
    const double span = static_cast<double>(spec.total_epochs - spec.warmup_epochs);
    const double progress = (epoch - w) / span;
    return spec.min_lr + 0.5 * (spec.base_lr - spec.min_lr) * (1.0 + std::cos(M_PI * progress));
}

void adamw_step(std::vector<Tensor>& params, const std::vector<bool>& decay, OptimState& state, double lr) {
    if (decay.size() != params.size()) {
        throw ArgumentError("adamw_step: decay mask size does not match parameter count");
    }
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const auto& p : params) {
            state.m.emplace_back(p.shape());
            state.v.emplace_back(p.shape());
        }
    }
    if (state.m.size() != params.size()) {
        throw ArgumentError("adamw_step: optimizer state holds " + std::to_string(state.m.size()) +
                            " moments for " + std::to_string(params.size()) + " parameters");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (state.m[i].shape() != p.shape()) {
            throw DimensionError("adamw_step: moment shape " + shape_str(state.m[i].shape()) +
                                 " does not match parameter " + shape_str(p.shape()));
        }
        float* pd = p.data().data();
        float* md = state.m[i].data().data();
        float* vd = state.v[i].data().data();
        const float* gd = p.has_grad() ? p.grad().data() : nullptr;
        const std::int64_t n = p.numel();
        for (std::int64_t k = 0; k < n; ++k) {
            const double g = gd ? static_cast<double>(gd[k]) : 0.0;
            double mk = state.beta1 * static_cast<double>(md[k]) + (1.0 - state.beta1) * g;
            double vk = state.beta2 * static_cast<double>(vd[k]) + (1.0 - state.beta2) * g * g;
            md[k] = static_cast<float>(mk);
            vd[k] = static_cast<float>(vk);
            double theta = static_cast<double>(pd[k]);
            if (decay[i]) theta -= lr * state.weight_decay * theta;  // decoupled decay
            theta -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + state.eps);
            pd[k] = static_cast<float>(theta);
        }
    }
}

}  // namespace mutr
