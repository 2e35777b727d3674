#pragma once

// AdamW with decoupled weight decay, and the warmup + cosine learning-rate
// schedule: linear from base_lr/warmup_epochs to base_lr over the warmup,
// then min_lr + 0.5*(base_lr - min_lr)*(1 + cos(pi * progress)) over the rest.

#include <cstdint>
#include <vector>

#include "mutr/tensor.hpp"

namespace mutr {

struct ScheduleSpec {
    double base_lr = 4e-4;
    int warmup_epochs = 40;
    int total_epochs = 440;  // warmup + cosine span
    double min_lr = 0.0;
};

double lr_at(double epoch, const ScheduleSpec& spec);

struct OptimState {
    std::vector<Tensor> m;  // first moments, parallel to the parameter list
    std::vector<Tensor> v;  // second moments
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double base_lr = 4e-4;
};

// One optimizer step. Gradients are read from each parameter's grad slot (an
// absent slot counts as zero). decay[i] gates the decoupled weight decay;
// moments are lazily allocated on the first step.
void adamw_step(std::vector<Tensor>& params, const std::vector<bool>& decay, OptimState& state, double lr);

}  // namespace mutr
