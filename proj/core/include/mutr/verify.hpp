#pragma once

// Gradient verification harness behind the gradcheck CLI surface. Each block
// type is instantiated on tiny shapes and its analytic backward is compared
// against central finite differences over the input and every parameter.
// The oracle runs the double instantiation of the same templated kernels;
// storage stays f32 everywhere else.

#include <cstdint>
#include <string>
#include <vector>

#include "mutr/config.hpp"

namespace mutr {

struct BlockCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t components = 0;
};

// One result per block type: stem, mv2, transformer_layer, mobilevit_block,
// decoder_block.
std::vector<BlockCheckResult> run_block_gradchecks(std::uint64_t seed, double h = 1e-3);

// Full-model check on the given config: scalarized loss over the forward pass
// plus the segmentation loss path, probing the input and a deterministic
// sample of components of every parameter tensor.
BlockCheckResult run_model_gradcheck(const ModelConfig& config, std::uint64_t seed, double h = 1e-3,
                                     std::int64_t max_components_per_tensor = 25);

}  // namespace mutr
