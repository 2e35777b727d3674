#pragma once

// Checkpoint container:
//   magic "MUTR1\n"
//   u64 little-endian byte length of a UTF-8 JSON header
//   header: {version, config, tensors: [{name, shape, byte_offset}...],
//            optimizer: null | {t, beta1, beta2, eps, weight_decay, base_lr,
//                               tensors: [...]}}
//   concatenated little-endian f32 blobs in header order
// Round trips are bit-exact for every f32 blob.

#include <optional>
#include <string>

#include "mutr/model.hpp"
#include "mutr/optim.hpp"

namespace mutr {

inline constexpr char kCheckpointMagic[] = "MUTR1\n";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const OptimState* optimizer, const std::string& path);

struct LoadedCheckpoint {
    Model model;
    std::optional<OptimState> optimizer;
};

// Rebuilds the model from the embedded config and restores every blob.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Verifies the embedded config matches `expected` field-for-field, naming the
// first differing field on mismatch. With allow_shape_compatible_override the
// config diff is forgiven as long as every tensor shape still lines up.
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected,
                                 bool allow_shape_compatible_override);

}  // namespace mutr
