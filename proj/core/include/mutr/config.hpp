#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mutr/errors.hpp"

namespace mutr {

// One post-stem inverted-residual stage: (out_channels, stride, expansion).
struct StemStageSpec {
    int out_channels = 0;
    int stride = 1;
    int expansion_ratio = 2;
};

// Convolution stem: 3x3 stride-2 conv to out_channels, then MV2 stages.
struct StemSpec {
    int out_channels = 0;
    std::vector<StemStageSpec> stages;

    int final_channels() const { return stages.empty() ? out_channels : stages.back().out_channels; }
};

struct MV2BlockSpec {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;  // 1 or 2
    int expansion_ratio = 1;

    bool has_residual() const { return stride == 1 && in_channels == out_channels; }
};

struct MobileViTBlockSpec {
    int channels = 0;         // block-preserved width C
    int transformer_dim = 0;  // d
    int transformer_layers = 0;
    int heads = 4;
    double mlp_ratio = 2.0;
    int patch_h = 2;
    int patch_w = 2;
    int kernel_size = 3;  // local-representation conv
};

struct DecoderBlockSpec {
    int in_channels = 0;
    int skip_channels = 0;
    int out_channels = 0;
    MobileViTBlockSpec global_refine;
};

struct EncoderStageSpec {
    MV2BlockSpec downsample;  // always stride 2
    std::optional<MobileViTBlockSpec> vit;
};

// Final upsample (transpose conv to mid_channels) + 1x1 conv to out_channels.
struct HeadSpec {
    int mid_channels = 16;
};

struct ModelConfig {
    int image_size = 512;
    int in_channels = 3;
    StemSpec stem;
    std::vector<EncoderStageSpec> encoder_stages;
    MobileViTBlockSpec bottleneck;
    std::vector<DecoderBlockSpec> decoder_stages;
    HeadSpec head;
    int out_channels = 1;

    // Throws ConfigError listing every violated constraint.
    void validate() const;

    // Stem stride (2) times one stride-2 downsample per encoder stage.
    int total_stride() const;

    // Smallest value every accepted input size must divide by: the total
    // stride joined with each MobileViT block's (stride-at-block x patch).
    int required_divisor() const;
};

// Strict JSON round trip: unknown keys are an error.
ModelConfig config_from_json_text(const std::string& text);
ModelConfig load_config(const std::string& path);
std::string config_to_json_text(const ModelConfig& config);

// Built-in tiny configuration used by tests and desk-scale training demos.
ModelConfig tiny_config();

// The frozen reference architecture (shipped as configs/mobileunetr-ref.json).
ModelConfig reference_config();

}  // namespace mutr
