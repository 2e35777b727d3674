#pragma once

// Assembly of the full encoder-decoder graph from a ModelConfig, with
// deterministic seeded initialization and named-parameter traversal.

#include <string>
#include <utility>
#include <vector>

#include "mutr/blocks.hpp"
#include "mutr/config.hpp"

namespace mutr {

template <typename T>
struct EncoderStageM {
    MV2BlockM<T> down;
    bool has_vit = false;
    MobileViTBlockM<T> vit;
};

template <typename T>
class ModelT {
public:
    ModelT(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        config.validate();
        Rng rng(seed);
        stem_ = StemM<T>(config.stem, config.in_channels, rng);
        int cur = config.stem.final_channels();
        for (const auto& st : config.encoder_stages) {
            EncoderStageM<T> stage;
            stage.down = MV2BlockM<T>(st.downsample, rng);
            cur = st.downsample.out_channels;
            if (st.vit) {
                stage.has_vit = true;
                stage.vit = MobileViTBlockM<T>(*st.vit, rng);
            }
            stages_.push_back(std::move(stage));
        }
        bottleneck_ = MobileViTBlockM<T>(config.bottleneck, rng);
        for (const auto& ds : config.decoder_stages) {
            decoders_.emplace_back(ds, rng);
        }
        head_up_ = TransposeConv2dM<T>(config.decoder_stages.back().out_channels, config.head.mid_channels,
                                       2, 2, 0, /*with_bias=*/false, rng);
        head_bn_ = BatchNorm2dM<T>(config.head.mid_channels);
        head_conv_ = Conv2dM<T>(config.head.mid_channels, config.out_channels, 1, 1, 0, 1,
                                /*with_bias=*/true, rng);
        collect_entries();
    }

    // Mask logits at input resolution. Any square input whose side divides by
    // config.required_divisor() is accepted.
    TensorT<T> forward(const TensorT<T>& x, bool training, TapeT<T>* tape = nullptr) const {
        if (x.ndim() != 4 || x.dim(1) != config_.in_channels) {
            throw DimensionError("model: input must be N," + std::to_string(config_.in_channels) +
                                 ",H,W, got " + shape_str(x.shape()));
        }
        const int div = config_.required_divisor();
        if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
            throw DimensionError("model: input size " + shape_str(x.shape()) + " not divisible by " +
                                 std::to_string(div));
        }
        std::vector<TensorT<T>> skips;
        TensorT<T> y = stem_.forward(x, tape, training);
        skips.push_back(y);
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            y = stages_[i].down.forward(y, tape, training);
            if (stages_[i].has_vit) y = stages_[i].vit.forward(y, tape, training);
            if (i + 1 < stages_.size()) skips.push_back(y);
        }
        y = bottleneck_.forward(y, tape, training);
        for (auto& db : decoders_) {
            TensorT<T> skip = skips.back();
            skips.pop_back();
            y = db.forward(y, skip, tape, training);
        }
        y = silu(head_bn_.forward(head_up_.forward(y, tape), tape, training), tape);
        return head_conv_.forward(y, tape);
    }

    const ModelConfig& config() const { return config_; }

    // Parameters and buffers in construction order.
    const std::vector<NamedTensor<T>>& entries() const { return entries_; }

    std::vector<std::pair<std::string, TensorT<T>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (const auto& e : entries_) {
            if (!e.buffer) out.emplace_back(e.name, e.tensor);
        }
        return out;
    }

    std::vector<std::pair<std::string, TensorT<T>>> named_buffers() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (const auto& e : entries_) {
            if (e.buffer) out.emplace_back(e.name, e.tensor);
        }
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) {
            if (!e.buffer) n += e.tensor.numel();
        }
        return n;
    }

    void set_parameters_requires_grad(bool v) {
        for (auto& e : entries_) {
            if (!e.buffer) e.tensor.set_requires_grad(v);
        }
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    // Module tree, exposed for the static analyzer.
    const StemM<T>& stem() const { return stem_; }
    const std::vector<EncoderStageM<T>>& encoder_stages() const { return stages_; }
    const MobileViTBlockM<T>& bottleneck() const { return bottleneck_; }
    const std::vector<DecoderBlockM<T>>& decoder_blocks() const { return decoders_; }
    const TransposeConv2dM<T>& head_up() const { return head_up_; }
    const BatchNorm2dM<T>& head_bn() const { return head_bn_; }
    const Conv2dM<T>& head_conv() const { return head_conv_; }

private:
    void collect_entries() {
        entries_.clear();
        stem_.collect("stem", entries_);
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            const std::string p = "encoder.stage" + std::to_string(i);
            stages_[i].down.collect(p + ".down", entries_);
            if (stages_[i].has_vit) stages_[i].vit.collect(p + ".vit", entries_);
        }
        bottleneck_.collect("bottleneck", entries_);
        for (std::size_t i = 0; i < decoders_.size(); ++i) {
            decoders_[i].collect("decoder.block" + std::to_string(i), entries_);
        }
        head_up_.collect("head.up", entries_);
        head_bn_.collect("head.up_bn", entries_);
        head_conv_.collect("head.conv", entries_);
    }

    ModelConfig config_;
    StemM<T> stem_;
    std::vector<EncoderStageM<T>> stages_;
    MobileViTBlockM<T> bottleneck_;
    std::vector<DecoderBlockM<T>> decoders_;
    TransposeConv2dM<T> head_up_;
    BatchNorm2dM<T> head_bn_;
    Conv2dM<T> head_conv_;
    std::vector<NamedTensor<T>> entries_;
};

using Model = ModelT<float>;

template <typename T>
ModelT<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    return ModelT<T>(config, seed);
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> named_parameters(const ModelT<T>& model) {
    return model.named_parameters();
}

}  // namespace mutr
