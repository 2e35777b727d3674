#pragma once

// The architectural building blocks: convolution stem, inverted-residual
// (MV2) block, transformer encoder layer, MobileViT local/global block and
// the hybrid decoder block. Modules own their parameters; forward is pure
// apart from batch-norm running statistics in training mode.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mutr/config.hpp"
#include "mutr/ops.hpp"
#include "mutr/rng.hpp"

namespace mutr {

template <typename T>
struct NamedTensor {
    std::string name;
    TensorT<T> tensor;
    bool decay = false;   // weight-decay eligible (conv / linear kernels)
    bool buffer = false;  // persistent state that is not a trainable parameter
};

namespace init {

// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
void kaiming_uniform(TensorT<T>& w, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void truncated_normal(TensorT<T>& w, double sigma, Rng& rng) {
    for (auto& v : w.data()) v = static_cast<T>(rng.truncated_normal(sigma));
}

}  // namespace init

// ---------------------------------------------------------------------------
// primitive modules

template <typename T>
struct Conv2dM {
    TensorT<T> weight;  // [Cout, Cin/groups, K, K]
    TensorT<T> bias;    // undefined when the conv feeds a norm
    int stride = 1, padding = 0, groups = 1;

    Conv2dM() = default;
    Conv2dM(int cin, int cout, int k, int stride_, int padding_, int groups_, bool with_bias, Rng& rng)
        : stride(stride_), padding(padding_), groups(groups_) {
        weight = TensorT<T>({cout, cin / groups_, k, k}, true);
        init::kaiming_uniform(weight, static_cast<std::int64_t>(cin / groups_) * k * k, rng);
        if (with_bias) bias = TensorT<T>({cout}, true);
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return conv2d(x, weight, bias.defined() ? &bias : nullptr, stride, padding, groups, tape);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".weight", weight, true, false});
        if (bias.defined()) out.push_back({prefix + ".bias", bias, false, false});
    }
};

template <typename T>
struct TransposeConv2dM {
    TensorT<T> weight;  // [Cin, Cout, K, K]
    TensorT<T> bias;
    int stride = 2, padding = 0;

    TransposeConv2dM() = default;
    TransposeConv2dM(int cin, int cout, int k, int stride_, int padding_, bool with_bias, Rng& rng)
        : stride(stride_), padding(padding_) {
        weight = TensorT<T>({cin, cout, k, k}, true);
        init::kaiming_uniform(weight, static_cast<std::int64_t>(cin) * k * k, rng);
        if (with_bias) bias = TensorT<T>({cout}, true);
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return transpose_conv2d(x, weight, bias.defined() ? &bias : nullptr, stride, padding, tape);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".weight", weight, true, false});
        if (bias.defined()) out.push_back({prefix + ".bias", bias, false, false});
    }
};

template <typename T>
struct BatchNorm2dM {
    TensorT<T> gamma, beta;
    mutable TensorT<T> running_mean, running_var;
    T momentum = static_cast<T>(0.1);
    T eps = static_cast<T>(1e-5);

    BatchNorm2dM() = default;
    explicit BatchNorm2dM(int channels) {
        gamma = TensorT<T>::full({channels}, T(1), true);
        beta = TensorT<T>({channels}, true);
        running_mean = TensorT<T>({channels});
        running_var = TensorT<T>::full({channels}, T(1));
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape, bool training) const {
        return batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps, tape);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".gamma", gamma, false, false});
        out.push_back({prefix + ".beta", beta, false, false});
        out.push_back({prefix + ".running_mean", running_mean, false, true});
        out.push_back({prefix + ".running_var", running_var, false, true});
    }
};

template <typename T>
struct LayerNormM {
    TensorT<T> gamma, beta;
    T eps = static_cast<T>(1e-5);

    LayerNormM() = default;
    explicit LayerNormM(int dim) {
        gamma = TensorT<T>::full({dim}, T(1), true);
        beta = TensorT<T>({dim}, true);
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return layer_norm(x, gamma, beta, eps, tape);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".gamma", gamma, false, false});
        out.push_back({prefix + ".beta", beta, false, false});
    }
};

template <typename T>
struct LinearM {
    TensorT<T> weight;  // [Din, Dout]
    TensorT<T> bias;

    LinearM() = default;
    LinearM(int din, int dout, Rng& rng) {
        weight = TensorT<T>({din, dout}, true);
        init::truncated_normal(weight, 0.02, rng);
        bias = TensorT<T>({dout}, true);
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return linear(x, weight, &bias, tape);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".weight", weight, true, false});
        out.push_back({prefix + ".bias", bias, false, false});
    }
};

// conv -> batch norm -> optional SiLU; the basic convolution unit everywhere.
template <typename T>
struct ConvBnSiluM {
    Conv2dM<T> conv;
    BatchNorm2dM<T> bn;
    bool act = true;

    ConvBnSiluM() = default;
    ConvBnSiluM(int cin, int cout, int k, int stride, int padding, int groups, bool act_, Rng& rng)
        : conv(cin, cout, k, stride, padding, groups, /*with_bias=*/false, rng), bn(cout), act(act_) {}

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape, bool training) const {
        TensorT<T> y = bn.forward(conv.forward(x, tape), tape, training);
        return act ? silu(y, tape) : y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        conv.collect(prefix + ".conv", out);
        bn.collect(prefix + ".bn", out);
    }
};

// ---------------------------------------------------------------------------
// MV2 inverted residual: expand 1x1 -> depthwise 3x3 -> project 1x1,
// identity skip when stride 1 and channels match.

template <typename T>
struct MV2BlockM {
    MV2BlockSpec spec;
    ConvBnSiluM<T> expand;  // present iff expansion_ratio != 1
    ConvBnSiluM<T> depthwise;
    ConvBnSiluM<T> project;  // linear bottleneck: no activation

    MV2BlockM() = default;
    MV2BlockM(const MV2BlockSpec& s, Rng& rng) : spec(s) {
        const int hidden = s.in_channels * s.expansion_ratio;
        if (s.expansion_ratio != 1) {
            expand = ConvBnSiluM<T>(s.in_channels, hidden, 1, 1, 0, 1, true, rng);
        }
        depthwise = ConvBnSiluM<T>(hidden, hidden, 3, s.stride, 1, hidden, true, rng);
        project = ConvBnSiluM<T>(hidden, s.out_channels, 1, 1, 0, 1, false, rng);
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape, bool training) const {
        if (x.dim(1) != spec.in_channels) {
            throw DimensionError("mv2 block expects " + std::to_string(spec.in_channels) + " channels, got " +
                                 shape_str(x.shape()));
        }
        TensorT<T> y = x;
        if (spec.expansion_ratio != 1) y = expand.forward(y, tape, training);
        y = depthwise.forward(y, tape, training);
        y = project.forward(y, tape, training);
        return spec.has_residual() ? add(x, y, tape) : y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        if (spec.expansion_ratio != 1) expand.collect(prefix + ".expand", out);
        depthwise.collect(prefix + ".depthwise", out);
        project.collect(prefix + ".project", out);
    }
};

// ---------------------------------------------------------------------------
// pre-norm transformer encoder layer (multi-head self-attention + MLP)

template <typename T>
struct TransformerLayerM {
    int dim = 0, heads = 1;
    LayerNormM<T> ln_attn, ln_mlp;
    LinearM<T> wq, wk, wv, wo, fc1, fc2;

    TransformerLayerM() = default;
    TransformerLayerM(int dim_, int heads_, double mlp_ratio, Rng& rng) : dim(dim_), heads(heads_) {
        const int hidden = static_cast<int>(std::lround(dim_ * mlp_ratio));
        ln_attn = LayerNormM<T>(dim_);
        wq = LinearM<T>(dim_, dim_, rng);
        wk = LinearM<T>(dim_, dim_, rng);
        wv = LinearM<T>(dim_, dim_, rng);
        wo = LinearM<T>(dim_, dim_, rng);
        ln_mlp = LayerNormM<T>(dim_);
        fc1 = LinearM<T>(dim_, hidden, rng);
        fc2 = LinearM<T>(hidden, dim_, rng);
    }

    TensorT<T> attention(const TensorT<T>& seq, TapeT<T>* tape) const {
        const std::int64_t dh = dim / heads;
        TensorT<T> q = split_heads(wq.forward(seq, tape), heads, tape);
        TensorT<T> k = split_heads(wk.forward(seq, tape), heads, tape);
        TensorT<T> v = split_heads(wv.forward(seq, tape), heads, tape);
        TensorT<T> scores = matmul(q, transpose_last2(k, tape), tape);
        scores = scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))), tape);
        TensorT<T> attn = softmax(scores, 2, tape);
        TensorT<T> ctx = merge_heads(matmul(attn, v, tape), heads, tape);
        return wo.forward(ctx, tape);
    }

    TensorT<T> forward(const TensorT<T>& seq, TapeT<T>* tape) const {
        if (seq.ndim() != 3 || seq.dim(2) != dim) {
            throw DimensionError("transformer layer expects B,S," + std::to_string(dim) + ", got " +
                                 shape_str(seq.shape()));
        }
        TensorT<T> x = add(seq, attention(ln_attn.forward(seq, tape), tape), tape);
        TensorT<T> m = fc2.forward(silu(fc1.forward(ln_mlp.forward(x, tape), tape), tape), tape);
        return add(x, m, tape);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        ln_attn.collect(prefix + ".ln_attn", out);
        wq.collect(prefix + ".wq", out);
        wk.collect(prefix + ".wk", out);
        wv.collect(prefix + ".wv", out);
        wo.collect(prefix + ".wo", out);
        ln_mlp.collect(prefix + ".ln_mlp", out);
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// ---------------------------------------------------------------------------
// MobileViT block: depthwise-separable local representation, project to d,
// unfold -> transformers -> fold, project back and fuse with the input.

template <typename T>
struct MobileViTBlockM {
    MobileViTBlockSpec spec;
    ConvBnSiluM<T> local_dw, local_pw, proj_in, proj_out, fusion;
    std::vector<TransformerLayerM<T>> layers;

    MobileViTBlockM() = default;
    MobileViTBlockM(const MobileViTBlockSpec& s, Rng& rng) : spec(s) {
        const int C = s.channels, d = s.transformer_dim, k = s.kernel_size;
        local_dw = ConvBnSiluM<T>(C, C, k, 1, k / 2, C, true, rng);
        local_pw = ConvBnSiluM<T>(C, C, 1, 1, 0, 1, true, rng);
        proj_in = ConvBnSiluM<T>(C, d, 1, 1, 0, 1, true, rng);
        layers.reserve(static_cast<std::size_t>(s.transformer_layers));
        for (int i = 0; i < s.transformer_layers; ++i) {
            layers.emplace_back(d, s.heads, s.mlp_ratio, rng);
        }
        proj_out = ConvBnSiluM<T>(d, C, 1, 1, 0, 1, true, rng);
        fusion = ConvBnSiluM<T>(2 * C, C, k, 1, k / 2, 1, true, rng);
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape, bool training) const {
        if (x.dim(1) != spec.channels) {
            throw DimensionError("mobilevit block expects " + std::to_string(spec.channels) +
                                 " channels, got " + shape_str(x.shape()));
        }
        const std::int64_t H = x.dim(2), W = x.dim(3);
        TensorT<T> y = local_dw.forward(x, tape, training);
        y = local_pw.forward(y, tape, training);
        y = proj_in.forward(y, tape, training);
        y = unfold_patches(y, spec.patch_h, spec.patch_w, tape);
        for (const auto& layer : layers) y = layer.forward(y, tape);
        y = fold_patches(y, spec.patch_h, spec.patch_w, H, W, tape);
        y = proj_out.forward(y, tape, training);
        y = concat<T>({y, x}, 1, tape);
        return fusion.forward(y, tape, training);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        local_dw.collect(prefix + ".local_dw", out);
        local_pw.collect(prefix + ".local_pw", out);
        proj_in.collect(prefix + ".proj_in", out);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].collect(prefix + ".layer" + std::to_string(i), out);
        }
        proj_out.collect(prefix + ".proj_out", out);
        fusion.collect(prefix + ".fusion", out);
    }
};

// ---------------------------------------------------------------------------
// convolution stem: 3x3 stride-2 conv + MV2 stages

template <typename T>
struct StemM {
    StemSpec spec;
    ConvBnSiluM<T> conv0;
    std::vector<MV2BlockM<T>> stages;

    StemM() = default;
    StemM(const StemSpec& s, int in_channels, Rng& rng) : spec(s) {
        conv0 = ConvBnSiluM<T>(in_channels, s.out_channels, 3, 2, 1, 1, true, rng);
        int cur = s.out_channels;
        for (const auto& st : s.stages) {
            MV2BlockSpec ms{cur, st.out_channels, st.stride, st.expansion_ratio};
            stages.emplace_back(ms, rng);
            cur = st.out_channels;
        }
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape, bool training) const {
        if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
            throw DimensionError("stem: input spatial dims must be even, got " + shape_str(x.shape()));
        }
        TensorT<T> y = conv0.forward(x, tape, training);
        for (const auto& st : stages) y = st.forward(y, tape, training);
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        conv0.collect(prefix + ".conv0", out);
        for (std::size_t i = 0; i < stages.size(); ++i) {
            stages[i].collect(prefix + ".mv2_" + std::to_string(i), out);
        }
    }
};

// ---------------------------------------------------------------------------
// hybrid decoder block: transpose-conv upsample, skip fusion + 3x3 local
// refinement, MobileViT global refinement.

template <typename T>
struct DecoderBlockM {
    DecoderBlockSpec spec;
    TransposeConv2dM<T> up;
    BatchNorm2dM<T> up_bn;
    ConvBnSiluM<T> refine;
    MobileViTBlockM<T> global_refine;

    DecoderBlockM() = default;
    DecoderBlockM(const DecoderBlockSpec& s, Rng& rng) : spec(s) {
        up = TransposeConv2dM<T>(s.in_channels, s.out_channels, 2, 2, 0, /*with_bias=*/false, rng);
        up_bn = BatchNorm2dM<T>(s.out_channels);
        refine = ConvBnSiluM<T>(s.out_channels + s.skip_channels, s.out_channels, 3, 1, 1, 1, true, rng);
        global_refine = MobileViTBlockM<T>(s.global_refine, rng);
    }

    // ablate_global_refine bypasses step 3 so tests can observe steps 1+2 alone.
    TensorT<T> forward(const TensorT<T>& x, const TensorT<T>& skip, TapeT<T>* tape, bool training,
                       bool ablate_global_refine = false) const {
        if (x.dim(1) != spec.in_channels) {
            throw DimensionError("decoder wiring: expected " + std::to_string(spec.in_channels) +
                                 " input channels, got " + shape_str(x.shape()));
        }
        if (skip.dim(1) != spec.skip_channels || skip.dim(2) != 2 * x.dim(2) ||
            skip.dim(3) != 2 * x.dim(3) || skip.dim(0) != x.dim(0)) {
            throw DimensionError("decoder wiring: skip " + shape_str(skip.shape()) +
                                 " does not match input " + shape_str(x.shape()) + " (want " +
                                 std::to_string(spec.skip_channels) + " channels at twice the resolution)");
        }
        TensorT<T> y = silu(up_bn.forward(up.forward(x, tape), tape, training), tape);
        y = concat<T>({y, skip}, 1, tape);
        y = refine.forward(y, tape, training);
        if (ablate_global_refine) return y;
        return global_refine.forward(y, tape, training);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        up.collect(prefix + ".up", out);
        up_bn.collect(prefix + ".up_bn", out);
        refine.collect(prefix + ".refine", out);
        global_refine.collect(prefix + ".global_refine", out);
    }
};

}  // namespace mutr
