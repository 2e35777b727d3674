#include "mutr/verify.hpp"

#include "mutr/gradcheck.hpp"
#include "mutr/model.hpp"

namespace mutr {

namespace {

using D = double;

template <typename Forward>
BlockCheckResult check_block(const std::string& name, const TensorT<D>& input,
                             std::vector<TensorT<D>> wrt, Forward&& forward, double h) {
    TensorT<D> weights;
    auto f = [&](TapeT<D>* tape) {
        TensorT<D> y = forward(tape);
        if (!weights.defined()) weights = scalarize_weights<D>(y.shape(), 0xb10c);
        return scalarize(y, weights, tape);
    };
    wrt.insert(wrt.begin(), input);
    GradcheckOptions opt;
    opt.step = h;
    const GradcheckReport rep = gradcheck_many<D>(f, wrt, opt);
    return {name, rep.max_rel_err, rep.components_checked};
}

std::vector<TensorT<D>> trainable(const std::vector<NamedTensor<D>>& entries) {
    std::vector<TensorT<D>> out;
    for (const auto& e : entries) {
        if (!e.buffer) out.push_back(e.tensor);
    }
    return out;
}

}  // namespace

std::vector<BlockCheckResult> run_block_gradchecks(std::uint64_t seed, double h) {
    std::vector<BlockCheckResult> results;

    {
        StemSpec spec;
        spec.out_channels = 6;
        spec.stages = {{8, 1, 2}};
        Rng rng(seed);
        StemM<D> stem(spec, 3, rng);
        std::vector<NamedTensor<D>> entries;
        stem.collect("stem", entries);
        TensorT<D> x = TensorT<D>(Shape{1, 3, 8, 8});
        Rng xr = Rng::derive(seed, 1);
        for (auto& v : x.data()) v = xr.uniform(-1.0, 1.0);
        results.push_back(check_block(
            "stem", x, trainable(entries),
            [&](TapeT<D>* tape) { return stem.forward(x, tape, true); }, h));
    }
    {
        MV2BlockSpec spec{6, 6, 1, 2};
        Rng rng(seed + 1);
        MV2BlockM<D> block(spec, rng);
        std::vector<NamedTensor<D>> entries;
        block.collect("mv2", entries);
        TensorT<D> x = TensorT<D>(Shape{2, 6, 6, 6});
        Rng xr = Rng::derive(seed, 2);
        for (auto& v : x.data()) v = xr.uniform(-1.0, 1.0);
        results.push_back(check_block(
            "mv2_block", x, trainable(entries),
            [&](TapeT<D>* tape) { return block.forward(x, tape, true); }, h));
    }
    {
        Rng rng(seed + 2);
        TransformerLayerM<D> layer(8, 2, 2.0, rng);
        std::vector<NamedTensor<D>> entries;
        layer.collect("tl", entries);
        TensorT<D> x = TensorT<D>(Shape{2, 5, 8});
        Rng xr = Rng::derive(seed, 3);
        for (auto& v : x.data()) v = xr.uniform(-1.0, 1.0);
        results.push_back(check_block(
            "transformer_layer", x, trainable(entries),
            [&](TapeT<D>* tape) { return layer.forward(x, tape); }, h));
    }
    {
        MobileViTBlockSpec spec;
        spec.channels = 4;
        spec.transformer_dim = 8;
        spec.transformer_layers = 1;
        spec.heads = 2;
        spec.mlp_ratio = 2.0;
        spec.patch_h = spec.patch_w = 2;
        spec.kernel_size = 3;
        Rng rng(seed + 3);
        MobileViTBlockM<D> block(spec, rng);
        std::vector<NamedTensor<D>> entries;
        block.collect("vit", entries);
        TensorT<D> x = TensorT<D>(Shape{1, 4, 4, 4});
        Rng xr = Rng::derive(seed, 4);
        for (auto& v : x.data()) v = xr.uniform(-1.0, 1.0);
        results.push_back(check_block(
            "mobilevit_block", x, trainable(entries),
            [&](TapeT<D>* tape) { return block.forward(x, tape, true); }, h));
    }
    {
        DecoderBlockSpec spec;
        spec.in_channels = 6;
        spec.skip_channels = 4;
        spec.out_channels = 4;
        spec.global_refine.channels = 4;
        spec.global_refine.transformer_dim = 8;
        spec.global_refine.transformer_layers = 1;
        spec.global_refine.heads = 2;
        spec.global_refine.mlp_ratio = 2.0;
        spec.global_refine.patch_h = spec.global_refine.patch_w = 2;
        spec.global_refine.kernel_size = 3;
        Rng rng(seed + 4);
        DecoderBlockM<D> block(spec, rng);
        std::vector<NamedTensor<D>> entries;
        block.collect("dec", entries);
        TensorT<D> x = TensorT<D>(Shape{1, 6, 2, 2});
        TensorT<D> skip = TensorT<D>(Shape{1, 4, 4, 4});
        Rng xr = Rng::derive(seed, 5);
        for (auto& v : x.data()) v = xr.uniform(-1.0, 1.0);
        for (auto& v : skip.data()) v = xr.uniform(-1.0, 1.0);
        auto wrt = trainable(entries);
        wrt.push_back(skip);
        results.push_back(check_block(
            "decoder_block", x, std::move(wrt),
            [&](TapeT<D>* tape) { return block.forward(x, skip, tape, true); }, h));
    }
    return results;
}

BlockCheckResult run_model_gradcheck(const ModelConfig& config, std::uint64_t seed, double h,
                                     std::int64_t max_components_per_tensor) {
    ModelT<D> model(config, seed);
    const int size = config.required_divisor();
    TensorT<D> x = TensorT<D>(Shape{1, config.in_channels, size, size});
    Rng xr = Rng::derive(seed, 6);
    for (auto& v : x.data()) v = xr.uniform(0.0, 1.0);
    TensorT<D> mask(Shape{1, config.out_channels, size, size});
    for (auto& v : mask.data()) v = xr.uniform() < 0.5 ? 0.0 : 1.0;

    std::vector<TensorT<D>> wrt;
    wrt.push_back(x);
    for (const auto& e : model.entries()) {
        if (!e.buffer) wrt.push_back(e.tensor);
    }
    auto f = [&](TapeT<D>* tape) {
        TensorT<D> logits = model.forward(x, /*training=*/true, tape);
        return bce_dice_loss(logits, mask, tape);
    };
    GradcheckOptions opt;
    opt.step = h;
    opt.max_components_per_tensor = max_components_per_tensor;
    opt.sample_seed = seed ^ 0xfeedULL;
    const GradcheckReport rep = gradcheck_many<D>(f, wrt, opt);
    return {"model", rep.max_rel_err, rep.components_checked};
}

}  // namespace mutr
