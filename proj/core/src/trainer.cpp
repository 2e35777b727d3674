#include "mutr/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mutr/checkpoint.hpp"
#include "mutr/gradcheck.hpp"
#include "mutr/ops.hpp"
#include "mutr/rng.hpp"

namespace mutr {

namespace {

namespace fs = std::filesystem;

// Copies sample `src_idx` into slot `dst_idx` of the batch tensors, applying
// the requested flips to image and mask together.
void place_sample(const SampleBatch& data, std::int64_t src_idx, Tensor& images, Tensor& masks,
                  std::int64_t dst_idx, bool flip_h, bool flip_v) {
    const std::int64_t H = data.images.dim(2), W = data.images.dim(3);
    const std::int64_t iplane = H * W;
    auto copy_plane = [&](const float* src, float* dst) {
        for (std::int64_t y = 0; y < H; ++y) {
            const std::int64_t sy = flip_v ? H - 1 - y : y;
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t sx = flip_h ? W - 1 - x : x;
                dst[y * W + x] = src[sy * W + sx];
            }
        }
    };
    for (int c = 0; c < 3; ++c) {
        copy_plane(data.images.data().data() + (src_idx * 3 + c) * iplane,
                   images.data().data() + (dst_idx * 3 + c) * iplane);
    }
    copy_plane(data.masks.data().data() + src_idx * iplane, masks.data().data() + dst_idx * iplane);
}

struct Split {
    std::vector<std::int64_t> train, val;
};

Split split_by_index(std::int64_t n, double val_fraction) {
    Split s;
    std::int64_t train_n = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * (1.0 - val_fraction)));
    train_n = std::max<std::int64_t>(1, std::min(n, train_n));
    for (std::int64_t i = 0; i < train_n; ++i) s.train.push_back(i);
    for (std::int64_t i = train_n; i < n; ++i) s.val.push_back(i);
    return s;
}

MetricsReport evaluate_indices(const Model& model, const SampleBatch& data,
                               const std::vector<std::int64_t>& indices, int batch_size) {
    const std::int64_t H = data.images.dim(2), W = data.images.dim(3);
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::int64_t bn = std::min<std::int64_t>(batch_size, static_cast<std::int64_t>(indices.size() - start));
        Tensor images({bn, 3, H, W});
        Tensor masks({bn, 1, H, W});
        for (std::int64_t b = 0; b < bn; ++b) {
            place_sample(data, indices[start + static_cast<std::size_t>(b)], images, masks, b, false, false);
        }
        const Tensor logits = model.forward(images, /*training=*/false, nullptr);
        auto ld = logits.data();
        auto md = masks.data();
        for (std::int64_t i = 0; i < logits.numel(); ++i) {
            const bool p = ld[i] > 0.0f;  // sigmoid(x) > 0.5 iff x > 0
            const bool g = md[i] == 1.0f;
            if (p && g) ++tp;
            else if (p) ++fp;
            else if (g) ++fn;
            else ++tn;
        }
    }
    return metrics_from_counts(tp, fp, tn, fn);
}

}  // namespace

MetricsReport evaluate(const Model& model, const SampleBatch& dataset, int batch_size) {
    if (dataset.count() == 0) throw ArgumentError("evaluate: dataset is empty");
    if (batch_size < 1) throw ArgumentError("evaluate: batch_size must be >= 1");
    std::vector<std::int64_t> all(static_cast<std::size_t>(dataset.count()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
    return evaluate_indices(model, dataset, all, batch_size);
}

TrainResult train(Model& model, const SampleBatch& dataset, const TrainOptions& options) {
    if (dataset.count() == 0) throw ArgumentError("train: dataset is empty");
    if (options.batch_size < 1) throw ArgumentError("train: batch_size must be >= 1");
    if (options.out_dir.empty()) throw ArgumentError("train: out_dir is required");
    fs::create_directories(options.out_dir);
    fs::create_directories(fs::path(options.out_dir) / "checkpoints");

    const std::int64_t H = dataset.images.dim(2), W = dataset.images.dim(3);
    const Split split = split_by_index(dataset.count(), options.val_fraction);

    // weight decay applies to conv/linear kernels only
    std::vector<Tensor> params;
    std::vector<bool> decay;
    for (const auto& e : model.entries()) {
        if (e.buffer) continue;
        params.push_back(e.tensor);
        decay.push_back(e.decay);
    }
    model.set_parameters_requires_grad(true);

    OptimState state;
    state.weight_decay = options.weight_decay;
    state.base_lr = options.schedule.base_lr;

    TrainResult result;
    result.log_path = (fs::path(options.out_dir) / "train_log.jsonl").string();
    std::ofstream log(result.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open training log: " + result.log_path);

    const int epochs = options.schedule.total_epochs;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(static_cast<double>(epoch), options.schedule);

        std::vector<std::int64_t> order = split.train;
        Rng shuffle_rng = Rng::derive(options.seed, 0x5u, static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::int64_t loss_count = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
            const std::int64_t bn =
                std::min<std::int64_t>(options.batch_size, static_cast<std::int64_t>(order.size() - start));
            Tensor images({bn, 3, H, W});
            Tensor masks({bn, 1, H, W});
            for (std::int64_t b = 0; b < bn; ++b) {
                const std::int64_t idx = order[start + static_cast<std::size_t>(b)];
                bool flip_h = false, flip_v = false;
                if (options.augment) {
                    Rng aug = Rng::derive(options.seed, 0xA000u + static_cast<std::uint64_t>(epoch),
                                          static_cast<std::uint64_t>(idx));
                    flip_h = aug.uniform() < 0.5;
                    flip_v = aug.uniform() < 0.5;
                }
                place_sample(dataset, idx, images, masks, b, flip_h, flip_v);
            }

            Tape tape;
            const Tensor logits = model.forward(images, /*training=*/true, &tape);
            const Tensor loss = bce_dice_loss(logits, masks, &tape);
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value)) {
                throw TrainingDivergedError("NaN/Inf loss at epoch " + std::to_string(epoch) + ", batch " +
                                            std::to_string(start / options.batch_size) + ", lr " +
                                            std::to_string(lr));
            }
            model.zero_grad();
            backward(loss, tape);
            adamw_step(params, decay, state, lr);
            loss_sum += loss_value * static_cast<double>(bn);
            loss_count += bn;
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr;
        entry.train_loss = loss_sum / static_cast<double>(loss_count);
        if (!split.val.empty()) {
            const MetricsReport vm = evaluate_indices(model, dataset, split.val, options.batch_size);
            entry.val_iou = vm.iou;
            entry.val_dice = vm.dice;
            if (vm.dice > result.best_val_dice) {
                result.best_val_dice = vm.dice;
                result.best_checkpoint = (fs::path(options.out_dir) / "checkpoints" / "best.ckpt").string();
                save_checkpoint(model, &state, result.best_checkpoint);
            }
        }
        entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(entry);

        nlohmann::ordered_json j;
        j["epoch"] = entry.epoch;
        j["lr"] = entry.lr;
        j["train_loss"] = entry.train_loss;
        j["val_iou"] = entry.val_iou < 0.0 ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(entry.val_iou);
        j["val_dice"] = entry.val_dice < 0.0 ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(entry.val_dice);
        j["seconds"] = entry.seconds;
        log << j.dump() << "\n";
        log.flush();

        if (options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "epoch-%04d.ckpt", epoch);
            save_checkpoint(model, &state, (fs::path(options.out_dir) / "checkpoints" / buf).string());
        }
    }

    result.final_checkpoint = (fs::path(options.out_dir) / "checkpoints" / "final.ckpt").string();
    save_checkpoint(model, &state, result.final_checkpoint);
    result.train_metrics = evaluate_indices(model, dataset, split.train, options.batch_size);
    return result;
}

}  // namespace mutr
