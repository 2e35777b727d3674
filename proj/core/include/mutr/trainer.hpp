#pragma once

// Batched training loop: AdamW, linear warmup + cosine annealing, flip
// augmentation, periodic and best-validation checkpointing, JSON-lines log
// with keys {epoch, lr, train_loss, val_iou, val_dice, seconds}.
// An 80/20 train/validation split by sample index is applied up front.
// Metrics are pixel-pooled over each evaluated set.

#include <string>
#include <vector>

#include "mutr/dataio.hpp"
#include "mutr/metrics.hpp"
#include "mutr/model.hpp"
#include "mutr/optim.hpp"

namespace mutr {

struct TrainOptions {
    ScheduleSpec schedule;       // defaults mirror the training recipe
    int batch_size = 8;
    std::uint64_t seed = 0;
    std::string out_dir;         // log + checkpoints land here
    int checkpoint_every = 50;   // epochs; 0 disables periodic checkpoints
    double val_fraction = 0.2;   // split by index: first (1 - f) train, rest val
    bool augment = true;         // horizontal/vertical flips, p = 0.5 each
    double weight_decay = 0.01;  // conv/linear weights only
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_iou = -1.0;   // negative when there is no validation split
    double val_dice = -1.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_dice = -1.0;
    std::string log_path;
    std::string final_checkpoint;
    std::string best_checkpoint;  // empty when there is no validation split
    MetricsReport train_metrics;  // final-state metrics on the training split
};

TrainResult train(Model& model, const SampleBatch& dataset, const TrainOptions& options);

// Dataset-aggregated confusion counts in eval mode (running batch-norm stats,
// no augmentation), thresholding sigmoid probabilities at 0.5.
MetricsReport evaluate(const Model& model, const SampleBatch& dataset, int batch_size);

}  // namespace mutr
