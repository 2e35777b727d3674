#pragma once

// Confusion-matrix segmentation metrics: SE, SP, ACC, IoU, Dice.
// When a metric's denominator class is absent in the ground truth, the value
// is 1.0 if the prediction agrees (also absent) and 0.0 otherwise.

#include <cstdint>

#include "mutr/tensor.hpp"

namespace mutr {

struct MetricsReport {
    double se = 0.0;    // sensitivity TP/(TP+FN)
    double sp = 0.0;    // specificity TN/(TN+FP)
    double acc = 0.0;   // (TP+TN)/all
    double iou = 0.0;   // TP/(TP+FP+FN)
    double dice = 0.0;  // 2TP/(2TP+FP+FN)
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

MetricsReport metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn);

// Inputs must be strictly binary (every element exactly 0 or 1) and equal-shaped.
MetricsReport compute_metrics(const Tensor& pred_mask, const Tensor& gt_mask);

}  // namespace mutr
