#include "mutr/metrics.hpp"

#include "mutr/errors.hpp"

namespace mutr {

MetricsReport metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn) {
    MetricsReport r;
    r.tp = tp;
    r.fp = fp;
    r.tn = tn;
    r.fn = fn;
    const auto d = [](std::int64_t num, std::int64_t den) {
        return static_cast<double>(num) / static_cast<double>(den);
    };
    r.se = (tp + fn) > 0 ? d(tp, tp + fn) : (fp == 0 ? 1.0 : 0.0);
    r.sp = (tn + fp) > 0 ? d(tn, tn + fp) : (fn == 0 ? 1.0 : 0.0);
    r.acc = d(tp + tn, tp + fp + tn + fn);
    r.iou = (tp + fp + fn) > 0 ? d(tp, tp + fp + fn) : 1.0;
    r.dice = (2 * tp + fp + fn) > 0 ? d(2 * tp, 2 * tp + fp + fn) : 1.0;
    return r;
}

MetricsReport compute_metrics(const Tensor& pred_mask, const Tensor& gt_mask) {
    if (pred_mask.shape() != gt_mask.shape()) {
        throw DimensionError("compute_metrics: shapes disagree: " + shape_str(pred_mask.shape()) + " vs " +
                             shape_str(gt_mask.shape()));
    }
    auto pd = pred_mask.data();
    auto gd = gt_mask.data();
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::int64_t i = 0; i < pred_mask.numel(); ++i) {
        const float p = pd[i], g = gd[i];
        if ((p != 0.0f && p != 1.0f) || (g != 0.0f && g != 1.0f)) {
            throw ArgumentError("compute_metrics: inputs must be strictly binary");
        }
        if (p == 1.0f && g == 1.0f) ++tp;
        else if (p == 1.0f) ++fp;
        else if (g == 1.0f) ++fn;
        else ++tn;
    }
    return metrics_from_counts(tp, fp, tn, fn);
}

}  // namespace mutr
