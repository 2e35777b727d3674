#pragma once

// Static per-layer parameter and multiply-accumulate accounting over a built
// model at a given input resolution (batch 1). Counting conventions:
//   conv            K*K*(Cin/groups)*Cout*Hout*Wout MACs
//   transpose conv  K*K*Cin*Cout*Hin*Win MACs
//   linear          tokens*Din*Dout MACs
//   attention       B*h*S^2*d_head MACs for Q.K^T plus the same for attn.V
//   norms/activations  0 MACs, tallied separately as elementwise ops

#include <cstdint>
#include <string>
#include <vector>

#include "mutr/model.hpp"

namespace mutr {

struct CostRow {
    std::string name;
    std::string kind;  // conv | transpose_conv | linear | batchnorm | layernorm | attention
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

struct CostReport {
    int resolution = 0;
    std::vector<CostRow> rows;
    std::int64_t total_params = 0;
    std::int64_t total_macs = 0;
    std::int64_t elementwise_ops = 0;

    std::int64_t total_flops() const { return 2 * total_macs; }

    std::int64_t params_with_prefix(const std::string& prefix) const {
        std::int64_t n = 0;
        for (const auto& r : rows) {
            if (r.name.rfind(prefix, 0) == 0) n += r.params;
        }
        return n;
    }

    // Decoder stages plus the segmentation head.
    std::int64_t decoder_subtree_params() const {
        return params_with_prefix("decoder.") + params_with_prefix("head.");
    }
};

CostReport analyze(const Model& model, int resolution);

std::int64_t count_params(const Model& model);
std::int64_t count_macs(const Model& model, int resolution);

// Of the two candidate calibration resolutions, the one whose MAC total lands
// nearer 1.3 G; used when no explicit resolution is requested.
int choose_calibration_resolution(const Model& model, int a = 256, int b = 512);

enum class ReportFormat { kTable, kJson, kCsv };

ReportFormat parse_report_format(const std::string& name);  // "table" | "json" | "csv"

std::string render_report(const CostReport& report, ReportFormat format);

}  // namespace mutr
