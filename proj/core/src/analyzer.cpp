#include "mutr/analyzer.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace mutr {

namespace {

struct Walker {
    CostReport report;
    std::int64_t h = 0, w = 0;  // current spatial size, batch fixed at 1

    void row(std::string name, std::string kind, std::int64_t params, std::int64_t macs) {
        report.rows.push_back({std::move(name), std::move(kind), params, macs});
    }

    void conv(const std::string& name, const Conv2dM<float>& m) {
        const auto& ws = m.weight.shape();
        const std::int64_t cout = ws[0], cin_g = ws[1], k = ws[2];
        const std::int64_t hout = (h + 2 * m.padding - k) / m.stride + 1;
        const std::int64_t wout = (w + 2 * m.padding - k) / m.stride + 1;
        std::int64_t params = k * k * cin_g * cout;
        if (m.bias.defined()) params += cout;
        row(name, "conv", params, k * k * cin_g * cout * hout * wout);
        h = hout;
        w = wout;
    }

    void tconv(const std::string& name, const TransposeConv2dM<float>& m) {
        const auto& ws = m.weight.shape();
        const std::int64_t cin = ws[0], cout = ws[1], k = ws[2];
        std::int64_t params = k * k * cin * cout;
        if (m.bias.defined()) params += cout;
        row(name, "transpose_conv", params, k * k * cin * cout * h * w);
        h = (h - 1) * m.stride - 2 * m.padding + k;
        w = (w - 1) * m.stride - 2 * m.padding + k;
    }

    void bn(const std::string& name, const BatchNorm2dM<float>& m) {
        const std::int64_t c = m.gamma.dim(0);
        row(name, "batchnorm", 2 * c, 0);
        report.elementwise_ops += c * h * w;
    }

    void ln(const std::string& name, const LayerNormM<float>& m, std::int64_t tokens) {
        const std::int64_t d = m.gamma.dim(0);
        row(name, "layernorm", 2 * d, 0);
        report.elementwise_ops += tokens * d;
    }

    void lin(const std::string& name, const LinearM<float>& m, std::int64_t tokens) {
        const std::int64_t din = m.weight.dim(0), dout = m.weight.dim(1);
        row(name, "linear", din * dout + dout, tokens * din * dout);
    }

    void act(std::int64_t channels) { report.elementwise_ops += channels * h * w; }

    void conv_bn_silu(const std::string& name, const ConvBnSiluM<float>& m) {
        conv(name + ".conv", m.conv);
        bn(name + ".bn", m.bn);
        if (m.act) act(m.conv.weight.dim(0));
    }

    void mv2(const std::string& name, const MV2BlockM<float>& m) {
        if (m.spec.expansion_ratio != 1) conv_bn_silu(name + ".expand", m.expand);
        conv_bn_silu(name + ".depthwise", m.depthwise);
        conv_bn_silu(name + ".project", m.project);
        if (m.spec.has_residual()) report.elementwise_ops += m.spec.out_channels * h * w;
    }

    void transformer(const std::string& name, const TransformerLayerM<float>& m, std::int64_t bprime,
                     std::int64_t seq) {
        const std::int64_t tokens = bprime * seq;
        const std::int64_t dh = m.dim / m.heads;
        ln(name + ".ln_attn", m.ln_attn, tokens);
        lin(name + ".wq", m.wq, tokens);
        lin(name + ".wk", m.wk, tokens);
        lin(name + ".wv", m.wv, tokens);
        row(name + ".attn", "attention", 0, 2 * bprime * m.heads * seq * seq * dh);
        report.elementwise_ops += bprime * m.heads * seq * seq;  // softmax
        lin(name + ".wo", m.wo, tokens);
        report.elementwise_ops += tokens * m.dim;  // residual add
        ln(name + ".ln_mlp", m.ln_mlp, tokens);
        lin(name + ".fc1", m.fc1, tokens);
        report.elementwise_ops += tokens * m.fc1.weight.dim(1);  // silu
        lin(name + ".fc2", m.fc2, tokens);
        report.elementwise_ops += tokens * m.dim;  // residual add
    }

    void mobilevit(const std::string& name, const MobileViTBlockM<float>& m) {
        conv_bn_silu(name + ".local_dw", m.local_dw);
        conv_bn_silu(name + ".local_pw", m.local_pw);
        conv_bn_silu(name + ".proj_in", m.proj_in);
        const std::int64_t bprime = static_cast<std::int64_t>(m.spec.patch_h) * m.spec.patch_w;
        const std::int64_t seq = (h / m.spec.patch_h) * (w / m.spec.patch_w);
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            transformer(name + ".layer" + std::to_string(i), m.layers[i], bprime, seq);
        }
        conv_bn_silu(name + ".proj_out", m.proj_out);
        conv_bn_silu(name + ".fusion", m.fusion);
    }

    void decoder(const std::string& name, const DecoderBlockM<float>& m) {
        tconv(name + ".up", m.up);
        bn(name + ".up_bn", m.up_bn);
        act(m.spec.out_channels);
        conv_bn_silu(name + ".refine", m.refine);
        mobilevit(name + ".global_refine", m.global_refine);
    }
};

}  // namespace

CostReport analyze(const Model& model, int resolution) {
    const int div = model.config().required_divisor();
    if (resolution <= 0 || resolution % div != 0) {
        throw ArgumentError("analyze: resolution " + std::to_string(resolution) + " must be divisible by " +
                            std::to_string(div));
    }
    Walker walk;
    walk.report.resolution = resolution;
    walk.h = walk.w = resolution;

    walk.conv_bn_silu("stem.conv0", model.stem().conv0);
    for (std::size_t i = 0; i < model.stem().stages.size(); ++i) {
        walk.mv2("stem.mv2_" + std::to_string(i), model.stem().stages[i]);
    }
    const auto& stages = model.encoder_stages();
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const std::string p = "encoder.stage" + std::to_string(i);
        walk.mv2(p + ".down", stages[i].down);
        if (stages[i].has_vit) walk.mobilevit(p + ".vit", stages[i].vit);
    }
    walk.mobilevit("bottleneck", model.bottleneck());
    const auto& decs = model.decoder_blocks();
    for (std::size_t i = 0; i < decs.size(); ++i) {
        walk.decoder("decoder.block" + std::to_string(i), decs[i]);
    }
    walk.tconv("head.up", model.head_up());
    walk.bn("head.up_bn", model.head_bn());
    walk.act(model.config().head.mid_channels);
    walk.conv("head.conv", model.head_conv());

    for (const auto& r : walk.report.rows) {
        walk.report.total_params += r.params;
        walk.report.total_macs += r.macs;
    }
    return walk.report;
}

std::int64_t count_params(const Model& model) {
    return analyze(model, model.config().required_divisor()).total_params;
}

std::int64_t count_macs(const Model& model, int resolution) { return analyze(model, resolution).total_macs; }

int choose_calibration_resolution(const Model& model, int a, int b) {
    const double target = 1.3e9;
    const double da = std::abs(static_cast<double>(count_macs(model, a)) - target);
    const double db = std::abs(static_cast<double>(count_macs(model, b)) - target);
    return da <= db ? a : b;
}

ReportFormat parse_report_format(const std::string& name) {
    if (name == "table") return ReportFormat::kTable;
    if (name == "json") return ReportFormat::kJson;
    if (name == "csv") return ReportFormat::kCsv;
    throw ArgumentError("unknown report format \"" + name + "\" (expected table, json or csv)");
}

std::string render_report(const CostReport& report, ReportFormat format) {
    if (format == ReportFormat::kJson) {
        nlohmann::ordered_json j;
        j["resolution"] = report.resolution;
        j["rows"] = nlohmann::ordered_json::array();
        for (const auto& r : report.rows) {
            j["rows"].push_back(nlohmann::ordered_json{
                {"name", r.name}, {"kind", r.kind}, {"params", r.params}, {"macs", r.macs}});
        }
        j["totals"] = nlohmann::ordered_json{{"params", report.total_params},
                                             {"macs", report.total_macs},
                                             {"flops", report.total_flops()},
                                             {"elementwise_ops", report.elementwise_ops},
                                             {"decoder_params", report.decoder_subtree_params()}};
        return j.dump(2) + "\n";
    }
    if (format == ReportFormat::kCsv) {
        std::ostringstream os;
        os << "name,kind,params,macs\n";
        for (const auto& r : report.rows) {
            os << r.name << ',' << r.kind << ',' << r.params << ',' << r.macs << '\n';
        }
        os << "TOTAL,," << report.total_params << ',' << report.total_macs << '\n';
        return os.str();
    }
    std::ostringstream os;
    os << "cost report @ " << report.resolution << "x" << report.resolution << " (batch 1)\n";
    std::size_t name_w = 4;
    for (const auto& r : report.rows) name_w = std::max(name_w, r.name.size());
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "name" << std::setw(16) << "kind"
       << std::right << std::setw(12) << "params" << std::setw(16) << "macs" << '\n';
    for (const auto& r : report.rows) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::setw(16) << r.kind
           << std::right << std::setw(12) << r.params << std::setw(16) << r.macs << '\n';
    }
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "TOTAL" << std::setw(16) << ""
       << std::right << std::setw(12) << report.total_params << std::setw(16) << report.total_macs << '\n';
    const double gmacs = static_cast<double>(report.total_macs) / 1e9;
    os << std::fixed << std::setprecision(4);
    os << "params: " << report.total_params << " (" << static_cast<double>(report.total_params) / 1e6
       << " M), decoder subtree: " << report.decoder_subtree_params() << " ("
       << static_cast<double>(report.decoder_subtree_params()) / 1e6 << " M)\n";
    os << "macs: " << report.total_macs << " (" << gmacs << " G), flops (2x macs): " << std::setprecision(4)
       << 2.0 * gmacs << " G, elementwise ops: " << report.elementwise_ops << "\n";
    return os.str();
}

}  // namespace mutr
