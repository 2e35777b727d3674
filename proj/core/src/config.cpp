#include "mutr/config.hpp"

#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mutr {

namespace {

using nlohmann::ordered_json;

void reject_unknown_keys(const ordered_json& j, const std::set<std::string>& allowed,
                         const std::string& where, std::vector<std::string>& errors) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            errors.push_back(where + ": unknown key \"" + it.key() + "\"");
        }
    }
}

int get_int(const ordered_json& j, const std::string& key, const std::string& where,
            std::vector<std::string>& errors, int fallback = 0) {
    if (!j.contains(key)) {
        errors.push_back(where + ": missing key \"" + key + "\"");
        return fallback;
    }
    if (!j[key].is_number_integer()) {
        errors.push_back(where + ": key \"" + key + "\" must be an integer");
        return fallback;
    }
    return j[key].get<int>();
}

double get_num(const ordered_json& j, const std::string& key, const std::string& where,
               std::vector<std::string>& errors, double fallback = 0.0) {
    if (!j.contains(key)) {
        errors.push_back(where + ": missing key \"" + key + "\"");
        return fallback;
    }
    if (!j[key].is_number()) {
        errors.push_back(where + ": key \"" + key + "\" must be a number");
        return fallback;
    }
    return j[key].get<double>();
}

MobileViTBlockSpec vit_from_json(const ordered_json& j, const std::string& where,
                                 std::vector<std::string>& errors) {
    MobileViTBlockSpec s;
    if (!j.is_object()) {
        errors.push_back(where + ": must be an object");
        return s;
    }
    reject_unknown_keys(j,
                        {"channels", "transformer_dim", "transformer_layers", "heads", "mlp_ratio",
                         "patch_h", "patch_w", "kernel_size"},
                        where, errors);
    s.channels = get_int(j, "channels", where, errors);
    s.transformer_dim = get_int(j, "transformer_dim", where, errors);
    s.transformer_layers = get_int(j, "transformer_layers", where, errors);
    s.heads = get_int(j, "heads", where, errors, 4);
    s.mlp_ratio = get_num(j, "mlp_ratio", where, errors, 2.0);
    s.patch_h = get_int(j, "patch_h", where, errors, 2);
    s.patch_w = get_int(j, "patch_w", where, errors, 2);
    s.kernel_size = get_int(j, "kernel_size", where, errors, 3);
    return s;
}

ordered_json vit_to_json(const MobileViTBlockSpec& s) {
    return ordered_json{{"channels", s.channels},
                        {"transformer_dim", s.transformer_dim},
                        {"transformer_layers", s.transformer_layers},
                        {"heads", s.heads},
                        {"mlp_ratio", s.mlp_ratio},
                        {"patch_h", s.patch_h},
                        {"patch_w", s.patch_w},
                        {"kernel_size", s.kernel_size}};
}

MV2BlockSpec mv2_from_json(const ordered_json& j, const std::string& where,
                           std::vector<std::string>& errors) {
    MV2BlockSpec s;
    if (!j.is_object()) {
        errors.push_back(where + ": must be an object");
        return s;
    }
    reject_unknown_keys(j, {"in_channels", "out_channels", "stride", "expansion_ratio"}, where, errors);
    s.in_channels = get_int(j, "in_channels", where, errors);
    s.out_channels = get_int(j, "out_channels", where, errors);
    s.stride = get_int(j, "stride", where, errors, 1);
    s.expansion_ratio = get_int(j, "expansion_ratio", where, errors, 1);
    return s;
}

ordered_json mv2_to_json(const MV2BlockSpec& s) {
    return ordered_json{{"in_channels", s.in_channels},
                        {"out_channels", s.out_channels},
                        {"stride", s.stride},
                        {"expansion_ratio", s.expansion_ratio}};
}

}  // namespace

int ModelConfig::total_stride() const {
    int s = 2;  // stem conv
    for (const auto& st : stem.stages) s *= st.stride;
    for (std::size_t i = 0; i < encoder_stages.size(); ++i) s *= 2;
    return s;
}

int ModelConfig::required_divisor() const {
    auto lcm64 = [](int a, int b) { return static_cast<int>(std::lcm(a, b)); };
    int div = total_stride();
    int stride = 2;
    for (const auto& st : stem.stages) stride *= st.stride;
    for (const auto& es : encoder_stages) {
        stride *= 2;
        if (es.vit) {
            div = lcm64(div, stride * es.vit->patch_h);
            div = lcm64(div, stride * es.vit->patch_w);
        }
    }
    div = lcm64(div, stride * bottleneck.patch_h);
    div = lcm64(div, stride * bottleneck.patch_w);
    for (const auto& ds : decoder_stages) {
        stride /= 2;
        div = lcm64(div, stride * ds.global_refine.patch_h);
        div = lcm64(div, stride * ds.global_refine.patch_w);
    }
    return div;
}

void ModelConfig::validate() const {
    std::vector<std::string> errors;
    auto expect = [&](bool ok, const std::string& msg) {
        if (!ok) errors.push_back(msg);
    };

    expect(image_size > 0, "image_size must be positive");
    expect(in_channels > 0, "in_channels must be positive");
    expect(out_channels > 0, "out_channels must be positive");
    expect(stem.out_channels > 0, "stem.out_channels must be positive");
    for (std::size_t i = 0; i < stem.stages.size(); ++i) {
        const auto& st = stem.stages[i];
        const std::string w = "stem.stages[" + std::to_string(i) + "]";
        expect(st.out_channels > 0, w + ".out_channels must be positive");
        expect(st.stride == 1 || st.stride == 2, w + ".stride must be 1 or 2");
        expect(st.expansion_ratio >= 1, w + ".expansion_ratio must be >= 1");
    }

    auto check_vit = [&](const MobileViTBlockSpec& v, int expected_channels, const std::string& w) {
        expect(v.channels > 0, w + ".channels must be positive");
        expect(v.channels == expected_channels,
               w + ".channels must equal the surrounding width " + std::to_string(expected_channels));
        expect(v.transformer_dim > 0, w + ".transformer_dim must be positive");
        expect(v.heads >= 1, w + ".heads must be >= 1");
        expect(v.heads < 1 || v.transformer_dim % v.heads == 0,
               w + ".transformer_dim must be divisible by heads");
        expect(v.transformer_layers >= 0, w + ".transformer_layers must be >= 0");
        expect(v.mlp_ratio > 0.0, w + ".mlp_ratio must be positive");
        expect(v.patch_h >= 1 && v.patch_w >= 1, w + ".patch size must be >= 1");
        expect(v.kernel_size >= 1 && v.kernel_size % 2 == 1, w + ".kernel_size must be odd");
    };

    int cur = stem.final_channels();
    expect(!encoder_stages.empty(), "encoder_stages must not be empty");
    for (std::size_t i = 0; i < encoder_stages.size(); ++i) {
        const auto& es = encoder_stages[i];
        const std::string w = "encoder_stages[" + std::to_string(i) + "]";
        expect(es.downsample.in_channels == cur,
               w + ".downsample.in_channels is " + std::to_string(es.downsample.in_channels) +
                   " but the incoming width is " + std::to_string(cur));
        expect(es.downsample.stride == 2, w + ".downsample.stride must be 2");
        expect(es.downsample.out_channels > 0, w + ".downsample.out_channels must be positive");
        expect(es.downsample.expansion_ratio >= 1, w + ".downsample.expansion_ratio must be >= 1");
        cur = es.downsample.out_channels;
        if (es.vit) check_vit(*es.vit, cur, w + ".vit");
    }
    check_vit(bottleneck, cur, "bottleneck");

    // Skips: stem output plus every encoder stage output except the last.
    expect(decoder_stages.size() == encoder_stages.size(),
           "decoder_stages count " + std::to_string(decoder_stages.size()) +
               " must equal encoder skip count " + std::to_string(encoder_stages.size()));
    std::vector<int> skip_widths;
    skip_widths.push_back(stem.final_channels());
    for (std::size_t i = 0; i + 1 < encoder_stages.size(); ++i) {
        skip_widths.push_back(encoder_stages[i].downsample.out_channels);
    }
    for (std::size_t i = 0; i < decoder_stages.size(); ++i) {
        const auto& ds = decoder_stages[i];
        const std::string w = "decoder_stages[" + std::to_string(i) + "]";
        expect(ds.in_channels == cur, w + ".in_channels is " + std::to_string(ds.in_channels) +
                                          " but the incoming width is " + std::to_string(cur));
        if (i < skip_widths.size()) {
            const int want = skip_widths[skip_widths.size() - 1 - i];
            expect(ds.skip_channels == want, w + ".skip_channels is " + std::to_string(ds.skip_channels) +
                                                 " but the mirrored encoder output has " +
                                                 std::to_string(want));
        }
        expect(ds.out_channels > 0, w + ".out_channels must be positive");
        check_vit(ds.global_refine, ds.out_channels, w + ".global_refine");
        cur = ds.out_channels;
    }
    expect(head.mid_channels > 0, "head.mid_channels must be positive");

    if (errors.empty()) {
        const int div = required_divisor();
        if (image_size % div != 0) {
            errors.push_back("image_size " + std::to_string(image_size) + " must be divisible by " +
                             std::to_string(div) + " (total stride joined with patch sizes)");
        }
    }

    if (!errors.empty()) {
        std::ostringstream os;
        os << "invalid model config (" << errors.size() << " violation" << (errors.size() > 1 ? "s" : "")
           << "):";
        for (const auto& e : errors) os << "\n  - " << e;
        throw ConfigError(os.str());
    }
}

ModelConfig config_from_json_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    std::vector<std::string> errors;
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");

    reject_unknown_keys(j,
                        {"image_size", "in_channels", "stem", "encoder_stages", "bottleneck",
                         "decoder_stages", "head", "out_channels"},
                        "config", errors);

    ModelConfig c;
    c.image_size = get_int(j, "image_size", "config", errors, 512);
    c.in_channels = get_int(j, "in_channels", "config", errors, 3);
    c.out_channels = get_int(j, "out_channels", "config", errors, 1);

    if (j.contains("stem") && j["stem"].is_object()) {
        const auto& js = j["stem"];
        reject_unknown_keys(js, {"out_channels", "stages"}, "stem", errors);
        c.stem.out_channels = get_int(js, "out_channels", "stem", errors);
        if (js.contains("stages") && js["stages"].is_array()) {
            for (std::size_t i = 0; i < js["stages"].size(); ++i) {
                const auto& jst = js["stages"][i];
                const std::string w = "stem.stages[" + std::to_string(i) + "]";
                StemStageSpec st;
                reject_unknown_keys(jst, {"out_channels", "stride", "expansion_ratio"}, w, errors);
                st.out_channels = get_int(jst, "out_channels", w, errors);
                st.stride = get_int(jst, "stride", w, errors, 1);
                st.expansion_ratio = get_int(jst, "expansion_ratio", w, errors, 2);
                c.stem.stages.push_back(st);
            }
        } else {
            errors.push_back("stem.stages must be an array");
        }
    } else {
        errors.push_back("config: missing object \"stem\"");
    }

    if (j.contains("encoder_stages") && j["encoder_stages"].is_array()) {
        for (std::size_t i = 0; i < j["encoder_stages"].size(); ++i) {
            const auto& je = j["encoder_stages"][i];
            const std::string w = "encoder_stages[" + std::to_string(i) + "]";
            EncoderStageSpec es;
            reject_unknown_keys(je, {"downsample", "vit"}, w, errors);
            if (je.contains("downsample")) {
                es.downsample = mv2_from_json(je["downsample"], w + ".downsample", errors);
            } else {
                errors.push_back(w + ": missing \"downsample\"");
            }
            if (je.contains("vit") && !je["vit"].is_null()) {
                es.vit = vit_from_json(je["vit"], w + ".vit", errors);
            }
            c.encoder_stages.push_back(es);
        }
    } else {
        errors.push_back("config: missing array \"encoder_stages\"");
    }

    if (j.contains("bottleneck")) {
        c.bottleneck = vit_from_json(j["bottleneck"], "bottleneck", errors);
    } else {
        errors.push_back("config: missing object \"bottleneck\"");
    }

    if (j.contains("decoder_stages") && j["decoder_stages"].is_array()) {
        for (std::size_t i = 0; i < j["decoder_stages"].size(); ++i) {
            const auto& jd = j["decoder_stages"][i];
            const std::string w = "decoder_stages[" + std::to_string(i) + "]";
            DecoderBlockSpec ds;
            reject_unknown_keys(jd, {"in_channels", "skip_channels", "out_channels", "global_refine"}, w,
                                errors);
            ds.in_channels = get_int(jd, "in_channels", w, errors);
            ds.skip_channels = get_int(jd, "skip_channels", w, errors);
            ds.out_channels = get_int(jd, "out_channels", w, errors);
            if (jd.contains("global_refine")) {
                ds.global_refine = vit_from_json(jd["global_refine"], w + ".global_refine", errors);
            } else {
                errors.push_back(w + ": missing \"global_refine\"");
            }
            c.decoder_stages.push_back(ds);
        }
    } else {
        errors.push_back("config: missing array \"decoder_stages\"");
    }

    if (j.contains("head") && j["head"].is_object()) {
        reject_unknown_keys(j["head"], {"mid_channels"}, "head", errors);
        c.head.mid_channels = get_int(j["head"], "mid_channels", "head", errors, 16);
    } else {
        errors.push_back("config: missing object \"head\"");
    }

    if (!errors.empty()) {
        std::ostringstream os;
        os << "invalid model config (" << errors.size() << " violation" << (errors.size() > 1 ? "s" : "")
           << "):";
        for (const auto& e : errors) os << "\n  - " << e;
        throw ConfigError(os.str());
    }
    c.validate();
    return c;
}

ModelConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return config_from_json_text(buf.str());
}

std::string config_to_json_text(const ModelConfig& c) {
    ordered_json j;
    j["image_size"] = c.image_size;
    j["in_channels"] = c.in_channels;
    ordered_json js;
    js["out_channels"] = c.stem.out_channels;
    js["stages"] = ordered_json::array();
    for (const auto& st : c.stem.stages) {
        js["stages"].push_back(ordered_json{{"out_channels", st.out_channels},
                                            {"stride", st.stride},
                                            {"expansion_ratio", st.expansion_ratio}});
    }
    j["stem"] = js;
    j["encoder_stages"] = ordered_json::array();
    for (const auto& es : c.encoder_stages) {
        ordered_json je;
        je["downsample"] = mv2_to_json(es.downsample);
        je["vit"] = es.vit ? vit_to_json(*es.vit) : ordered_json(nullptr);
        j["encoder_stages"].push_back(je);
    }
    j["bottleneck"] = vit_to_json(c.bottleneck);
    j["decoder_stages"] = ordered_json::array();
    for (const auto& ds : c.decoder_stages) {
        j["decoder_stages"].push_back(ordered_json{{"in_channels", ds.in_channels},
                                                   {"skip_channels", ds.skip_channels},
                                                   {"out_channels", ds.out_channels},
                                                   {"global_refine", vit_to_json(ds.global_refine)}});
    }
    j["head"] = ordered_json{{"mid_channels", c.head.mid_channels}};
    j["out_channels"] = c.out_channels;
    return j.dump(2) + "\n";
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 64;
    c.in_channels = 3;
    c.out_channels = 1;
    c.stem.out_channels = 8;
    c.stem.stages = {{8, 1, 2}};
    auto vit = [](int ch, int d, int layers, int patch) {
        MobileViTBlockSpec v;
        v.channels = ch;
        v.transformer_dim = d;
        v.transformer_layers = layers;
        v.heads = 4;
        v.mlp_ratio = 2.0;
        v.patch_h = v.patch_w = patch;
        v.kernel_size = 3;
        return v;
    };
    c.encoder_stages = {
        {{8, 12, 2, 2}, std::nullopt},
        {{12, 16, 2, 2}, vit(16, 24, 1, 2)},
        {{16, 24, 2, 2}, vit(24, 32, 1, 2)},
        {{24, 32, 2, 2}, std::nullopt},
    };
    c.bottleneck = vit(32, 40, 1, 2);
    c.decoder_stages = {
        {32, 24, 24, vit(24, 32, 1, 2)},
        {24, 16, 16, vit(16, 24, 1, 2)},
        {16, 12, 12, vit(12, 16, 1, 2)},
        {12, 8, 8, vit(8, 12, 1, 2)},
    };
    c.head.mid_channels = 8;
    return c;
}

ModelConfig reference_config() {
    ModelConfig c;
    c.image_size = 512;
    c.in_channels = 3;
    c.out_channels = 1;
    c.stem.out_channels = 16;
    c.stem.stages = {{32, 1, 2}};
    auto vit = [](int ch, int d, int layers, int patch) {
        MobileViTBlockSpec v;
        v.channels = ch;
        v.transformer_dim = d;
        v.transformer_layers = layers;
        v.heads = 4;
        v.mlp_ratio = 2.0;
        v.patch_h = v.patch_w = patch;
        v.kernel_size = 3;
        return v;
    };
    c.encoder_stages = {
        {{32, 48, 2, 2}, std::nullopt},
        {{48, 64, 2, 4}, vit(64, 96, 1, 4)},
        {{64, 80, 2, 4}, vit(80, 120, 4, 2)},
        {{80, 96, 2, 4}, std::nullopt},
    };
    c.bottleneck = vit(96, 144, 3, 2);
    c.decoder_stages = {
        {96, 80, 80, vit(80, 160, 4, 2)},
        {80, 64, 48, vit(48, 80, 2, 4)},
        {48, 48, 20, vit(20, 32, 1, 8)},
        {20, 32, 12, vit(12, 12, 1, 16)},
    };
    c.head.mid_channels = 16;
    return c;
}

}  // namespace mutr
