#include "mutr/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cctype>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "mutr/errors.hpp"
#include "mutr/rng.hpp"

namespace mutr {

namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------- PNM

struct PnmHeader {
    std::string magic;
    std::int64_t width = 0, height = 0, maxval = 0;
    std::size_t payload_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& bytes, const std::string& path) {
    PnmHeader h;
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        // skip whitespace and '#' comments
        while (pos < bytes.size()) {
            const char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw IoError("malformed PNM header in " + path);
        return bytes.substr(start, pos - start);
    };
    h.magic = next_token();
    try {
        h.width = std::stoll(next_token());
        h.height = std::stoll(next_token());
        h.maxval = std::stoll(next_token());
    } catch (const std::exception&) {
        throw IoError("malformed PNM header in " + path);
    }
    if (h.width <= 0 || h.height <= 0) throw IoError("bad PNM dimensions in " + path);
    if (pos >= bytes.size()) throw IoError("truncated PNM header in " + path);
    ++pos;  // single whitespace byte before the payload
    h.payload_offset = pos;
    return h;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open file for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing file: " + path);
}

// ------------------------------------------------------------- generation

double bilinear_grid(const std::vector<double>& grid, int g, double fx, double fy) {
    // grid is (g+1) x (g+1); fx, fy in [0, 1]
    const double x = fx * g, y = fy * g;
    const int x0 = std::min(static_cast<int>(x), g - 1), y0 = std::min(static_cast<int>(y), g - 1);
    const double tx = x - x0, ty = y - y0;
    auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy * (g + 1) + xx)]; };
    return at(y0, x0) * (1 - tx) * (1 - ty) + at(y0, x0 + 1) * tx * (1 - ty) +
           at(y0 + 1, x0) * (1 - tx) * ty + at(y0 + 1, x0 + 1) * tx * ty;
}

std::vector<double> random_grid(Rng& rng, int g, double amp) {
    std::vector<double> grid(static_cast<std::size_t>((g + 1) * (g + 1)));
    for (auto& v : grid) v = rng.uniform(-amp, amp);
    return grid;
}

struct LesionShape {
    double cx, cy, r0, elong, rot;
    double amp[4], phase[4];

    // normalized radius and boundary modulation at a pixel
    void polar(double px, double py, double* rho, double* rmod) const {
        const double dx = px - cx, dy = py - cy;
        const double c = std::cos(rot), s = std::sin(rot);
        const double u = (dx * c + dy * s) / (r0 * elong);
        const double v = (-dx * s + dy * c) / (r0 / elong);
        *rho = std::sqrt(u * u + v * v);
        const double theta = std::atan2(v, u);
        double m = 1.0;
        for (int k = 0; k < 4; ++k) m += amp[k] * std::cos((k + 1) * theta + phase[k]);
        *rmod = m;
    }
};

void generate_sample(int size, std::uint64_t seed, std::int64_t index, bool hair, float* img, float* msk) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(index));
    const int S = size;
    const double Sd = static_cast<double>(S);

    // skin-tone background with low-frequency value noise
    const double base_r = rng.uniform(0.72, 0.90);
    const double base_g = base_r * rng.uniform(0.70, 0.85);
    const double base_b = base_g * rng.uniform(0.75, 0.92);
    const int g_lo = 5;
    const auto lum = random_grid(rng, g_lo, 0.06);
    const auto tint = random_grid(rng, g_lo, 0.02);

    // lesion geometry; redraw until the area constraint holds
    LesionShape shape{};
    std::vector<unsigned char> inside(static_cast<std::size_t>(S) * S);
    std::vector<float> sdist(static_cast<std::size_t>(S) * S);
    for (int attempt = 0; attempt < 16; ++attempt) {
        shape.cx = rng.uniform(0.32, 0.68) * Sd;
        shape.cy = rng.uniform(0.32, 0.68) * Sd;
        shape.r0 = rng.uniform(0.13, 0.28) * Sd;
        shape.elong = rng.uniform(0.85, 1.20);
        shape.rot = rng.uniform(0.0, 3.14159265358979323846);
        for (int k = 0; k < 4; ++k) {
            const double a = rng.uniform(0.02, 0.10 / (k + 1));
            shape.amp[k] = rng.uniform() < 0.5 ? a : -a;
            shape.phase[k] = rng.uniform(0.0, 6.28318530717958647692);
        }
        std::int64_t area = 0;
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double rho, rmod;
                shape.polar(x + 0.5, y + 0.5, &rho, &rmod);
                const double sd = (rmod - rho) * shape.r0;  // approx signed distance in pixels
                const std::size_t i = static_cast<std::size_t>(y) * S + x;
                inside[i] = sd >= 0.0 ? 1 : 0;
                sdist[i] = static_cast<float>(sd);
                area += inside[i];
            }
        }
        const double frac = static_cast<double>(area) / (Sd * Sd);
        if (frac >= 0.02 && frac <= 0.60) break;
        if (attempt == 15) throw Error("synthetic generator failed to land lesion area in [2%, 60%]");
    }

    // lesion interior: dark, textured, slightly darker toward the core
    const double les_r = rng.uniform(0.18, 0.40);
    const double les_g = les_r * rng.uniform(0.55, 0.80);
    const double les_b = les_g * rng.uniform(0.50, 0.80);
    const int g_hi = 9;
    const auto tex = random_grid(rng, g_hi, 0.05);

    const std::int64_t plane = static_cast<std::int64_t>(S) * S;
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * S + x;
            const double fx = (x + 0.5) / Sd, fy = (y + 0.5) / Sd;
            const double n = bilinear_grid(lum, g_lo, fx, fy);
            const double t = bilinear_grid(tint, g_lo, fx, fy);
            double r = base_r + n + t, g = base_g + n, b = base_b + n - t;

            const double sd = sdist[i];
            const double alpha = std::clamp(0.5 + sd / 3.0, 0.0, 1.0);  // ~3 px blend band
            if (alpha > 0.0) {
                double rho, rmod;
                shape.polar(x + 0.5, y + 0.5, &rho, &rmod);
                const double core = 1.0 - 0.35 * std::max(0.0, 1.0 - rho);
                const double txn = bilinear_grid(tex, g_hi, fx, fy);
                const double lr = (les_r + txn) * core;
                const double lg = (les_g + txn) * core;
                const double lb = (les_b + txn * 0.8) * core;
                r = r * (1 - alpha) + lr * alpha;
                g = g * (1 - alpha) + lg * alpha;
                b = b * (1 - alpha) + lb * alpha;
            }
            img[0 * plane + i] = static_cast<float>(std::clamp(r, 0.0, 1.0));
            img[1 * plane + i] = static_cast<float>(std::clamp(g, 0.0, 1.0));
            img[2 * plane + i] = static_cast<float>(std::clamp(b, 0.0, 1.0));
            msk[i] = static_cast<float>(inside[i]);
        }
    }

    if (hair) {
        const int n_hairs = 2 + static_cast<int>(rng.uniform_int(5));
        for (int hcount = 0; hcount < n_hairs; ++hcount) {
            const double hx = rng.uniform(-0.5, 1.5) * Sd;
            const double hy = rng.uniform(-0.5, 1.5) * Sd;
            const double R = rng.uniform(0.6, 1.8) * Sd;
            const double t0 = rng.uniform(0.0, 6.28318530717958647692);
            const double span = rng.uniform(0.3, 1.2);
            const double dark = rng.uniform(0.03, 0.15);
            const double thick = rng.uniform(0.7, 1.6);
            const double step = 0.4 / R;
            for (double t = t0; t < t0 + span; t += step) {
                const double px = hx + R * std::cos(t), py = hy + R * std::sin(t);
                const int x0 = static_cast<int>(std::floor(px - thick)), x1 = static_cast<int>(std::ceil(px + thick));
                const int y0 = static_cast<int>(std::floor(py - thick)), y1 = static_cast<int>(std::ceil(py + thick));
                for (int y = std::max(0, y0); y <= std::min(S - 1, y1); ++y) {
                    for (int x = std::max(0, x0); x <= std::min(S - 1, x1); ++x) {
                        const double d = std::hypot(x + 0.5 - px, y + 0.5 - py);
                        if (d > thick) continue;
                        const double a = 0.8 * (1.0 - d / thick);
                        const std::size_t i = static_cast<std::size_t>(y) * S + x;
                        for (int c = 0; c < 3; ++c) {
                            const double v = static_cast<double>(img[c * plane + i]);
                            img[c * plane + i] = static_cast<float>(v * (1 - a) + dark * a);
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

SampleBatch gen_synthetic(int count, int size, std::uint64_t seed, bool hair_artifacts) {
    if (count <= 0 || size <= 0) throw ArgumentError("gen_synthetic: count and size must be positive");
    SampleBatch batch;
    batch.images = Tensor({count, 3, size, size});
    batch.masks = Tensor({count, 1, size, size});
    float* img = batch.images.data().data();
    float* msk = batch.masks.data().data();
    const std::int64_t iplane = 3LL * size * size, mplane = 1LL * size * size;
    for (int i = 0; i < count; ++i) {
        generate_sample(size, seed, i, hair_artifacts, img + i * iplane, msk + i * mplane);
    }
    return batch;
}

Tensor load_image(const std::string& path) {
    const std::string bytes = read_file(path);
    const PnmHeader h = parse_pnm_header(bytes, path);
    if (h.magic != "P6") throw IoError("expected P6 pixmap magic in " + path + ", got \"" + h.magic + "\"");
    if (h.maxval != 255) throw IoError("unsupported maxval " + std::to_string(h.maxval) + " in " + path);
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
    if (bytes.size() - h.payload_offset < need) throw IoError("truncated P6 payload in " + path);
    Tensor t({3, h.height, h.width});
    auto d = t.data();
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
    const std::int64_t plane = h.height * h.width;
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) d[c * plane + i] = static_cast<float>(p[3 * i + c]) / 255.0f;
    }
    return t;
}

void save_image(const Tensor& image, const std::string& path) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw ArgumentError("save_image: expected [3,H,W], got " + shape_str(image.shape()));
    }
    const std::int64_t H = image.dim(1), W = image.dim(2), plane = H * W;
    std::ostringstream head;
    head << "P6\n" << W << " " << H << "\n255\n";
    std::string out = head.str();
    auto d = image.data();
    out.reserve(out.size() + static_cast<std::size_t>(plane) * 3);
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(d[c * plane + i], 0.0f, 1.0f);
            out.push_back(static_cast<char>(std::lround(v * 255.0f)));
        }
    }
    write_file(path, out);
}

Tensor load_mask(const std::string& path) {
    const std::string bytes = read_file(path);
    const PnmHeader h = parse_pnm_header(bytes, path);
    if (h.magic != "P5") throw IoError("expected P5 graymap magic in " + path + ", got \"" + h.magic + "\"");
    if (h.maxval != 255) throw IoError("unsupported maxval " + std::to_string(h.maxval) + " in " + path);
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
    if (bytes.size() - h.payload_offset < need) throw IoError("truncated P5 payload in " + path);
    Tensor t({1, h.height, h.width});
    auto d = t.data();
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
    for (std::size_t i = 0; i < need; ++i) d[static_cast<std::int64_t>(i)] = p[i] >= 128 ? 1.0f : 0.0f;
    return t;
}

void save_mask(const Tensor& mask, const std::string& path) {
    if (mask.ndim() != 3 || mask.dim(0) != 1) {
        throw ArgumentError("save_mask: expected [1,H,W], got " + shape_str(mask.shape()));
    }
    const std::int64_t H = mask.dim(1), W = mask.dim(2);
    std::ostringstream head;
    head << "P5\n" << W << " " << H << "\n255\n";
    std::string out = head.str();
    for (float v : mask.data()) out.push_back(static_cast<char>(v >= 0.5f ? 255 : 0));
    write_file(path, out);
}

namespace {

std::string sample_name(int index, const char* ext) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d%s", index, ext);
    return buf;
}

Tensor slice_sample(const Tensor& batch, std::int64_t index) {
    const std::int64_t C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    Tensor t({C, H, W});
    const std::int64_t n = C * H * W;
    std::copy(batch.data().begin() + index * n, batch.data().begin() + (index + 1) * n, t.data().begin());
    return t;
}

}  // namespace

void write_dataset(const std::string& dir, const SampleBatch& batch, const DatasetMeta& meta) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    for (std::int64_t i = 0; i < batch.count(); ++i) {
        save_image(slice_sample(batch.images, i), (fs::path(dir) / "images" / sample_name(static_cast<int>(i), ".ppm")).string());
        save_mask(slice_sample(batch.masks, i), (fs::path(dir) / "masks" / sample_name(static_cast<int>(i), ".pgm")).string());
    }
    nlohmann::ordered_json j;
    j["count"] = meta.count;
    j["size"] = meta.size;
    j["seed"] = meta.seed;
    j["hair"] = meta.hair;
    write_file((fs::path(dir) / "meta.json").string(), j.dump(2) + "\n");
}

DatasetMeta read_dataset_meta(const std::string& dir) {
    const std::string text = read_file((fs::path(dir) / "meta.json").string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("malformed meta.json: ") + e.what());
    }
    DatasetMeta m;
    m.count = j.at("count").get<int>();
    m.size = j.at("size").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.hair = j.value("hair", false);
    return m;
}

SampleBatch load_dataset(const std::string& dir) {
    const DatasetMeta meta = read_dataset_meta(dir);
    if (meta.count <= 0) throw IoError("dataset is empty: " + dir);
    SampleBatch batch;
    for (int i = 0; i < meta.count; ++i) {
        Tensor img = load_image((fs::path(dir) / "images" / sample_name(i, ".ppm")).string());
        Tensor msk = load_mask((fs::path(dir) / "masks" / sample_name(i, ".pgm")).string());
        if (i == 0) {
            batch.images = Tensor({meta.count, 3, img.dim(1), img.dim(2)});
            batch.masks = Tensor({meta.count, 1, msk.dim(1), msk.dim(2)});
        }
        if (img.dim(1) != batch.images.dim(2) || img.dim(2) != batch.images.dim(3)) {
            throw IoError("dataset images disagree on size at index " + std::to_string(i));
        }
        std::copy(img.data().begin(), img.data().end(),
                  batch.images.data().begin() + static_cast<std::int64_t>(i) * img.numel());
        std::copy(msk.data().begin(), msk.data().end(),
                  batch.masks.data().begin() + static_cast<std::int64_t>(i) * msk.numel());
    }
    return batch;
}

}  // namespace mutr
