#pragma once

// Synthetic lesion dataset generation and binary PPM/PGM image I/O.
// Dataset directory layout: images/NNNN.ppm, masks/NNNN.pgm, meta.json.

#include <cstdint>
#include <string>

#include "mutr/tensor.hpp"

namespace mutr {

struct SampleBatch {
    Tensor images;  // [N, 3, H, W] in [0, 1]
    Tensor masks;   // [N, 1, H, W] strictly {0, 1}

    std::int64_t count() const { return images.defined() ? images.dim(0) : 0; }
};

// Deterministic procedural dermoscopy stand-ins: skin-tone background with
// low-frequency noise plus one irregular ellipse lesion (Fourier-modulated
// boundary, darker textured interior), optional dark hair arcs. Every sample
// is a pure function of (seed, index); lesion area lands in [2%, 60%] of the
// image and the image mean in [0.2, 0.9].
SampleBatch gen_synthetic(int count, int size, std::uint64_t seed, bool hair_artifacts);

// P6 portable pixmap, 8-bit, maxval 255 only. Values scaled to [0, 1].
Tensor load_image(const std::string& path);  // [3, H, W]
void save_image(const Tensor& image, const std::string& path);

// P5 portable graymap; loads binarize at 128, saves write {0, 255}.
Tensor load_mask(const std::string& path);  // [1, H, W] in {0, 1}
void save_mask(const Tensor& mask, const std::string& path);

struct DatasetMeta {
    int count = 0;
    int size = 0;
    std::uint64_t seed = 0;
    bool hair = false;
};

void write_dataset(const std::string& dir, const SampleBatch& batch, const DatasetMeta& meta);
DatasetMeta read_dataset_meta(const std::string& dir);
SampleBatch load_dataset(const std::string& dir);

}  // namespace mutr
