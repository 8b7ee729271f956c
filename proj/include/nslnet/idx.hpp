#pragma once

#include <filesystem>
#include <vector>

#include "nslnet/tensor.hpp"

namespace nsl {

// Image corpus: pixels in [0, 1] (u8 files are divided by 256 on read),
// labels in [0, 10).
struct LabeledImages {
    Tensor4f images;  // (N, 1, H, W)
    std::vector<int> labels;

    i64 count() const { return images.shape().batch; }
};

// IDX container pair (big-endian dims, u8 payload):
// images magic 0x00000803, labels magic 0x00000801.
LabeledImages read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Pixels written as floor(p * 256) clamped to 255.
void write_idx(const LabeledImages& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

LabeledImages subset(const LabeledImages& data, i64 n);

// 8-bit binary PGM (P5) / PPM (P6), maxval 255; color collapses to the
// channel mean. Returns (1, 1, H, W) in [0, 1].
Tensor4f read_pnm_gray(const std::filesystem::path& path);
void write_pgm(const Tensor4f& image, const std::filesystem::path& path);

}  // namespace nsl
