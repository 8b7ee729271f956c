#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "nslnet/idx.hpp"
#include "nslnet/tensor.hpp"

namespace nsl {

// Per-image binary foreground masks.
struct MaskStack {
    i64 count = 0, height = 0, width = 0;
    std::vector<std::uint8_t> fg;

    bool at(i64 n, i64 y, i64 x) const { return fg[static_cast<std::size_t>((n * height + y) * width + x)] != 0; }
    void set(i64 n, i64 y, i64 x, bool v) { fg[static_cast<std::size_t>((n * height + y) * width + x)] = v ? 1 : 0; }
};

// mask = pixel > tau, on single-channel images.
MaskStack foreground_mask(const Tensor4f& images, double tau = 0.5);

// Binary speckle: foreground pixels lit with probability 0.5, background 0.05.
LabeledImages gen_mnist_p(const LabeledImages& src, std::uint64_t seed);

// 3x3 glyph stamping: a plus glyph on a stride-3 lattice of foreground
// pixels, an X distractor at random background sites (density 0.02),
// later stamps overwrite earlier ones.
LabeledImages gen_mnist_s(const LabeledImages& src, std::uint64_t seed,
                          int stamp_stride = 3, double distractor_density = 0.02);

// Same-mean different-spread intensities: foreground ~ N(0.5, 0.25^2),
// background ~ N(0.5, 0.05^2), clamped to [0, 1].
LabeledImages gen_mnist_v(const LabeledImages& src, std::uint64_t seed,
                          double mean = 0.5, double sigma_fg = 0.25, double sigma_bg = 0.05);

// Blends each digit with a random crop of a user-supplied background by
// per-pixel absolute difference.
LabeledImages gen_mnist_m(const LabeledImages& src, const std::filesystem::path& backgrounds_dir,
                          std::uint64_t seed);

// Two-region generative model: per-pixel feature vectors drawn i.i.d. from
// N(mu_f, sigma_f^2 I) inside a centered disk covering fraction p_f of the
// grid, N(mu_b, sigma_b^2 I) outside.
struct TwoRegionSpec {
    std::vector<double> mu_f, mu_b;  // channel means; must differ
    double sigma_f = 0, sigma_b = 0;
    double p_f = 0.5;
    i64 height = 64, width = 64;

    i64 channels() const { return static_cast<i64>(mu_f.size()); }
    void validate() const;
};

struct TwoRegionBatch {
    Tensor4d images;
    MaskStack masks;
};

TwoRegionBatch gen_two_region(const TwoRegionSpec& spec, i64 count, std::uint64_t seed);

// Point annotations of one image, (row, col) with sub-pixel precision.
struct PointSet {
    std::vector<std::pair<double, double>> points;
};

// Target density: max over points of exp(-d^2 / (2 sigma^2)), peak 1 at
// every annotation.
Tensor4f gaussian_dot_targets(const std::vector<PointSet>& annotations, i64 height, i64 width, double sigma);

}  // namespace nsl
