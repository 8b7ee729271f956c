#include "nslnet/generators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nslnet/rng.hpp"
#include "nslnet/threads.hpp"

namespace nsl {

MaskStack foreground_mask(const Tensor4f& images, double tau) {
    const Shape4& s = images.shape();
    if (s.channels != 1) throw ShapeError("foreground_mask: expected single-channel images");
    MaskStack m;
    m.count = s.batch;
    m.height = s.height;
    m.width = s.width;
    m.fg.assign(static_cast<std::size_t>(s.batch * s.pixels()), 0);
    const float t = static_cast<float>(tau);
    for (i64 i = 0; i < images.size(); ++i) m.fg[static_cast<std::size_t>(i)] = images[i] > t ? 1 : 0;
    return m;
}

namespace {

LabeledImages like(const LabeledImages& src) {
    LabeledImages out;
    out.images = Tensor4f(src.images.shape());
    out.labels = src.labels;
    return out;
}

}  // namespace

LabeledImages gen_mnist_p(const LabeledImages& src, std::uint64_t seed) {
    const MaskStack mask = foreground_mask(src.images);
    LabeledImages out = like(src);
    const Shape4& s = src.images.shape();
    const Rng root(seed);

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 n = b0; n < b1; ++n) {
            Rng rng = root.split(static_cast<std::uint64_t>(n));
            float* dst = out.images.data() + n * s.pixels();
            const std::uint8_t* fg = mask.fg.data() + n * s.pixels();
            for (i64 p = 0; p < s.pixels(); ++p) {
                const double lit = fg[p] ? 0.5 : 0.05;
                dst[p] = rng.uniform() < lit ? 1.0f : 0.0f;
            }
        }
    });
    return out;
}

LabeledImages gen_mnist_s(const LabeledImages& src, std::uint64_t seed, int stamp_stride,
                          double distractor_density) {
    if (stamp_stride < 1) throw ParamError("gen_mnist_s: stamp_stride must be >= 1");
    static constexpr int kPlus[3][3] = {{0, 1, 0}, {1, 1, 1}, {0, 1, 0}};
    static constexpr int kCross[3][3] = {{1, 0, 1}, {0, 1, 0}, {1, 0, 1}};

    const MaskStack mask = foreground_mask(src.images);
    LabeledImages out = like(src);
    const Shape4& s = src.images.shape();
    const Rng root(seed);

    auto stamp = [&](i64 n, i64 cy, i64 cx, const int glyph[3][3]) {
        for (i64 dy = -1; dy <= 1; ++dy) {
            for (i64 dx = -1; dx <= 1; ++dx) {
                out.images(n, 0, cy + dy, cx + dx) = static_cast<float>(glyph[dy + 1][dx + 1]);
            }
        }
    };

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 n = b0; n < b1; ++n) {
            Rng rng = root.split(static_cast<std::uint64_t>(n));
            std::fill_n(out.images.data() + n * s.pixels(), s.pixels(), 0.0f);
            // Glyph centers stay one pixel inside the grid.
            for (i64 y = 1; y + 1 < s.height; ++y) {
                for (i64 x = 1; x + 1 < s.width; ++x) {
                    if (mask.at(n, y, x) && y % stamp_stride == 1 && x % stamp_stride == 1) {
                        stamp(n, y, x, kPlus);
                    }
                }
            }
            for (i64 y = 1; y + 1 < s.height; ++y) {
                for (i64 x = 1; x + 1 < s.width; ++x) {
                    if (!mask.at(n, y, x) && rng.uniform() < distractor_density) {
                        stamp(n, y, x, kCross);
                    }
                }
            }
        }
    });
    return out;
}

LabeledImages gen_mnist_v(const LabeledImages& src, std::uint64_t seed, double mean, double sigma_fg,
                          double sigma_bg) {
    const MaskStack mask = foreground_mask(src.images);
    LabeledImages out = like(src);
    const Shape4& s = src.images.shape();
    const Rng root(seed);

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 n = b0; n < b1; ++n) {
            Rng rng = root.split(static_cast<std::uint64_t>(n));
            float* dst = out.images.data() + n * s.pixels();
            const std::uint8_t* fg = mask.fg.data() + n * s.pixels();
            for (i64 p = 0; p < s.pixels(); ++p) {
                const double v = rng.normal(mean, fg[p] ? sigma_fg : sigma_bg);
                dst[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    });
    return out;
}

LabeledImages gen_mnist_m(const LabeledImages& src, const std::filesystem::path& backgrounds_dir,
                          std::uint64_t seed) {
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(backgrounds_dir)) {
        for (const auto& e : std::filesystem::directory_iterator(backgrounds_dir)) {
            if (!e.is_regular_file()) continue;
            const auto ext = e.path().extension().string();
            if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw DataError("gen_mnist_m: backgrounds required (no .pgm/.ppm files in '" +
                        backgrounds_dir.string() + "')");
    }

    const Shape4& s = src.images.shape();
    std::vector<Tensor4f> backgrounds;
    backgrounds.reserve(files.size());
    for (const auto& f : files) {
        Tensor4f bg = read_pnm_gray(f);
        if (bg.shape().height < s.height || bg.shape().width < s.width) {
            throw DataError("gen_mnist_m: background '" + f.string() + "' smaller than " +
                            std::to_string(s.height) + "x" + std::to_string(s.width));
        }
        backgrounds.push_back(std::move(bg));
    }

    LabeledImages out = like(src);
    const Rng root(seed);

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 n = b0; n < b1; ++n) {
            Rng rng = root.split(static_cast<std::uint64_t>(n));
            const Tensor4f& bg = backgrounds[rng.uniform_int(backgrounds.size())];
            const i64 maxy = bg.shape().height - s.height;
            const i64 maxx = bg.shape().width - s.width;
            const i64 oy = maxy > 0 ? static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(maxy) + 1)) : 0;
            const i64 ox = maxx > 0 ? static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(maxx) + 1)) : 0;
            for (i64 y = 0; y < s.height; ++y) {
                for (i64 x = 0; x < s.width; ++x) {
                    const float b = bg(0, 0, oy + y, ox + x);
                    const float d = src.images(n, 0, y, x);
                    out.images(n, 0, y, x) = std::abs(b - d);
                }
            }
        }
    });
    return out;
}

void TwoRegionSpec::validate() const {
    if (mu_f.size() != mu_b.size() || mu_f.empty()) {
        throw ParamError("TwoRegionSpec: mu_f and mu_b must be non-empty and equal length");
    }
    if (mu_f == mu_b) throw ParamError("TwoRegionSpec: mu_f must differ from mu_b");
    if (sigma_f < 0 || sigma_b < 0) throw ParamError("TwoRegionSpec: sigmas must be >= 0");
    if (!(p_f > 0 && p_f < 1)) throw ParamError("TwoRegionSpec: p_f must lie in (0, 1)");
    if (height < 1 || width < 1) throw ParamError("TwoRegionSpec: grid extents must be >= 1");
}

TwoRegionBatch gen_two_region(const TwoRegionSpec& spec, i64 count, std::uint64_t seed) {
    spec.validate();
    const i64 ch = spec.channels();
    const i64 hw = spec.height * spec.width;

    // Disk = the round(p_f * |grid|) pixels nearest the grid center, so the
    // realized foreground fraction tracks p_f to within one pixel.
    const i64 k = std::clamp<i64>(static_cast<i64>(std::llround(spec.p_f * static_cast<double>(hw))), 1, hw - 1);
    const double cy = static_cast<double>(spec.height - 1) / 2.0;
    const double cx = static_cast<double>(spec.width - 1) / 2.0;
    std::vector<i64> order(static_cast<std::size_t>(hw));
    std::iota(order.begin(), order.end(), 0);
    auto dist2 = [&](i64 p) {
        const double dy = static_cast<double>(p / spec.width) - cy;
        const double dx = static_cast<double>(p % spec.width) - cx;
        return dy * dy + dx * dx;
    };
    std::sort(order.begin(), order.end(), [&](i64 a, i64 b) {
        const double da = dist2(a), db = dist2(b);
        return da != db ? da < db : a < b;
    });

    TwoRegionBatch out;
    out.masks.count = count;
    out.masks.height = spec.height;
    out.masks.width = spec.width;
    out.masks.fg.assign(static_cast<std::size_t>(count * hw), 0);
    for (i64 n = 0; n < count; ++n) {
        for (i64 i = 0; i < k; ++i) {
            out.masks.fg[static_cast<std::size_t>(n * hw + order[static_cast<std::size_t>(i)])] = 1;
        }
    }

    out.images = Tensor4d(Shape4{count, ch, spec.height, spec.width});
    const Rng root(seed);
    parallel_for(count, [&](i64 b0, i64 b1) {
        for (i64 n = b0; n < b1; ++n) {
            Rng rng = root.split(static_cast<std::uint64_t>(n));
            for (i64 p = 0; p < hw; ++p) {
                const bool fg = out.masks.fg[static_cast<std::size_t>(n * hw + p)] != 0;
                const double* mu = fg ? spec.mu_f.data() : spec.mu_b.data();
                const double sigma = fg ? spec.sigma_f : spec.sigma_b;
                for (i64 c = 0; c < ch; ++c) {
                    out.images[((n * ch + c) * hw) + p] = rng.normal(mu[c], sigma);
                }
            }
        }
    });
    return out;
}

Tensor4f gaussian_dot_targets(const std::vector<PointSet>& annotations, i64 height, i64 width, double sigma) {
    if (sigma <= 0) throw ParamError("gaussian_dot_targets: sigma must be > 0");
    const i64 n = static_cast<i64>(annotations.size());
    Tensor4f out(Shape4{std::max<i64>(n, 1), 1, height, width});
    if (n == 0) return out;

    for (i64 i = 0; i < n; ++i) {
        for (const auto& [row, col] : annotations[static_cast<std::size_t>(i)].points) {
            if (row < 0 || row >= static_cast<double>(height) || col < 0 || col >= static_cast<double>(width)) {
                throw DataError("gaussian_dot_targets: point outside the grid");
            }
        }
    }
    const double denom = 2.0 * sigma * sigma;
    parallel_for(n, [&](i64 b0, i64 b1) {
        for (i64 i = b0; i < b1; ++i) {
            float* dst = out.data() + i * height * width;
            for (const auto& [row, col] : annotations[static_cast<std::size_t>(i)].points) {
                for (i64 y = 0; y < height; ++y) {
                    const double dy = static_cast<double>(y) - row;
                    for (i64 x = 0; x < width; ++x) {
                        const double dx = static_cast<double>(x) - col;
                        const float v = static_cast<float>(std::exp(-(dy * dy + dx * dx) / denom));
                        float& cell = dst[y * width + x];
                        cell = std::max(cell, v);
                    }
                }
            }
        }
    });
    return out;
}

}  // namespace nsl
