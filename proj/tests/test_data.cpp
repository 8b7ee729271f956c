#include <doctest.h>
#include <functional>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nslnet/generators.hpp"
#include "nslnet/idx.hpp"
#include "test_util.hpp"

using namespace nsl;
using namespace nsltest;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    const fs::path d = fs::temp_directory_path() / "nslnet_test_data";
    fs::create_directories(d);
    return d;
}

// Digit-like stand-in corpus: bright blob on a dark field.
LabeledImages synthetic_digits(i64 n, std::uint64_t seed) {
    LabeledImages out;
    out.images = Tensor4f(Shape4{n, 1, 28, 28});
    out.labels.resize(static_cast<std::size_t>(n));
    const Rng root(seed);
    for (i64 i = 0; i < n; ++i) {
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        out.labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(10));
        const double cy = rng.uniform(8.0, 20.0);
        const double cx = rng.uniform(8.0, 20.0);
        const double r = rng.uniform(3.0, 7.0);
        for (i64 y = 0; y < 28; ++y) {
            for (i64 x = 0; x < 28; ++x) {
                const double d = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
                out.images(i, 0, y, x) = d < r ? static_cast<float>(rng.uniform(0.6, 1.0)) : 0.0f;
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("idx round-trip") {
    const LabeledImages src = synthetic_digits(32, 5);
    const fs::path d = scratch_dir();
    write_idx(src, d / "imgs.idx", d / "labs.idx");
    const LabeledImages back = read_idx(d / "imgs.idx", d / "labs.idx");

    CHECK(back.count() == 32);
    CHECK(back.labels == src.labels);
    for (i64 i = 0; i < src.images.size(); ++i) {
        CHECK(std::abs(back.images[i] - src.images[i]) <= 1.0f / 256.0f);
    }

    // quantization is exact at u8 resolution: a second trip is lossless
    write_idx(back, d / "imgs2.idx", d / "labs2.idx");
    const LabeledImages back2 = read_idx(d / "imgs2.idx", d / "labs2.idx");
    CHECK(bitwise_equal(back2.images, back.images));
    CHECK(back2.labels == back.labels);
}

TEST_CASE("idx format errors") {
    const fs::path d = scratch_dir();
    {
        std::ofstream os(d / "bad.idx", std::ios::binary);
        const char junk[16] = {0, 0, 9, 9};
        os.write(junk, sizeof(junk));
    }
    CHECK_THROWS_AS(read_idx(d / "bad.idx", d / "bad.idx"), FormatError);

    const LabeledImages src = synthetic_digits(4, 6);
    write_idx(src, d / "t_imgs.idx", d / "t_labs.idx");
    // truncate the image payload
    fs::resize_file(d / "t_imgs.idx", 16 + 3 * 28 * 28 + 10);
    CHECK_THROWS_AS(read_idx(d / "t_imgs.idx", d / "t_labs.idx"), FormatError);

    CHECK_THROWS_AS(read_idx(d / "missing.idx", d / "missing.idx"), IoError);
}

TEST_CASE("foreground_mask") {
    Tensor4f img(Shape4{1, 1, 2, 2});
    MaskStack empty = foreground_mask(img, 0.5);
    CHECK_FALSE(empty.at(0, 0, 0));

    img(0, 0, 1, 1) = 0.9f;
    const MaskStack m = foreground_mask(img, 0.5);
    CHECK(m.at(0, 1, 1));
    CHECK_FALSE(m.at(0, 0, 0));
}

TEST_CASE("speckle variant") {
    const LabeledImages src = synthetic_digits(60, 7);
    const LabeledImages out = gen_mnist_p(src, 99);

    CHECK(out.labels == src.labels);
    for (i64 i = 0; i < out.images.size(); ++i) {
        CHECK((out.images[i] == 0.0f || out.images[i] == 1.0f));
    }

    const MaskStack mask = foreground_mask(src.images);
    i64 fg_total = 0, fg_lit = 0, bg_total = 0, bg_lit = 0;
    for (i64 n = 0; n < out.count(); ++n) {
        for (i64 y = 0; y < 28; ++y) {
            for (i64 x = 0; x < 28; ++x) {
                const bool lit = out.images(n, 0, y, x) == 1.0f;
                if (mask.at(n, y, x)) {
                    ++fg_total;
                    fg_lit += lit;
                } else {
                    ++bg_total;
                    bg_lit += lit;
                }
            }
        }
    }
    // binomial 3-sigma bounds around the construction probabilities
    const double fg_rate = static_cast<double>(fg_lit) / static_cast<double>(fg_total);
    const double bg_rate = static_cast<double>(bg_lit) / static_cast<double>(bg_total);
    CHECK(std::abs(fg_rate - 0.5) < 3.0 * std::sqrt(0.25 / static_cast<double>(fg_total)));
    CHECK(std::abs(bg_rate - 0.05) < 3.0 * std::sqrt(0.05 * 0.95 / static_cast<double>(bg_total)));

    const LabeledImages again = gen_mnist_p(src, 99);
    CHECK(bitwise_equal(again.images, out.images));
    const LabeledImages other = gen_mnist_p(src, 100);
    CHECK_FALSE(bitwise_equal(other.images, out.images));
}

TEST_CASE("glyph variant") {
    SUBCASE("blank images keep only distractor glyphs") {
        LabeledImages blank;
        const i64 n = 200;
        blank.images = Tensor4f(Shape4{n, 1, 28, 28});
        blank.labels.assign(static_cast<std::size_t>(n), 0);
        const LabeledImages out = gen_mnist_s(blank, 4242);

        for (i64 i = 0; i < out.images.size(); ++i) {
            CHECK((out.images[i] == 0.0f || out.images[i] == 1.0f));
        }
        // each interior site is stamped with probability 0.02; the X glyph
        // carries 5 lit pixels, overlaps reduce the total slightly
        i64 stamps = 0;
        for (i64 i = 0; i < n; ++i) {
            i64 lit = 0;
            const float* img = out.images.data() + i * 28 * 28;
            for (i64 p = 0; p < 28 * 28; ++p) lit += img[p] == 1.0f;
            stamps += lit;
        }
        const double expected = 0.02 * 26.0 * 26.0 * static_cast<double>(n) * 5.0;
        CHECK(static_cast<double>(stamps) > 0.80 * expected);
        CHECK(static_cast<double>(stamps) < 1.05 * expected);
    }

    SUBCASE("solid foreground gets the plus glyph lattice") {
        LabeledImages solid;
        solid.images = Tensor4f(Shape4{1, 1, 28, 28}, 1.0f);
        solid.labels = {3};
        const LabeledImages out = gen_mnist_s(solid, 1);
        CHECK(out.labels == solid.labels);
        // a plus center sits at (4, 4): cross arms lit, corners dark
        CHECK(out.images(0, 0, 4, 4) == 1.0f);
        CHECK(out.images(0, 0, 3, 4) == 1.0f);
        CHECK(out.images(0, 0, 4, 3) == 1.0f);
        CHECK(out.images(0, 0, 3, 3) == 0.0f);
    }

    SUBCASE("deterministic under seed") {
        const LabeledImages src = synthetic_digits(8, 9);
        const LabeledImages a = gen_mnist_s(src, 5);
        const LabeledImages b = gen_mnist_s(src, 5);
        CHECK(bitwise_equal(a.images, b.images));
    }
}

TEST_CASE("intensity-spread variant") {
    const LabeledImages src = synthetic_digits(120, 11);
    const LabeledImages out = gen_mnist_v(src, 31);
    CHECK(out.labels == src.labels);

    for (i64 i = 0; i < out.images.size(); ++i) {
        CHECK(out.images[i] >= 0.0f);
        CHECK(out.images[i] <= 1.0f);
    }

    const MaskStack mask = foreground_mask(src.images);
    double fg_sum = 0, bg_sum = 0, fg_sq = 0, bg_sq = 0;
    i64 fg_n = 0, bg_n = 0;
    for (i64 n = 0; n < out.count(); ++n) {
        for (i64 y = 0; y < 28; ++y) {
            for (i64 x = 0; x < 28; ++x) {
                const double v = out.images(n, 0, y, x);
                if (mask.at(n, y, x)) {
                    fg_sum += v;
                    fg_sq += v * v;
                    ++fg_n;
                } else {
                    bg_sum += v;
                    bg_sq += v * v;
                    ++bg_n;
                }
            }
        }
    }
    const double fg_mean = fg_sum / static_cast<double>(fg_n);
    const double bg_mean = bg_sum / static_cast<double>(bg_n);
    const double fg_std = std::sqrt(fg_sq / static_cast<double>(fg_n) - fg_mean * fg_mean);
    const double bg_std = std::sqrt(bg_sq / static_cast<double>(bg_n) - bg_mean * bg_mean);

    CHECK(std::abs(fg_mean - bg_mean) < 0.01);  // same mean by construction
    CHECK(fg_std / bg_std > 3.0);               // very different spread

    CHECK(bitwise_equal(gen_mnist_v(src, 31).images, out.images));
}

TEST_CASE("background-blend variant") {
    const fs::path d = scratch_dir() / "bg";
    fs::create_directories(d);

    Tensor4f bg(Shape4{1, 1, 28, 28});
    Rng rng(77);
    for (i64 i = 0; i < bg.size(); ++i) bg[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    write_pgm(bg, d / "field.pgm");
    const Tensor4f bg_q = read_pnm_gray(d / "field.pgm");  // the quantized pixels the blend sees

    LabeledImages zero;
    zero.images = Tensor4f(Shape4{2, 1, 28, 28});
    zero.labels = {0, 1};
    const LabeledImages z = gen_mnist_m(zero, d, 3);
    for (i64 n = 0; n < 2; ++n) {
        for (i64 p = 0; p < 28 * 28; ++p) {
            CHECK(z.images[n * 28 * 28 + p] == doctest::Approx(bg_q[p]).epsilon(1e-6));
        }
    }

    LabeledImages one;
    one.images = Tensor4f(Shape4{1, 1, 28, 28}, 1.0f);
    one.labels = {2};
    const LabeledImages o = gen_mnist_m(one, d, 3);
    for (i64 p = 0; p < 28 * 28; ++p) {
        CHECK(o.images[p] == doctest::Approx(1.0f - bg_q[p]).epsilon(1e-6));
    }

    CHECK(bitwise_equal(gen_mnist_m(zero, d, 3).images, z.images));

    CHECK_THROWS_AS(gen_mnist_m(zero, scratch_dir() / "nowhere", 3), DataError);

    const fs::path small_dir = scratch_dir() / "bg_small";
    fs::create_directories(small_dir);
    write_pgm(Tensor4f(Shape4{1, 1, 10, 10}), small_dir / "tiny.pgm");
    CHECK_THROWS_AS(gen_mnist_m(zero, small_dir, 3), DataError);
}

TEST_CASE("two-region generator") {
    TwoRegionSpec spec;
    spec.mu_f = {1.0, 0.0, 0.5};
    spec.mu_b = {0.0, 1.0, 0.5};
    spec.p_f = 0.8;
    spec.height = spec.width = 64;

    SUBCASE("zero variance draws exactly two vectors") {
        spec.sigma_f = spec.sigma_b = 0.0;
        const TwoRegionBatch batch = gen_two_region(spec, 2, 1);
        for (i64 n = 0; n < 2; ++n) {
            for (i64 y = 0; y < 64; ++y) {
                for (i64 x = 0; x < 64; ++x) {
                    const bool fg = batch.masks.at(n, y, x);
                    for (i64 c = 0; c < 3; ++c) {
                        const double want = fg ? spec.mu_f[static_cast<std::size_t>(c)]
                                               : spec.mu_b[static_cast<std::size_t>(c)];
                        CHECK(batch.images(n, c, y, x) == want);
                    }
                }
            }
        }
    }

    SUBCASE("foreground fraction tracks p_f within 2 percent") {
        spec.sigma_f = spec.sigma_b = 0.1;
        const TwoRegionBatch batch = gen_two_region(spec, 1, 2);
        i64 fg = 0;
        for (i64 y = 0; y < 64; ++y)
            for (i64 x = 0; x < 64; ++x) fg += batch.masks.at(0, y, x);
        const double frac = static_cast<double>(fg) / (64.0 * 64.0);
        CHECK(std::abs(frac - 0.8) < 0.02);
    }

    SUBCASE("per-region sample means approach the channel means") {
        spec.sigma_f = 0.3;
        spec.sigma_b = 0.2;
        const TwoRegionBatch batch = gen_two_region(spec, 4, 3);
        for (i64 c = 0; c < 3; ++c) {
            double fs = 0, bs = 0;
            i64 fn = 0, bn = 0;
            for (i64 n = 0; n < 4; ++n) {
                for (i64 y = 0; y < 64; ++y) {
                    for (i64 x = 0; x < 64; ++x) {
                        if (batch.masks.at(n, y, x)) {
                            fs += batch.images(n, c, y, x);
                            ++fn;
                        } else {
                            bs += batch.images(n, c, y, x);
                            ++bn;
                        }
                    }
                }
            }
            CHECK(std::abs(fs / static_cast<double>(fn) - spec.mu_f[static_cast<std::size_t>(c)]) <
                  3.0 * 0.3 / std::sqrt(static_cast<double>(fn)));
            CHECK(std::abs(bs / static_cast<double>(bn) - spec.mu_b[static_cast<std::size_t>(c)]) <
                  3.0 * 0.2 / std::sqrt(static_cast<double>(bn)));
        }
    }

    SUBCASE("spec validation") {
        TwoRegionSpec bad = spec;
        bad.mu_b = bad.mu_f;
        CHECK_THROWS_AS(gen_two_region(bad, 1, 1), ParamError);
        bad = spec;
        bad.p_f = 1.5;
        CHECK_THROWS_AS(gen_two_region(bad, 1, 1), ParamError);
    }
}

TEST_CASE("gaussian dot targets") {
    SUBCASE("single centered point") {
        std::vector<PointSet> ann(1);
        ann[0].points = {{10.0, 10.0}};
        const Tensor4f t = gaussian_dot_targets(ann, 21, 21, 2.0);
        CHECK(t(0, 0, 10, 10) == doctest::Approx(1.0));
        for (i64 r = 1; r < 10; ++r) {
            CHECK(t(0, 0, 10 + r, 10) == doctest::Approx(t(0, 0, 10 - r, 10)).epsilon(1e-6));
            CHECK(t(0, 0, 10, 10 + r) == doctest::Approx(t(0, 0, 10 - r, 10)).epsilon(1e-6));
        }
    }
    SUBCASE("no points means a zero image") {
        std::vector<PointSet> ann(2);
        const Tensor4f t = gaussian_dot_targets(ann, 8, 8, 1.0);
        for (i64 i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0f);
    }
    SUBCASE("two distant points") {
        std::vector<PointSet> ann(1);
        ann[0].points = {{5.0, 5.0}, {5.0, 25.0}};
        const double sigma = 1.5;
        const Tensor4f t = gaussian_dot_targets(ann, 11, 31, sigma);
        CHECK(t(0, 0, 5, 5) == doctest::Approx(1.0));
        CHECK(t(0, 0, 5, 25) == doctest::Approx(1.0));
        const double d = 20.0;
        const double bound = std::exp(-d * d / (8.0 * sigma * sigma)) + 1e-9;
        CHECK(t(0, 0, 5, 15) < bound);
    }
    SUBCASE("points outside the grid are rejected") {
        std::vector<PointSet> ann(1);
        ann[0].points = {{-1.0, 3.0}};
        CHECK_THROWS_AS(gaussian_dot_targets(ann, 8, 8, 1.0), DataError);
    }
}

TEST_CASE("generated corpora stay in range and preserve labels") {
    const LabeledImages src = synthetic_digits(24, 13);
    const MaskStack src_mask = foreground_mask(src.images);
    using GenFn = std::function<LabeledImages(const LabeledImages&, std::uint64_t)>;
    const std::vector<GenFn> gens = {
        [](const LabeledImages& s, std::uint64_t seed) { return gen_mnist_p(s, seed); },
        [](const LabeledImages& s, std::uint64_t seed) { return gen_mnist_s(s, seed); },
        [](const LabeledImages& s, std::uint64_t seed) { return gen_mnist_v(s, seed); },
    };
    for (const auto& gen : gens) {
        const LabeledImages out = gen(src, 17);
        CHECK(out.count() == src.count());
        CHECK(out.labels == src.labels);
        for (i64 i = 0; i < out.images.size(); ++i) {
            CHECK(out.images[i] >= 0.0f);
            CHECK(out.images[i] <= 1.0f);
        }
    }

    // speckle output thresholded at the construction probabilities overlaps
    // the source mask far better than chance (Jaccard over the corpus)
    const LabeledImages speckle = gen_mnist_p(src, 17);
    const MaskStack lit = foreground_mask(speckle.images, 0.5);
    i64 inter = 0, uni = 0;
    for (i64 n = 0; n < src.count(); ++n) {
        for (i64 y = 0; y < 28; ++y) {
            for (i64 x = 0; x < 28; ++x) {
                const bool a = src_mask.at(n, y, x);
                const bool b = lit.at(n, y, x);
                inter += a && b;
                uni += a || b;
            }
        }
    }
    const double jaccard = static_cast<double>(inter) / static_cast<double>(uni);
    // fg pixels light at 0.5, bg at 0.05: expected overlap well above 0.3
    CHECK(jaccard > 0.3);
}
