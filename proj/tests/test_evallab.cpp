#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "nslnet/evallab.hpp"
#include "test_util.hpp"

using namespace nsl;
using namespace nsltest;
namespace fs = std::filesystem;

namespace {

TwoRegionSpec base_spec() {
    TwoRegionSpec spec;
    spec.mu_f = {1.0, 0.2, -0.4};
    spec.mu_b = {0.0, 0.9, 0.1};
    spec.sigma_f = spec.sigma_b = 0.0;
    spec.p_f = 0.8;
    spec.height = spec.width = 64;
    return spec;
}

double norm2_diff(const TwoRegionSpec& s) {
    double u2 = 0;
    for (std::size_t c = 0; c < s.mu_f.size(); ++c) {
        const double d = s.mu_f[c] - s.mu_b[c];
        u2 += d * d;
    }
    return u2;
}

// Exhaustive minimum assignment for small matrices, also tracking the
// lexicographically smallest optimal column choice per ascending row.
struct BruteResult {
    double total = std::numeric_limits<double>::infinity();
    std::vector<int> best_cols;  // -1 for unassigned rows
};

// Unassigned rows order last in the lexicographic comparison.
std::vector<int> lex_key(std::vector<int> cols) {
    for (auto& v : cols) {
        if (v < 0) v = 1 << 20;
    }
    return cols;
}

void brute_rec(const std::vector<std::vector<double>>& cost, std::size_t row, std::vector<int>& cols,
               std::vector<char>& used, double acc, i64 assigned, i64 want, BruteResult& best) {
    const std::size_t rows = cost.size();
    if (row == rows) {
        if (assigned != want) return;
        if (acc < best.total - 1e-12) {
            best.total = acc;
            best.best_cols = cols;
        } else if (acc <= best.total + 1e-12 &&
                   (best.best_cols.empty() || lex_key(cols) < lex_key(best.best_cols))) {
            best.total = std::min(best.total, acc);
            best.best_cols = cols;
        }
        return;
    }
    const std::size_t ncols = cost[0].size();
    const i64 remaining_rows = static_cast<i64>(rows - row);
    // option: leave this row unassigned (only when enough rows remain)
    if (assigned + remaining_rows - 1 >= want) {
        cols[row] = -1;
        brute_rec(cost, row + 1, cols, used, acc, assigned, want, best);
    }
    for (std::size_t j = 0; j < ncols; ++j) {
        if (used[j]) continue;
        used[j] = 1;
        cols[row] = static_cast<int>(j);
        brute_rec(cost, row + 1, cols, used, acc + cost[row][j], assigned + 1, want, best);
        used[j] = 0;
    }
    cols[row] = -1;
}

BruteResult brute_force(const std::vector<std::vector<double>>& cost) {
    BruteResult best;
    if (cost.empty() || cost[0].empty()) {
        best.total = 0;
        return best;
    }
    std::vector<int> cols(cost.size(), -1);
    std::vector<char> used(cost[0].size(), 0);
    const i64 want = static_cast<i64>(std::min(cost.size(), cost[0].size()));
    brute_rec(cost, 0, cols, used, 0.0, 0, want, best);
    return best;
}

}  // namespace

TEST_CASE("invariance report: zero variance is exactly polar") {
    const TwoRegionSpec spec = base_spec();
    NslConfig cfg(square_neighborhood(3), 1e-8);
    const InvarianceReport rep = invariance_report(spec, cfg, nullptr, 20000, 1);

    CHECK(std::abs(rep.mean_sim_same - 1.0) <= 1e-12);
    CHECK(std::abs(rep.mean_sim_cross + 1.0) <= 1e-12);
    CHECK(rep.pairs_same >= 20000);
    CHECK(rep.pairs_cross >= 20000);

    // numerators match the closed forms exactly at zero variance (up to the
    // empirical-mean quantization of the disk)
    const double u2 = norm2_diff(spec);
    CHECK(rep.pred_num_same == doctest::Approx(0.04 * u2).epsilon(1e-12));
    CHECK(rep.pred_num_cross == doctest::Approx(-0.16 * u2).epsilon(1e-12));
    CHECK(rep.mean_num_same == doctest::Approx(rep.pred_num_same).epsilon(0.01));
    CHECK(rep.mean_num_cross == doctest::Approx(rep.pred_num_cross).epsilon(0.01));
}

TEST_CASE("invariance report: noisy estimates converge to the closed forms") {
    TwoRegionSpec spec = base_spec();
    const double u = std::sqrt(norm2_diff(spec));
    spec.sigma_f = spec.sigma_b = 0.1 * u;
    NslConfig cfg(square_neighborhood(3), 1e-8);
    const InvarianceReport rep = invariance_report(spec, cfg, nullptr, 100000, 2);

    CHECK(rep.pairs_same >= 100000);
    CHECK(rep.pairs_cross >= 100000);
    CHECK(std::abs(rep.mean_num_same - rep.pred_num_same) <= 0.05 * std::abs(rep.pred_num_same));
    CHECK(std::abs(rep.mean_num_cross - rep.pred_num_cross) <= 0.05 * std::abs(rep.pred_num_cross));
}

TEST_CASE("invariance report: sign consistency under moderate noise") {
    TwoRegionSpec spec = base_spec();
    const double u = std::sqrt(norm2_diff(spec));
    for (const double frac : {0.1, 0.2, 0.3}) {
        spec.sigma_f = spec.sigma_b = frac * u;
        NslConfig cfg(square_neighborhood(3), 1e-8);
        const InvarianceReport rep = invariance_report(spec, cfg, nullptr, 30000, 3);
        CHECK(rep.mean_sim_same > 0.0);
        CHECK(rep.mean_sim_cross < 0.0);
    }
}

TEST_CASE("invariance report: degenerate spec is rejected") {
    TwoRegionSpec spec = base_spec();
    spec.mu_b = spec.mu_f;
    NslConfig cfg(square_neighborhood(3), 1e-8);
    CHECK_THROWS_AS(invariance_report(spec, cfg, nullptr, 100, 1), ParamError);
}

TEST_CASE("feature_stats") {
    SUBCASE("constant maps have zero spread") {
        const Tensor4d maps = tensor_new(Shape4{2, 3, 4, 4}, 2.5);
        MaskStack mask;
        mask.count = 2;
        mask.height = mask.width = 4;
        mask.fg.assign(32, 0);
        mask.set(0, 1, 1, true);
        mask.set(1, 2, 2, true);
        const auto stats = feature_stats(maps, mask);
        REQUIRE(stats.size() == 3);
        for (const auto& s : stats) {
            CHECK(s.std_fg == 0.0);
            CHECK(s.std_bg == 0.0);
            CHECK(s.mean_fg == 2.5);
            CHECK(s.mean_bg == 2.5);
        }
    }

    SUBCASE("similarities of a two-value image are foreground-positive") {
        const TwoRegionSpec spec = base_spec();
        const TwoRegionBatch batch = gen_two_region(spec, 1, 5);
        NslConfig cfg(square_neighborhood(3), 1e-8);
        auto [psi, cache] = nsl_forward(batch.images, cfg);
        const auto stats = feature_stats(psi, batch.masks);
        // interior foreground dominates: same-region similarity +1 at most
        // pixels, boundary and border effects only dilute it
        double mean_fg_avg = 0;
        for (const auto& s : stats) mean_fg_avg += s.mean_fg;
        mean_fg_avg /= static_cast<double>(stats.size());
        CHECK(mean_fg_avg > 0.8);
    }

    SUBCASE("mask dims must match") {
        const Tensor4d maps(Shape4{1, 1, 4, 4});
        MaskStack mask;
        mask.count = 1;
        mask.height = mask.width = 3;
        mask.fg.assign(9, 0);
        CHECK_THROWS_AS(feature_stats(maps, mask), ShapeError);
    }
}

TEST_CASE("local_maxima") {
    SUBCASE("single bump yields its peak") {
        std::vector<PointSet> ann(1);
        ann[0].points = {{7.0, 9.0}};
        const Tensor4f bump = gaussian_dot_targets(ann, 16, 16, 2.0);
        const auto found = local_maxima(bump, 0.1, 2.0);
        REQUIRE(found.size() == 1);
        REQUIRE(found[0].points.size() == 1);
        CHECK(found[0].points[0].first == 7.0);
        CHECK(found[0].points[0].second == 9.0);
    }
    SUBCASE("flat images have no strict maxima") {
        const Tensor4f flat = tensor_new(Shape4{1, 1, 8, 8}, 0.7f);
        const auto found = local_maxima(flat, 0.0, 1.0);
        CHECK(found[0].points.empty());
    }
    SUBCASE("separation pruning keeps the higher peak") {
        Tensor4f img(Shape4{1, 1, 9, 9});
        img(0, 0, 4, 2) = 0.9f;
        img(0, 0, 4, 6) = 0.8f;
        auto both = local_maxima(img, 0.1, 3.0);
        CHECK(both[0].points.size() == 2);
        auto pruned = local_maxima(img, 0.1, 5.0);
        REQUIRE(pruned[0].points.size() == 1);
        CHECK(pruned[0].points[0].second == 2.0);  // the 0.9 peak
    }
}

TEST_CASE("hungarian basics") {
    CHECK(hungarian({}).pairs.empty());

    const Assignment one = hungarian({{3.5}});
    REQUIRE(one.pairs.size() == 1);
    CHECK(one.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(one.total == 3.5);

    const Assignment two = hungarian({{0.0, 1.0}, {1.0, 0.0}});
    REQUIRE(two.pairs.size() == 2);
    CHECK(two.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(two.pairs[1] == std::pair<int, int>{1, 1});
    CHECK(two.total == 0.0);

    CHECK_THROWS_AS(hungarian({{1.0, 2.0}, {3.0}}), ShapeError);
    CHECK_THROWS_AS(hungarian({{std::numeric_limits<double>::infinity()}}), DataError);
}

TEST_CASE("hungarian matches the brute-force oracle") {
    Rng rng(2718);
    for (int trial = 0; trial < 200; ++trial) {
        const int rows = 1 + static_cast<int>(rng.uniform_int(6));
        const int cols = 1 + static_cast<int>(rng.uniform_int(6));
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(rows),
                                              std::vector<double>(static_cast<std::size_t>(cols)));
        // small integer costs force plenty of ties
        const bool integral = trial % 2 == 0;
        for (auto& row : cost) {
            for (double& c : row) {
                c = integral ? static_cast<double>(rng.uniform_int(4)) : rng.uniform(0.0, 10.0);
            }
        }
        const BruteResult want = brute_force(cost);
        const Assignment got = hungarian(cost);
        CHECK(got.total == doctest::Approx(want.total).epsilon(1e-9));

        // lexicographically smallest optimum
        std::vector<int> got_cols(static_cast<std::size_t>(rows), -1);
        for (const auto& [r, c] : got.pairs) got_cols[static_cast<std::size_t>(r)] = c;
        CHECK(got_cols == want.best_cols);
    }
}

TEST_CASE("f_score forms") {
    CHECK(f_score(0.5, 0.5) == doctest::Approx(0.5));
    CHECK(f_score(1.0, 0.0) == 0.0);
    CHECK(f_score(0.0, 0.0) == 0.0);
    CHECK(std::abs(f_score(0.9695, 0.9459) - 0.9575) < 1e-4);
}

TEST_CASE("match_detections") {
    PointSet gt;
    gt.points = {{2.0, 2.0}, {10.0, 10.0}, {20.0, 5.0}};

    SUBCASE("identical sets are perfect") {
        const MatchResult r = match_detections(gt, gt, 5.0);
        CHECK(r.tp == 3);
        CHECK(r.fp == 0);
        CHECK(r.fn == 0);
        CHECK(r.precision == 1.0);
        CHECK(r.recall == 1.0);
        CHECK(r.f_score == 1.0);
    }

    SUBCASE("one far spurious prediction") {
        PointSet pred = gt;
        pred.points.push_back({40.0, 40.0});
        const MatchResult r = match_detections(pred, gt, 5.0);
        CHECK(r.tp == 3);
        CHECK(r.fp == 1);
        CHECK(r.fn == 0);
        CHECK(r.precision == doctest::Approx(0.75));
        CHECK(r.recall == doctest::Approx(1.0));
    }

    SUBCASE("conventions at the empty edges") {
        const PointSet none;
        const MatchResult both = match_detections(none, none, 5.0);
        CHECK(both.precision == 1.0);
        CHECK(both.recall == 1.0);
        CHECK(both.f_score == 1.0);

        const MatchResult no_gt = match_detections(gt, none, 5.0);
        CHECK(no_gt.precision == 0.0);

        const MatchResult no_pred = match_detections(none, gt, 5.0);
        CHECK(no_pred.precision == 0.0);
        CHECK(no_pred.recall == 0.0);
    }

    SUBCASE("swap symmetry exchanges precision and recall") {
        Rng rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            PointSet a, b;
            const int na = static_cast<int>(rng.uniform_int(6));
            const int nb = static_cast<int>(rng.uniform_int(6));
            for (int i = 0; i < na; ++i) a.points.emplace_back(rng.uniform(0, 20), rng.uniform(0, 20));
            for (int i = 0; i < nb; ++i) b.points.emplace_back(rng.uniform(0, 20), rng.uniform(0, 20));
            const MatchResult ab = match_detections(a, b, 4.0);
            const MatchResult ba = match_detections(b, a, 4.0);
            CHECK(ab.tp == ba.tp);
            CHECK(ab.precision == ba.recall);
            CHECK(ab.recall == ba.precision);
            CHECK(ab.f_score == doctest::Approx(ba.f_score).epsilon(1e-12));
        }
    }

    SUBCASE("greedy nearest matching agrees on a constructed case") {
        // two predictions competing for one target: optimal transport pairs
        // each with its own nearest
        PointSet pred, target;
        pred.points = {{0.0, 0.0}, {0.0, 3.0}};
        target.points = {{0.0, 1.0}, {0.0, 4.0}};
        const MatchResult r = match_detections(pred, target, 5.0);
        CHECK(r.tp == 2);
        REQUIRE(r.pairs.size() == 2);
        CHECK(std::get<0>(r.pairs[0]) == 0);
        CHECK(std::get<1>(r.pairs[0]) == 0);
        CHECK(std::get<2>(r.pairs[0]) == doctest::Approx(1.0));
    }
}

TEST_CASE("points csv round-trip and error reporting") {
    const fs::path dir = fs::temp_directory_path() / "nslnet_test_points";
    fs::create_directories(dir);

    std::map<i64, PointSet> pts;
    pts[0].points = {{1.5, 2.5}, {3.0, 4.0}};
    pts[7].points = {{10.0, 11.25}};
    write_points_csv(pts, dir / "p.csv");
    const auto back = read_points_csv(dir / "p.csv");
    REQUIRE(back.size() == 2);
    CHECK(back.at(0).points == pts.at(0).points);
    CHECK(back.at(7).points == pts.at(7).points);

    {
        std::ofstream os(dir / "bad.csv");
        os << "image_id,row,col\n0,1.0,2.0\nnot-a-line\n";
    }
    try {
        read_points_csv(dir / "bad.csv");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("aggregate matching over keyed images") {
    std::map<i64, PointSet> pred, gt;
    gt[0].points = {{1.0, 1.0}, {5.0, 5.0}};
    gt[1].points = {{2.0, 2.0}};
    pred[0].points = {{1.2, 1.1}};
    pred[2].points = {{9.0, 9.0}};  // image without ground truth: pure false positive
    const MatchResult r = match_point_maps(pred, gt, 2.0);
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
    CHECK(r.fn == 2);
    CHECK(r.precision == doctest::Approx(0.5));
    CHECK(r.recall == doctest::Approx(1.0 / 3.0));
}
