#pragma once

#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "nslnet/generators.hpp"
#include "nslnet/nsl_layer.hpp"
#include "nslnet/tensor.hpp"

namespace nsl {

// Monte-Carlo estimates of centered-feature inner products and normalized
// similarities over two-region images, stratified by whether the neighbor of
// a foreground center pixel lies in the same region, next to the closed-form
// expectations P_b^2 ||mu_f - mu_b||^2 (same) and -P_f P_b ||mu_f - mu_b||^2
// (cross).
struct InvarianceReport {
    double mean_sim_same = 0, mean_sim_cross = 0;
    double mean_num_same = 0, mean_num_cross = 0;
    double pred_num_same = 0, pred_num_cross = 0;
    i64 pairs_same = 0, pairs_cross = 0;
    i64 sample_count = 0;  // images drawn
};

using FeatureMapFn = std::function<Tensor4d(const Tensor4d&)>;

// feature_fn maps one (1, C, H, W) image to a feature map; identity when
// empty. Draws images until both strata hold at least min_pairs pairs.
InvarianceReport invariance_report(const TwoRegionSpec& spec, const NslConfig& cfg,
                                   const FeatureMapFn& feature_fn, i64 min_pairs, std::uint64_t seed);

// Per-channel stats stratified by foreground/background.
struct ChannelSummary {
    double mean_fg = 0, std_fg = 0, q25_fg = 0, q50_fg = 0, q75_fg = 0;
    double mean_bg = 0, std_bg = 0, q25_bg = 0, q50_bg = 0, q75_bg = 0;
};

template <typename T>
std::vector<ChannelSummary> feature_stats(const Tensor4<T>& maps, const MaskStack& mask);

// Mean over channels and strata of the standard deviation, across variants,
// of the per-channel mean statistic. Smaller = more stable across variants.
double cross_variant_dispersion(const std::vector<std::vector<ChannelSummary>>& per_variant);

std::string channel_stats_csv(const std::vector<ChannelSummary>& stats);

// Strict 8-neighborhood maxima of a single-channel density, >= min_value,
// greedily thinned so no two kept maxima lie within min_separation
// (higher value wins; ties resolve row-major).
std::vector<PointSet> local_maxima(const Tensor4f& density, double min_value, double min_separation);

struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (row, col)
    double total = 0;
};

// Minimum-cost one-to-one assignment of min(rows, cols) pairs.
// Among minimizers, the lexicographically smallest assignment (by column
// index per ascending row) is returned for sizes up to 32; larger problems
// return a deterministic optimal assignment.
Assignment hungarian(const std::vector<std::vector<double>>& cost);

struct MatchResult {
    std::vector<std::tuple<int, int, double>> pairs;  // (pred, gt, distance)
    i64 tp = 0, fp = 0, fn = 0;
    double precision = 0, recall = 0, f_score = 0;
};

// 2pr / (p + r); 0 when both are 0.
double f_score(double precision, double recall);

// Optimal assignment on Euclidean distances with pairs beyond max_dist
// forbidden. Empty vs empty scores 1 across the board.
MatchResult match_detections(const PointSet& pred, const PointSet& gt, double max_dist);

// Aggregates matches over a keyed collection of images.
MatchResult match_point_maps(const std::map<i64, PointSet>& pred, const std::map<i64, PointSet>& gt,
                             double max_dist);

// "image_id,row,col" lines.
std::map<i64, PointSet> read_points_csv(const std::filesystem::path& path);
void write_points_csv(const std::map<i64, PointSet>& points, const std::filesystem::path& path);

}  // namespace nsl
