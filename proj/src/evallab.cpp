#include "nslnet/evallab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "nslnet/rng.hpp"

namespace nsl {

namespace {

// Maps an output-grid pixel back to the input grid when a feature function
// changes the spatial extent (proportional center mapping).
i64 map_coord(i64 out_coord, i64 out_extent, i64 in_extent) {
    if (out_extent == in_extent) return out_coord;
    const double f = (static_cast<double>(out_coord) + 0.5) * static_cast<double>(in_extent) /
                         static_cast<double>(out_extent) -
                     0.5;
    return std::clamp<i64>(static_cast<i64>(std::llround(f)), 0, in_extent - 1);
}

}  // namespace

InvarianceReport invariance_report(const TwoRegionSpec& spec, const NslConfig& cfg,
                                   const FeatureMapFn& feature_fn, i64 min_pairs, std::uint64_t seed) {
    spec.validate();
    if (min_pairs < 1) throw ParamError("invariance_report: min_pairs must be >= 1");

    double u2 = 0;
    for (std::size_t c = 0; c < spec.mu_f.size(); ++c) {
        const double d = spec.mu_f[c] - spec.mu_b[c];
        u2 += d * d;
    }
    const double pb = 1.0 - spec.p_f;

    InvarianceReport rep;
    rep.pred_num_same = pb * pb * u2;
    rep.pred_num_cross = -spec.p_f * pb * u2;

    double sum_sim_same = 0, sum_sim_cross = 0, sum_num_same = 0, sum_num_cross = 0;
    const Rng root(seed);
    std::uint64_t round = 0;

    while (rep.pairs_same < min_pairs || rep.pairs_cross < min_pairs) {
        constexpr i64 kBatch = 8;
        TwoRegionBatch batch = gen_two_region(spec, kBatch, root.split(round++).next_u64());
        for (i64 n = 0; n < kBatch; ++n) {
            Tensor4d img(Shape4{1, spec.channels(), spec.height, spec.width});
            std::copy_n(batch.images.data() + n * img.size(), img.size(), img.data());
            const Tensor4d feat = feature_fn ? feature_fn(img) : img;
            const Shape4 fs = feat.shape();

            // Center and take per-pixel norms once per image.
            const std::vector<double> mean = spatial_channel_mean(feat, 0);
            const i64 hw = fs.pixels();
            std::vector<double> centered(static_cast<std::size_t>(hw * fs.channels));
            std::vector<double> norms(static_cast<std::size_t>(hw), 0.0);
            for (i64 p = 0; p < hw; ++p) {
                double acc = 0;
                for (i64 c = 0; c < fs.channels; ++c) {
                    const double v = feat[c * hw + p] - mean[static_cast<std::size_t>(c)];
                    centered[static_cast<std::size_t>(p * fs.channels + c)] = v;
                    acc += v * v;
                }
                norms[static_cast<std::size_t>(p)] = std::sqrt(acc);
            }

            auto is_fg = [&](i64 y, i64 x) {
                return batch.masks.at(n, map_coord(y, fs.height, spec.height), map_coord(x, fs.width, spec.width));
            };

            for (const auto& [dy, dx] : cfg.neighborhood.offsets) {
                for (i64 y = 0; y < fs.height; ++y) {
                    const i64 ny = y + dy;
                    if (ny < 0 || ny >= fs.height) continue;
                    for (i64 x = 0; x < fs.width; ++x) {
                        const i64 nx = x + dx;
                        if (nx < 0 || nx >= fs.width) continue;
                        if (!is_fg(y, x)) continue;  // center pixel drawn from the foreground

                        const i64 pc = y * fs.width + x;
                        const i64 pn = ny * fs.width + nx;
                        double dot = 0;
                        for (i64 c = 0; c < fs.channels; ++c) {
                            dot += centered[static_cast<std::size_t>(pn * fs.channels + c)] *
                                   centered[static_cast<std::size_t>(pc * fs.channels + c)];
                        }
                        const double nc = norms[static_cast<std::size_t>(pc)];
                        const double nn = norms[static_cast<std::size_t>(pn)];
                        const double sim = (nc < cfg.epsilon || nn < cfg.epsilon) ? 0.0 : dot / (nc * nn);

                        if (is_fg(ny, nx)) {
                            sum_num_same += dot;
                            sum_sim_same += sim;
                            ++rep.pairs_same;
                        } else {
                            sum_num_cross += dot;
                            sum_sim_cross += sim;
                            ++rep.pairs_cross;
                        }
                    }
                }
            }
            ++rep.sample_count;
            if (rep.pairs_same >= min_pairs && rep.pairs_cross >= min_pairs) break;
        }
    }

    rep.mean_num_same = sum_num_same / static_cast<double>(rep.pairs_same);
    rep.mean_num_cross = sum_num_cross / static_cast<double>(rep.pairs_cross);
    rep.mean_sim_same = sum_sim_same / static_cast<double>(rep.pairs_same);
    rep.mean_sim_cross = sum_sim_cross / static_cast<double>(rep.pairs_cross);
    return rep;
}

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
    if (v.empty()) return 0;
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

struct Moments {
    double mean = 0, stddev = 0;
};

Moments moments(const std::vector<double>& v) {
    if (v.empty()) return {};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

template <typename T>
std::vector<ChannelSummary> feature_stats(const Tensor4<T>& maps, const MaskStack& mask) {
    const Shape4& s = maps.shape();
    if (mask.count != s.batch || mask.height != s.height || mask.width != s.width) {
        throw ShapeError("feature_stats: mask dims do not match maps");
    }
    std::vector<ChannelSummary> out(static_cast<std::size_t>(s.channels));
    std::vector<double> fg, bg;
    for (i64 c = 0; c < s.channels; ++c) {
        fg.clear();
        bg.clear();
        for (i64 n = 0; n < s.batch; ++n) {
            for (i64 y = 0; y < s.height; ++y) {
                for (i64 x = 0; x < s.width; ++x) {
                    const double v = static_cast<double>(maps(n, c, y, x));
                    (mask.at(n, y, x) ? fg : bg).push_back(v);
                }
            }
        }
        std::sort(fg.begin(), fg.end());
        std::sort(bg.begin(), bg.end());
        const Moments mf = moments(fg);
        const Moments mb = moments(bg);
        ChannelSummary& cs = out[static_cast<std::size_t>(c)];
        cs.mean_fg = mf.mean;
        cs.std_fg = mf.stddev;
        cs.q25_fg = quantile_sorted(fg, 0.25);
        cs.q50_fg = quantile_sorted(fg, 0.50);
        cs.q75_fg = quantile_sorted(fg, 0.75);
        cs.mean_bg = mb.mean;
        cs.std_bg = mb.stddev;
        cs.q25_bg = quantile_sorted(bg, 0.25);
        cs.q50_bg = quantile_sorted(bg, 0.50);
        cs.q75_bg = quantile_sorted(bg, 0.75);
    }
    return out;
}

template std::vector<ChannelSummary> feature_stats(const Tensor4<float>&, const MaskStack&);
template std::vector<ChannelSummary> feature_stats(const Tensor4<double>&, const MaskStack&);

double cross_variant_dispersion(const std::vector<std::vector<ChannelSummary>>& per_variant) {
    if (per_variant.empty()) throw ParamError("cross_variant_dispersion: no variants");
    const std::size_t channels = per_variant.front().size();
    for (const auto& v : per_variant) {
        if (v.size() != channels) throw ShapeError("cross_variant_dispersion: channel counts differ");
    }
    double acc = 0;
    i64 terms = 0;
    std::vector<double> vals(per_variant.size());
    for (std::size_t c = 0; c < channels; ++c) {
        for (int stat_idx = 0; stat_idx < 2; ++stat_idx) {
            for (std::size_t v = 0; v < per_variant.size(); ++v) {
                vals[v] = stat_idx == 0 ? per_variant[v][c].mean_fg : per_variant[v][c].mean_bg;
            }
            acc += moments(vals).stddev;
            ++terms;
        }
    }
    return acc / static_cast<double>(terms);
}

std::string channel_stats_csv(const std::vector<ChannelSummary>& stats) {
    std::ostringstream os;
    os << "channel,mean_fg,std_fg,q25_fg,q50_fg,q75_fg,mean_bg,std_bg,q25_bg,q50_bg,q75_bg\n";
    for (std::size_t c = 0; c < stats.size(); ++c) {
        const ChannelSummary& s = stats[c];
        os << c << ',' << s.mean_fg << ',' << s.std_fg << ',' << s.q25_fg << ',' << s.q50_fg << ',' << s.q75_fg
           << ',' << s.mean_bg << ',' << s.std_bg << ',' << s.q25_bg << ',' << s.q50_bg << ',' << s.q75_bg
           << '\n';
    }
    return os.str();
}

std::vector<PointSet> local_maxima(const Tensor4f& density, double min_value, double min_separation) {
    const Shape4& s = density.shape();
    if (s.channels != 1) throw ShapeError("local_maxima: expected single-channel density");

    std::vector<PointSet> out(static_cast<std::size_t>(s.batch));
    struct Cand {
        float value;
        i64 y, x;
    };
    std::vector<Cand> cands;
    for (i64 n = 0; n < s.batch; ++n) {
        cands.clear();
        for (i64 y = 0; y < s.height; ++y) {
            for (i64 x = 0; x < s.width; ++x) {
                const float v = density(n, 0, y, x);
                if (v < min_value) continue;
                bool strict = true;
                for (i64 dy = -1; dy <= 1 && strict; ++dy) {
                    for (i64 dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const i64 yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= s.height || xx < 0 || xx >= s.width) continue;
                        if (density(n, 0, yy, xx) >= v) {
                            strict = false;
                            break;
                        }
                    }
                }
                if (strict) cands.push_back({v, y, x});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.value != b.value) return a.value > b.value;
            if (a.y != b.y) return a.y < b.y;
            return a.x < b.x;
        });
        const double sep2 = min_separation * min_separation;
        for (const Cand& c : cands) {
            bool keep = true;
            for (const auto& [ky, kx] : out[static_cast<std::size_t>(n)].points) {
                const double dy = ky - static_cast<double>(c.y);
                const double dx = kx - static_cast<double>(c.x);
                if (dy * dy + dx * dx < sep2) {
                    keep = false;
                    break;
                }
            }
            if (keep) {
                out[static_cast<std::size_t>(n)].points.emplace_back(static_cast<double>(c.y),
                                                                     static_cast<double>(c.x));
            }
        }
    }
    return out;
}

namespace {

// Shortest-augmenting-path assignment, rows <= cols. p[j] = 1-based row
// matched to column j.
std::vector<int> solve_rect(const std::vector<std::vector<double>>& a, int n, int m) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0), v(static_cast<std::size_t>(m) + 1, 0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = kInf;
            int j1 = -1;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = a[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                                   u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    return p;
}

Assignment solve_oriented(const std::vector<std::vector<double>>& cost, int rows, int cols) {
    Assignment out;
    if (rows == 0 || cols == 0) return out;

    const bool transpose = rows > cols;
    std::vector<std::vector<double>> a;
    int n = rows, m = cols;
    if (transpose) {
        n = cols;
        m = rows;
        a.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(m)));
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) a[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    } else {
        a = cost;
    }

    const std::vector<int> p = solve_rect(a, n, m);
    for (int j = 1; j <= m; ++j) {
        const int i = p[static_cast<std::size_t>(j)];
        if (i == 0) continue;
        const int r = transpose ? j - 1 : i - 1;
        const int c = transpose ? i - 1 : j - 1;
        out.pairs.emplace_back(r, c);
        out.total += cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    return out;
}

// Recomputes the optimum over the unfixed rows/cols; used by the
// lexicographic refinement below.
double optimal_subtotal(const std::vector<std::vector<double>>& cost, const std::vector<int>& rows,
                        const std::vector<int>& cols) {
    if (rows.empty() || cols.empty()) return 0;
    std::vector<std::vector<double>> sub(rows.size(), std::vector<double>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j)
            sub[i][j] = cost[static_cast<std::size_t>(rows[i])][static_cast<std::size_t>(cols[j])];
    return solve_oriented(sub, static_cast<int>(rows.size()), static_cast<int>(cols.size())).total;
}

}  // namespace

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
    const int rows = static_cast<int>(cost.size());
    const int cols = rows > 0 ? static_cast<int>(cost.front().size()) : 0;
    for (const auto& row : cost) {
        if (static_cast<int>(row.size()) != cols) throw ShapeError("hungarian: ragged cost matrix");
        for (double c : row) {
            if (!std::isfinite(c)) throw DataError("hungarian: costs must be finite");
        }
    }
    if (rows == 0 || cols == 0) return {};

    Assignment base = solve_oriented(cost, rows, cols);
    if (std::min(rows, cols) > 32) return base;

    // Fix rows in ascending order to the smallest column that still permits
    // an optimal completion.
    const double tol = 1e-9 * std::max(1.0, std::abs(base.total));
    std::vector<int> free_cols(static_cast<std::size_t>(cols));
    std::iota(free_cols.begin(), free_cols.end(), 0);
    std::vector<int> remaining_rows(static_cast<std::size_t>(rows));
    std::iota(remaining_rows.begin(), remaining_rows.end(), 0);

    Assignment refined;
    double fixed_cost = 0;
    int assigned = 0;
    const int want = std::min(rows, cols);
    for (int i = 0; i < rows && assigned < want; ++i) {
        remaining_rows.erase(remaining_rows.begin());
        bool fixed = false;
        for (std::size_t jj = 0; jj < free_cols.size(); ++jj) {
            const int j = free_cols[jj];
            std::vector<int> rest_cols = free_cols;
            rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(jj));
            const double t = fixed_cost + cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +
                             optimal_subtotal(cost, remaining_rows, rest_cols);
            if (t <= base.total + tol) {
                refined.pairs.emplace_back(i, j);
                fixed_cost += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                free_cols = std::move(rest_cols);
                ++assigned;
                fixed = true;
                break;
            }
        }
        if (!fixed) {
            // Row skipped: some optimal assignment leaves it unmatched.
            const double t = fixed_cost + optimal_subtotal(cost, remaining_rows, free_cols);
            if (t > base.total + tol) return base;  // numerical fallback
        }
    }
    refined.total = fixed_cost;
    return refined;
}

double f_score(double precision, double recall) {
    if (precision + recall <= 0) return 0;
    return 2.0 * precision * recall / (precision + recall);
}

MatchResult match_detections(const PointSet& pred, const PointSet& gt, double max_dist) {
    if (!(max_dist > 0)) throw ParamError("match_detections: max_dist must be > 0");
    MatchResult r;
    const i64 np = static_cast<i64>(pred.points.size());
    const i64 ng = static_cast<i64>(gt.points.size());
    if (np == 0 && ng == 0) {
        r.precision = r.recall = r.f_score = 1.0;
        return r;
    }

    if (np > 0 && ng > 0) {
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(np),
                                              std::vector<double>(static_cast<std::size_t>(ng)));
        double max_finite = 0;
        for (i64 i = 0; i < np; ++i) {
            for (i64 j = 0; j < ng; ++j) {
                const double dy = pred.points[static_cast<std::size_t>(i)].first - gt.points[static_cast<std::size_t>(j)].first;
                const double dx = pred.points[static_cast<std::size_t>(i)].second - gt.points[static_cast<std::size_t>(j)].second;
                const double d = std::sqrt(dy * dy + dx * dx);
                cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = d;
                if (d <= max_dist) max_finite = std::max(max_finite, d);
            }
        }
        // Forbidden pairs carry a large finite sentinel; sentinel matches are
        // pruned afterwards.
        const double sentinel = 1e6 * std::max(max_finite, max_dist);
        auto masked = cost;
        for (auto& row : masked) {
            for (double& c : row) {
                if (c > max_dist) c = sentinel;
            }
        }
        const Assignment a = hungarian(masked);
        for (const auto& [i, j] : a.pairs) {
            const double d = cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (d <= max_dist) r.pairs.emplace_back(i, j, d);
        }
    }

    r.tp = static_cast<i64>(r.pairs.size());
    r.fp = np - r.tp;
    r.fn = ng - r.tp;
    r.precision = np > 0 ? static_cast<double>(r.tp) / static_cast<double>(np) : 0.0;
    r.recall = ng > 0 ? static_cast<double>(r.tp) / static_cast<double>(ng) : 0.0;
    r.f_score = f_score(r.precision, r.recall);
    return r;
}

MatchResult match_point_maps(const std::map<i64, PointSet>& pred, const std::map<i64, PointSet>& gt,
                             double max_dist) {
    MatchResult total;
    std::vector<i64> ids;
    for (const auto& [id, _] : pred) ids.push_back(id);
    for (const auto& [id, _] : gt) {
        if (!pred.count(id)) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());

    i64 np = 0, ng = 0;
    static const PointSet kEmpty;
    for (i64 id : ids) {
        const PointSet& p = pred.count(id) ? pred.at(id) : kEmpty;
        const PointSet& g = gt.count(id) ? gt.at(id) : kEmpty;
        const MatchResult r = match_detections(p, g, max_dist);
        total.tp += r.tp;
        total.fp += r.fp;
        total.fn += r.fn;
        np += static_cast<i64>(p.points.size());
        ng += static_cast<i64>(g.points.size());
    }
    if (np == 0 && ng == 0) {
        total.precision = total.recall = total.f_score = 1.0;
        return total;
    }
    total.precision = np > 0 ? static_cast<double>(total.tp) / static_cast<double>(np) : 0.0;
    total.recall = ng > 0 ? static_cast<double>(total.tp) / static_cast<double>(ng) : 0.0;
    total.f_score = f_score(total.precision, total.recall);
    return total;
}

std::map<i64, PointSet> read_points_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("read_points_csv: cannot open '" + path.string() + "'");
    std::map<i64, PointSet> out;
    std::string line;
    i64 line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("image_id", 0) == 0) continue;  // optional header
        std::istringstream ls(line);
        std::string a, b, c;
        if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
            throw FormatError("points csv: malformed line " + std::to_string(line_no) + " in '" +
                              path.string() + "'");
        }
        try {
            const i64 id = std::stoll(a);
            out[id].points.emplace_back(std::stod(b), std::stod(c));
        } catch (const std::exception&) {
            throw FormatError("points csv: malformed line " + std::to_string(line_no) + " in '" +
                              path.string() + "'");
        }
    }
    return out;
}

void write_points_csv(const std::map<i64, PointSet>& points, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("write_points_csv: cannot open '" + path.string() + "'");
    os << "image_id,row,col\n";
    for (const auto& [id, ps] : points) {
        for (const auto& [row, col] : ps.points) os << id << ',' << row << ',' << col << '\n';
    }
    if (!os) throw IoError("write_points_csv: write failed");
}

}  // namespace nsl
