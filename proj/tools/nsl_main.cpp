// Command-line front end: dataset generation, training, evaluation,
// gradient checks, invariance reports, kernel benchmarks, detection scoring.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nslnet/evallab.hpp"
#include "nslnet/generators.hpp"
#include "nslnet/gradcheck.hpp"
#include "nslnet/graph.hpp"
#include "nslnet/idx.hpp"
#include "nslnet/runmeta.hpp"
#include "nslnet/threads.hpp"

namespace fs = std::filesystem;
using namespace nsl;

namespace {

std::vector<double> parse_channel_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

std::string join_doubles(const std::vector<double>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

i64 first_layer_of_kind(const LayerGraph<float>& g, LayerKind kind) {
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        if (g.layers[i].kind == kind) return static_cast<i64>(i);
    }
    return -1;
}

MaskStack scale_mask(const MaskStack& in, i64 height, i64 width) {
    MaskStack out;
    out.count = in.count;
    out.height = height;
    out.width = width;
    out.fg.assign(static_cast<std::size_t>(in.count * height * width), 0);
    auto src_coord = [](i64 o, i64 out_extent, i64 in_extent) {
        const double f = (static_cast<double>(o) + 0.5) * static_cast<double>(in_extent) /
                             static_cast<double>(out_extent) -
                         0.5;
        return std::clamp<i64>(static_cast<i64>(std::llround(f)), 0, in_extent - 1);
    };
    for (i64 n = 0; n < in.count; ++n) {
        for (i64 y = 0; y < height; ++y) {
            const i64 sy = src_coord(y, height, in.height);
            for (i64 x = 0; x < width; ++x) {
                out.set(n, y, x, in.at(n, sy, src_coord(x, width, in.width)));
            }
        }
    }
    return out;
}

// ----------------------------------------------------------------- gen ----

struct GenArgs {
    std::string variant;
    std::string src_images, src_labels;
    std::string out_images, out_labels;
    std::string backgrounds;
    std::uint64_t seed = 1;
    double tau = 0.5;
    int stride = 3;
    double density = 0.02;
    double mean = 0.5, sigma_fg = 0.25, sigma_bg = 0.05;
    std::string mu_f = "1.0", mu_b = "0.0";
    double sigma_f = 0.0, sigma_b = 0.0, p_f = 0.8;
    i64 size = 64, count = 100;
};

int run_gen(const GenArgs& a) {
    LabeledImages out;
    std::map<std::string, std::string> manifest;
    manifest["command"] = "gen";
    manifest["variant"] = a.variant;
    manifest["seed"] = std::to_string(a.seed);

    if (a.variant == "two-region") {
        TwoRegionSpec spec;
        spec.mu_f = parse_channel_list(a.mu_f);
        spec.mu_b = parse_channel_list(a.mu_b);
        spec.sigma_f = a.sigma_f;
        spec.sigma_b = a.sigma_b;
        spec.p_f = a.p_f;
        spec.height = spec.width = a.size;
        if (spec.channels() != 1) {
            throw ParamError("gen two-region: the IDX container is single-channel; give scalar means");
        }
        const TwoRegionBatch batch = gen_two_region(spec, a.count, a.seed);
        out.images = Tensor4f(Shape4{a.count, 1, a.size, a.size});
        for (i64 i = 0; i < out.images.size(); ++i) {
            out.images[i] = static_cast<float>(std::clamp(batch.images[i], 0.0, 255.0 / 256.0));
        }
        out.labels.assign(static_cast<std::size_t>(a.count), 0);
        manifest["mu_f"] = a.mu_f;
        manifest["mu_b"] = a.mu_b;
        manifest["sigma_f"] = std::to_string(a.sigma_f);
        manifest["sigma_b"] = std::to_string(a.sigma_b);
        manifest["p_f"] = std::to_string(a.p_f);
        manifest["size"] = std::to_string(a.size);
    } else {
        if (a.src_images.empty() || a.src_labels.empty()) {
            throw ParamError("gen " + a.variant + ": --src-images and --src-labels are required");
        }
        const LabeledImages src = read_idx(a.src_images, a.src_labels);
        manifest["src_images_hash"] = file_hash_hex(a.src_images);
        manifest["src_labels_hash"] = file_hash_hex(a.src_labels);
        if (a.variant == "p") {
            out = gen_mnist_p(src, a.seed);
        } else if (a.variant == "s") {
            out = gen_mnist_s(src, a.seed, a.stride, a.density);
            manifest["stride"] = std::to_string(a.stride);
            manifest["density"] = std::to_string(a.density);
        } else if (a.variant == "v") {
            out = gen_mnist_v(src, a.seed, a.mean, a.sigma_fg, a.sigma_bg);
            manifest["mean"] = std::to_string(a.mean);
            manifest["sigma_fg"] = std::to_string(a.sigma_fg);
            manifest["sigma_bg"] = std::to_string(a.sigma_bg);
        } else if (a.variant == "m") {
            if (a.backgrounds.empty()) throw ParamError("gen m: backgrounds required (--backgrounds DIR)");
            out = gen_mnist_m(src, a.backgrounds, a.seed);
            manifest["backgrounds"] = a.backgrounds;
        } else {
            throw ParamError("gen: unknown variant '" + a.variant + "'");
        }
    }

    write_idx(out, a.out_images, a.out_labels);
    manifest["out_images_hash"] = file_hash_hex(a.out_images);
    manifest["out_labels_hash"] = file_hash_hex(a.out_labels);
    manifest["count"] = std::to_string(out.count());
    write_manifest(a.out_images + ".manifest", manifest);
    std::cout << "wrote " << out.count() << " images to " << a.out_images << "\n";
    return 0;
}

// --------------------------------------------------------------- train ----

struct TrainArgs {
    std::string train_images, train_labels;
    std::string test_images, test_labels;
    std::string out = "digit_net.ckpt";
    std::string log;
    bool nsl = true;
    bool nin = false;
    i64 subset = 0;
    int repeat = 1;
    TrainConfig cfg;
};

void apply_train_config(TrainArgs& a, const fs::path& path) {
    const auto kv = read_kv_file(path);
    check_known_keys(kv, {"train_images", "train_labels", "test_images", "test_labels", "out", "log", "nsl",
                          "nin", "subset", "repeat", "epochs", "batch", "lr0", "decay_start", "gamma", "seed",
                          "threads"});
    auto get = [&](const char* k) { return kv.count(k) ? std::optional<std::string>(kv.at(k)) : std::nullopt; };
    if (auto v = get("train_images")) a.train_images = *v;
    if (auto v = get("train_labels")) a.train_labels = *v;
    if (auto v = get("test_images")) a.test_images = *v;
    if (auto v = get("test_labels")) a.test_labels = *v;
    if (auto v = get("out")) a.out = *v;
    if (auto v = get("log")) a.log = *v;
    if (auto v = get("nsl")) a.nsl = *v == "1" || *v == "true";
    if (auto v = get("nin")) a.nin = *v == "1" || *v == "true";
    if (auto v = get("subset")) a.subset = std::stoll(*v);
    if (auto v = get("repeat")) a.repeat = std::stoi(*v);
    if (auto v = get("epochs")) a.cfg.epochs = std::stoi(*v);
    if (auto v = get("batch")) a.cfg.batch_size = std::stoll(*v);
    if (auto v = get("lr0")) a.cfg.lr0 = std::stod(*v);
    if (auto v = get("decay_start")) a.cfg.decay_start = std::stoi(*v);
    if (auto v = get("gamma")) a.cfg.decay_gamma = std::stod(*v);
    if (auto v = get("seed")) a.cfg.seed = std::stoull(*v);
    if (auto v = get("threads")) set_num_threads(std::stoi(*v));
}

int run_train(const TrainArgs& a) {
    if (a.train_images.empty() || a.train_labels.empty()) {
        throw ParamError("train: --train-images and --train-labels are required");
    }
    LabeledImages train = read_idx(a.train_images, a.train_labels);
    if (a.subset > 0 && a.subset < train.count()) train = subset(train, a.subset);

    LabeledImages test;
    const bool have_test = !a.test_images.empty();
    if (have_test) test = read_idx(a.test_images, a.test_labels);

    const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
    std::ofstream log(log_path);
    if (!log) throw IoError("train: cannot open log '" + log_path + "'");
    log << "run,epoch,loss,train_accuracy,lr\n";

    std::vector<double> test_accs;
    for (int run = 0; run < a.repeat; ++run) {
        TrainConfig cfg = a.cfg;
        cfg.seed = a.cfg.seed + 1000ULL * static_cast<std::uint64_t>(run);
        auto net = build_digit_net<float>(a.nsl, a.nin);
        init_params(net, cfg.seed);

        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            const EpochStats st = train_epoch<float>(net, train.images, train.labels, cfg, epoch);
            const double lr = learning_rate(cfg, epoch);
            std::printf("run %d epoch %d loss %.6f train_acc %.4f lr %g\n", run, epoch, st.loss, st.accuracy,
                        lr);
            std::fflush(stdout);
            log << run << ',' << epoch << ',' << std::setprecision(17) << st.loss << ',' << st.accuracy << ','
                << lr << '\n';
        }
        if (run == 0) save_checkpoint(net, a.out);
        if (have_test) {
            const double acc = evaluate_accuracy<float>(net, test.images, test.labels);
            test_accs.push_back(acc);
            std::printf("run %d test_accuracy %.4f\n", run, acc);
        }
    }
    log.close();

    if (!test_accs.empty()) {
        double mean = 0;
        for (double acc : test_accs) mean += acc;
        mean /= static_cast<double>(test_accs.size());
        double var = 0;
        for (double acc : test_accs) var += (acc - mean) * (acc - mean);
        const double stddev =
            test_accs.size() > 1 ? std::sqrt(var / static_cast<double>(test_accs.size() - 1)) : 0.0;
        std::printf("test accuracy over %zu runs: %.4f +- %.4f\n", test_accs.size(), mean, stddev);
    }

    std::map<std::string, std::string> manifest;
    manifest["command"] = "train";
    manifest["nsl"] = a.nsl ? "1" : "0";
    manifest["nin"] = a.nin ? "1" : "0";
    manifest["epochs"] = std::to_string(a.cfg.epochs);
    manifest["batch"] = std::to_string(a.cfg.batch_size);
    manifest["lr0"] = std::to_string(a.cfg.lr0);
    manifest["decay_start"] = std::to_string(a.cfg.decay_start);
    manifest["gamma"] = std::to_string(a.cfg.decay_gamma);
    manifest["seed"] = std::to_string(a.cfg.seed);
    manifest["subset"] = std::to_string(a.subset);
    manifest["repeat"] = std::to_string(a.repeat);
    manifest["train_images_hash"] = file_hash_hex(a.train_images);
    manifest["train_labels_hash"] = file_hash_hex(a.train_labels);
    manifest["checkpoint_hash"] = file_hash_hex(a.out);
    write_manifest(a.out + ".manifest", manifest);
    return 0;
}

// ---------------------------------------------------------------- eval ----

int run_eval(const std::string& ckpt, const std::string& images, const std::string& labels,
             const std::string& source, const std::string& target, const std::string& results,
             std::uint64_t seed) {
    const LayerGraph<float> net = load_checkpoint(ckpt);
    const LabeledImages data = read_idx(images, labels);
    const double acc = evaluate_accuracy<float>(net, data.images, data.labels);
    std::printf("accuracy %.4f\n", acc);

    if (!results.empty()) {
        const bool has_nsl = first_layer_of_kind(net, LayerKind::Nsl) >= 0;
        const bool has_nin = first_layer_of_kind(net, LayerKind::Nin) >= 0;
        std::ostringstream key;
        key << source << '|' << target << '|' << (has_nsl ? 1 : 0) << '|' << (has_nin ? 1 : 0) << '|' << seed;
        std::ostringstream row;
        row << key.str() << ',' << source << ',' << target << ',' << (has_nsl ? 1 : 0) << ','
            << (has_nin ? 1 : 0) << ',' << seed << ',' << std::fixed << std::setprecision(4) << acc;
        upsert_csv_row(results, "key,source,target,nsl,nin,seed,accuracy", key.str(), row.str());
    }
    return 0;
}

// ----------------------------------------------------------- gradcheck ----

int run_gradcheck(const std::string& scope, int trials, std::uint64_t seed, double corrupt) {
    std::vector<GradCheckResult> results;
    if (scope == "all") {
        results.push_back(gradcheck_nsl(trials > 0 ? trials : 100, seed, corrupt));
        results.push_back(gradcheck_conv(trials > 0 ? trials : 25, seed, corrupt));
        results.push_back(gradcheck_fc(trials > 0 ? trials : 25, seed, corrupt));
        results.push_back(gradcheck_softmax(trials > 0 ? trials : 25, seed, corrupt));
        results.push_back(gradcheck_full_net(trials > 0 ? std::max(1, trials / 30) : 3, seed, corrupt));
    } else {
        int n = trials;
        if (n <= 0) n = scope == "full-net" ? 3 : scope == "nsl" ? 100 : 25;
        results.push_back(run_gradcheck_scope(scope, n, seed, corrupt));
    }
    bool ok = true;
    for (const auto& r : results) {
        std::printf("scope %-8s trials %-4lld max_rel_err %.3e  %s\n", r.scope.c_str(),
                    static_cast<long long>(r.trials), r.max_rel_err, r.pass ? "[PASS]" : "[FAIL]");
        ok = ok && r.pass;
    }
    return ok ? 0 : 1;
}

// --------------------------------------------------------- invariance ----

int run_invariance(const std::string& mu_f, const std::string& mu_b, double sigma_f, double sigma_b, double p_f,
                   i64 size, int side, i64 pairs, std::uint64_t seed) {
    TwoRegionSpec spec;
    spec.mu_f = parse_channel_list(mu_f);
    spec.mu_b = parse_channel_list(mu_b);
    spec.sigma_f = sigma_f;
    spec.sigma_b = sigma_b;
    spec.p_f = p_f;
    spec.height = spec.width = size;
    NslConfig cfg(square_neighborhood(side), 1e-8);

    const InvarianceReport rep = invariance_report(spec, cfg, nullptr, pairs, seed);
    std::printf("two-region invariance: mu_f=[%s] mu_b=[%s] sigma_f=%g sigma_b=%g p_f=%g\n",
                join_doubles(spec.mu_f).c_str(), join_doubles(spec.mu_b).c_str(), sigma_f, sigma_b, p_f);
    std::printf("%-14s %16s %16s %16s\n", "stratum", "predicted_num", "estimated_num", "mean_similarity");
    std::printf("%-14s %16.6f %16.6f %16.6f\n", "same-region", rep.pred_num_same, rep.mean_num_same,
                rep.mean_sim_same);
    std::printf("%-14s %16.6f %16.6f %16.6f\n", "cross-region", rep.pred_num_cross, rep.mean_num_cross,
                rep.mean_sim_cross);
    std::printf("pairs: same %lld cross %lld, images %lld\n", static_cast<long long>(rep.pairs_same),
                static_cast<long long>(rep.pairs_cross), static_cast<long long>(rep.sample_count));
    return 0;
}

// ---------------------------------------------------------------- bench ----

int run_bench(i64 batch, i64 channels, i64 height, i64 width, int side, int reps, std::uint64_t seed) {
    Rng rng(seed);
    Tensor4f phi(Shape4{batch, channels, height, width});
    for (i64 i = 0; i < phi.size(); ++i) phi[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    const NslConfig cfg(square_neighborhood(side), 1e-6);

    // correctness gate before timing
    const Tensor4f ref = nsl_forward_reference(phi, cfg);
    auto [opt, cache] = nsl_forward(phi, cfg);
    if (!tensor_close(opt, ref, 1e-6, 1e-6)) {
        std::cerr << "bench: optimized kernel disagrees with the reference kernel\n";
        return 1;
    }
    const int threads = num_threads();
    set_num_threads(1);
    auto [opt1, cache1] = nsl_forward(phi, cfg);
    set_num_threads(threads);
    const bool invariant =
        std::memcmp(opt1.data(), opt.data(), sizeof(float) * static_cast<std::size_t>(opt.size())) == 0;

    using clock = std::chrono::steady_clock;
    auto time_ms = [&](auto&& fn) {
        double best = 1e300;
        for (int r = 0; r < reps; ++r) {
            const auto t0 = clock::now();
            fn();
            const auto t1 = clock::now();
            best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        return best;
    };

    const double ref_ms = time_ms([&] { nsl_forward_reference(phi, cfg); });
    const double fwd_ms = time_ms([&] { nsl_forward(phi, cfg); });
    Tensor4f up(opt.shape());
    for (i64 i = 0; i < up.size(); ++i) up[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    const double bwd_ms = time_ms([&] { nsl_backward(up, cache, cfg); });

    const double work = static_cast<double>(batch) * static_cast<double>(cfg.neighborhood.size()) *
                        static_cast<double>(height * width) * static_cast<double>(channels);
    std::printf("shape (%lld,%lld,%lld,%lld), neighborhood %dx%d (m=%lld), threads %d\n",
                static_cast<long long>(batch), static_cast<long long>(channels), static_cast<long long>(height),
                static_cast<long long>(width), side, side, static_cast<long long>(cfg.neighborhood.size()),
                threads);
    std::printf("reference forward: %9.3f ms/iter  %10.1f Mpnc/s\n", ref_ms, work / ref_ms / 1e3);
    std::printf("optimized forward: %9.3f ms/iter  %10.1f Mpnc/s\n", fwd_ms, work / fwd_ms / 1e3);
    std::printf("optimized backward:%9.3f ms/iter\n", bwd_ms);
    std::printf("forward speedup:   %9.2fx\n", ref_ms / fwd_ms);
    std::printf("checksum reference %.6e optimized %.6e\n",
                static_cast<double>(pairwise_sum(ref.data(), ref.size())),
                static_cast<double>(pairwise_sum(opt.data(), opt.size())));
    std::printf("thread-count invariance: %s\n", invariant ? "ok" : "MISMATCH");
    return invariant ? 0 : 1;
}

// ----------------------------------------------------------- detect-eval ----

int run_detect_eval(const std::string& pred, const std::string& gt, double max_dist) {
    const auto pred_pts = read_points_csv(pred);
    const auto gt_pts = read_points_csv(gt);
    const MatchResult r = match_point_maps(pred_pts, gt_pts, max_dist);
    std::printf("%-10s %-10s %-10s %-10s %-6s %-6s %-6s\n", "max_dist", "precision", "recall", "f_score", "tp",
                "fp", "fn");
    std::printf("%-10.2f %-10.2f %-10.2f %-10.2f %-6lld %-6lld %-6lld\n", max_dist, 100.0 * r.precision,
                100.0 * r.recall, 100.0 * r.f_score, static_cast<long long>(r.tp), static_cast<long long>(r.fp),
                static_cast<long long>(r.fn));
    return 0;
}

// ---------------------------------------------------------------- stats ----

int run_stats(const std::string& ckpt, const std::vector<std::string>& images,
              const std::vector<std::string>& labels, double tau, const std::string& out_prefix) {
    if (images.size() != labels.size() || images.empty()) {
        throw ParamError("stats: give matching --images/--labels lists");
    }
    const LayerGraph<float> net = load_checkpoint(ckpt);
    const i64 pool = first_layer_of_kind(net, LayerKind::MaxPool);
    const i64 nsl_layer = first_layer_of_kind(net, LayerKind::Nsl);
    if (pool < 0) throw ParamError("stats: checkpoint has no pooling layer");

    std::vector<std::vector<ChannelSummary>> phi_stats, psi_stats;
    for (std::size_t v = 0; v < images.size(); ++v) {
        const LabeledImages data = read_idx(images[v], labels[v]);
        const MaskStack mask = foreground_mask(data.images, tau);

        ForwardTrace<float> trace;
        graph_forward(net, data.images, &trace);
        const Tensor4f& phi = trace.acts[static_cast<std::size_t>(pool)];
        const MaskStack phi_mask = scale_mask(mask, phi.shape().height, phi.shape().width);
        phi_stats.push_back(feature_stats(phi, phi_mask));
        if (!out_prefix.empty()) {
            std::ofstream os(out_prefix + ".phi." + std::to_string(v) + ".csv");
            os << channel_stats_csv(phi_stats.back());
        }
        if (nsl_layer >= 0) {
            const Tensor4f& psi = trace.acts[static_cast<std::size_t>(nsl_layer)];
            const MaskStack psi_mask = scale_mask(mask, psi.shape().height, psi.shape().width);
            psi_stats.push_back(feature_stats(psi, psi_mask));
            if (!out_prefix.empty()) {
                std::ofstream os(out_prefix + ".psi." + std::to_string(v) + ".csv");
                os << channel_stats_csv(psi_stats.back());
            }
        }
        std::printf("dataset %zu: %lld images\n", v, static_cast<long long>(data.count()));
    }

    if (images.size() >= 2) {
        const double dphi = cross_variant_dispersion(phi_stats);
        std::printf("cross-variant dispersion of feature-map stats: %.6f\n", dphi);
        if (!psi_stats.empty()) {
            const double dpsi = cross_variant_dispersion(psi_stats);
            std::printf("cross-variant dispersion of similarity stats: %.6f\n", dpsi);
            std::printf("dispersion ratio (similarity / feature): %.4f\n", dpsi / dphi);
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neighborhood-similarity network toolkit"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = machine parallelism)");

    GenArgs gen;
    auto* cmd_gen = app.add_subcommand("gen", "generate dataset variants as IDX corpora");
    cmd_gen->add_option("--variant", gen.variant, "p, s, v, m or two-region")->required();
    cmd_gen->add_option("--src-images", gen.src_images);
    cmd_gen->add_option("--src-labels", gen.src_labels);
    cmd_gen->add_option("--out-images", gen.out_images)->required();
    cmd_gen->add_option("--out-labels", gen.out_labels)->required();
    cmd_gen->add_option("--backgrounds", gen.backgrounds, "directory of .pgm/.ppm backgrounds (variant m)");
    cmd_gen->add_option("--seed", gen.seed);
    cmd_gen->add_option("--tau", gen.tau, "foreground threshold");
    cmd_gen->add_option("--stride", gen.stride, "glyph lattice stride (variant s)");
    cmd_gen->add_option("--density", gen.density, "distractor density (variant s)");
    cmd_gen->add_option("--mean", gen.mean, "intensity mean (variant v)");
    cmd_gen->add_option("--sigma-fg", gen.sigma_fg, "foreground sigma (variant v)");
    cmd_gen->add_option("--sigma-bg", gen.sigma_bg, "background sigma (variant v)");
    cmd_gen->add_option("--mu-f", gen.mu_f, "foreground mean (two-region)");
    cmd_gen->add_option("--mu-b", gen.mu_b, "background mean (two-region)");
    cmd_gen->add_option("--sigma-f", gen.sigma_f);
    cmd_gen->add_option("--sigma-b", gen.sigma_b);
    cmd_gen->add_option("--p-f", gen.p_f, "foreground fraction (two-region)");
    cmd_gen->add_option("--size", gen.size, "grid extent (two-region)");
    cmd_gen->add_option("--count", gen.count, "image count (two-region)");

    TrainArgs train;
    std::string train_config;
    auto* cmd_train = app.add_subcommand("train", "train the digit network");
    cmd_train->add_option("--config", train_config, "key=value settings file (flags override)");
    cmd_train->add_option("--train-images", train.train_images);
    cmd_train->add_option("--train-labels", train.train_labels);
    cmd_train->add_option("--test-images", train.test_images);
    cmd_train->add_option("--test-labels", train.test_labels);
    cmd_train->add_option("--out", train.out, "checkpoint path");
    cmd_train->add_option("--log", train.log, "per-epoch csv log");
    cmd_train->add_flag("--nsl,!--no-nsl", train.nsl, "include the similarity layer");
    cmd_train->add_flag("--nin", train.nin, "parallel 1x1 stream joined by concat");
    cmd_train->add_option("--subset", train.subset, "train on the first N samples");
    cmd_train->add_option("--repeat", train.repeat, "independent training repetitions");
    cmd_train->add_option("--epochs", train.cfg.epochs);
    cmd_train->add_option("--batch", train.cfg.batch_size);
    cmd_train->add_option("--lr0", train.cfg.lr0);
    cmd_train->add_option("--decay-start", train.cfg.decay_start);
    cmd_train->add_option("--gamma", train.cfg.decay_gamma);
    cmd_train->add_option("--seed", train.cfg.seed);

    std::string eval_ckpt, eval_images, eval_labels, eval_source = "?", eval_target = "?", eval_results;
    std::uint64_t eval_seed = 1;
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    cmd_eval->add_option("--checkpoint", eval_ckpt)->required();
    cmd_eval->add_option("--images", eval_images)->required();
    cmd_eval->add_option("--labels", eval_labels)->required();
    cmd_eval->add_option("--source", eval_source, "tag: training domain");
    cmd_eval->add_option("--target", eval_target, "tag: evaluation domain");
    cmd_eval->add_option("--results", eval_results, "append to this keyed csv");
    cmd_eval->add_option("--seed", eval_seed, "tag: training seed");

    std::string gc_scope = "all";
    int gc_trials = 0;
    std::uint64_t gc_seed = 1;
    double gc_corrupt = 0;
    auto* cmd_gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    cmd_gc->add_option("--scope", gc_scope, "nsl, conv, fc, softmax, full-net or all");
    cmd_gc->add_option("--trials", gc_trials, "random instances (0 = scope default)");
    cmd_gc->add_option("--seed", gc_seed);
    cmd_gc->add_option("--corrupt", gc_corrupt, "perturb analytic gradients (negative control)");

    std::string inv_mu_f = "1.0,0.0,0.0", inv_mu_b = "0.0,1.0,0.0";
    double inv_sigma_f = 0.0, inv_sigma_b = 0.0, inv_p_f = 0.8;
    i64 inv_size = 64, inv_pairs = 100000;
    int inv_side = 3;
    std::uint64_t inv_seed = 1;
    auto* cmd_inv = app.add_subcommand("invariance", "two-region similarity statistics vs closed forms");
    cmd_inv->add_option("--mu-f", inv_mu_f, "comma-separated foreground means");
    cmd_inv->add_option("--mu-b", inv_mu_b, "comma-separated background means");
    cmd_inv->add_option("--sigma-f", inv_sigma_f);
    cmd_inv->add_option("--sigma-b", inv_sigma_b);
    cmd_inv->add_option("--p-f", inv_p_f);
    cmd_inv->add_option("--size", inv_size);
    cmd_inv->add_option("--side", inv_side);
    cmd_inv->add_option("--pairs", inv_pairs, "minimum pairs per stratum");
    cmd_inv->add_option("--seed", inv_seed);

    i64 b_batch = 64, b_ch = 120, b_h = 12, b_w = 12;
    int b_side = 11, b_reps = 3;
    std::uint64_t b_seed = 1;
    auto* cmd_bench = app.add_subcommand("bench", "reference vs optimized kernel throughput");
    cmd_bench->add_option("--batch", b_batch);
    cmd_bench->add_option("--channels", b_ch);
    cmd_bench->add_option("--height", b_h);
    cmd_bench->add_option("--width", b_w);
    cmd_bench->add_option("--side", b_side);
    cmd_bench->add_option("--reps", b_reps);
    cmd_bench->add_option("--seed", b_seed);

    std::string de_pred, de_gt;
    double de_max_dist = 5.0;
    auto* cmd_de = app.add_subcommand("detect-eval", "match predicted points against ground truth");
    cmd_de->add_option("--pred", de_pred)->required();
    cmd_de->add_option("--gt", de_gt)->required();
    cmd_de->add_option("--max-dist", de_max_dist);

    std::string st_ckpt, st_out;
    std::vector<std::string> st_images, st_labels;
    double st_tau = 0.5;
    auto* cmd_stats = app.add_subcommand("stats", "feature/similarity statistics stratified by foreground");
    cmd_stats->add_option("--checkpoint", st_ckpt)->required();
    cmd_stats->add_option("--images", st_images)->required();
    cmd_stats->add_option("--labels", st_labels)->required();
    cmd_stats->add_option("--tau", st_tau);
    cmd_stats->add_option("--out", st_out, "csv path prefix");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) set_num_threads(threads);

    try {
        if (*cmd_gen) return run_gen(gen);
        if (*cmd_train) {
            if (train_config.empty()) return run_train(train);
            TrainArgs merged;
            apply_train_config(merged, train_config);
            if (cmd_train->count("--train-images")) merged.train_images = train.train_images;
            if (cmd_train->count("--train-labels")) merged.train_labels = train.train_labels;
            if (cmd_train->count("--test-images")) merged.test_images = train.test_images;
            if (cmd_train->count("--test-labels")) merged.test_labels = train.test_labels;
            if (cmd_train->count("--out")) merged.out = train.out;
            if (cmd_train->count("--log")) merged.log = train.log;
            if (cmd_train->count("--nsl") || cmd_train->count("--no-nsl")) merged.nsl = train.nsl;
            if (cmd_train->count("--nin")) merged.nin = train.nin;
            if (cmd_train->count("--subset")) merged.subset = train.subset;
            if (cmd_train->count("--repeat")) merged.repeat = train.repeat;
            if (cmd_train->count("--epochs")) merged.cfg.epochs = train.cfg.epochs;
            if (cmd_train->count("--batch")) merged.cfg.batch_size = train.cfg.batch_size;
            if (cmd_train->count("--lr0")) merged.cfg.lr0 = train.cfg.lr0;
            if (cmd_train->count("--decay-start")) merged.cfg.decay_start = train.cfg.decay_start;
            if (cmd_train->count("--gamma")) merged.cfg.decay_gamma = train.cfg.decay_gamma;
            if (cmd_train->count("--seed")) merged.cfg.seed = train.cfg.seed;
            return run_train(merged);
        }
        if (*cmd_eval)
            return run_eval(eval_ckpt, eval_images, eval_labels, eval_source, eval_target, eval_results,
                            eval_seed);
        if (*cmd_gc) return run_gradcheck(gc_scope, gc_trials, gc_seed, gc_corrupt);
        if (*cmd_inv)
            return run_invariance(inv_mu_f, inv_mu_b, inv_sigma_f, inv_sigma_b, inv_p_f, inv_size, inv_side,
                                  inv_pairs, inv_seed);
        if (*cmd_bench) return run_bench(b_batch, b_ch, b_h, b_w, b_side, b_reps, b_seed);
        if (*cmd_de) return run_detect_eval(de_pred, de_gt, de_max_dist);
        if (*cmd_stats) return run_stats(st_ckpt, st_images, st_labels, st_tau, st_out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
