#include "nslnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nslnet/graph.hpp"

namespace nsl {

namespace {

constexpr double kTolerance = 1e-4;
constexpr double kStep = 1e-5;

double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

double fd_at(const std::function<double()>& eval, double& cell) {
    const double keep = cell;
    cell = keep + kStep;
    const double hi = eval();
    cell = keep - kStep;
    const double lo = eval();
    cell = keep;
    return (hi - lo) / (2.0 * kStep);
}

// max over all coordinates of one tensor
double check_tensor(const Tensor4d& analytic, Tensor4d& probe, const std::function<double()>& eval,
                    double corrupt) {
    double worst = 0;
    for (i64 i = 0; i < analytic.size(); ++i) {
        const double fd = fd_at(eval, probe[i]);
        const double a = analytic[i] * (1.0 + corrupt);
        worst = std::max(worst, rel_err(a, fd));
    }
    return worst;
}

Shape4 random_shape(Rng& rng, i64 max_b, i64 max_c, i64 min_hw, i64 max_hw) {
    return Shape4{1 + static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(max_b))),
                  1 + static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(max_c))),
                  min_hw + static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(max_hw - min_hw + 1))),
                  min_hw + static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(max_hw - min_hw + 1)))};
}

template <typename Fill>
Tensor4d filled(Shape4 s, Fill&& f) {
    Tensor4d t(s);
    for (i64 i = 0; i < t.size(); ++i) t[i] = f();
    return t;
}

}  // namespace

GradCheckResult gradcheck_nsl(int trials, std::uint64_t seed, double corrupt) {
    const Rng root(seed);
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        Rng rng = root.split(static_cast<std::uint64_t>(t));
        const Shape4 s = random_shape(rng, 2, 4, 3, 8);
        const int side = rng.uniform() < 0.5 ? 3 : 5;
        const NslConfig cfg(square_neighborhood(side), 1e-8);

        Tensor4d phi = filled(s, [&] { return rng.normal(); });
        auto [psi, cache] = nsl_forward(phi, cfg);
        const Tensor4d up = filled(psi.shape(), [&] { return rng.uniform(-1.0, 1.0); });
        const Tensor4d analytic = nsl_backward(up, cache, cfg);

        const auto eval = [&] {
            auto [out, c] = nsl_forward(phi, cfg);
            double acc = 0;
            for (i64 i = 0; i < out.size(); ++i) acc += out[i] * up[i];
            return acc;
        };
        worst = std::max(worst, check_tensor(analytic, phi, eval, corrupt));
    }
    return {"nsl", worst, trials, worst < kTolerance};
}

GradCheckResult gradcheck_conv(int trials, std::uint64_t seed, double corrupt) {
    const Rng root(seed);
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        Rng rng = root.split(static_cast<std::uint64_t>(t));
        const Shape4 s = random_shape(rng, 2, 3, 5, 8);
        const i64 out_ch = 1 + static_cast<i64>(rng.uniform_int(3));
        Tensor4d in = filled(s, [&] { return rng.normal(); });
        Tensor4d w = filled(Shape4{out_ch, s.channels, 3, 3}, [&] { return rng.normal() * 0.5; });
        std::vector<double> b(static_cast<std::size_t>(out_ch));
        for (auto& v : b) v = rng.normal() * 0.1;

        const Tensor4d fwd = conv2d_forward(in, w, b);
        const Tensor4d up = filled(fwd.shape(), [&] { return rng.uniform(-1.0, 1.0); });
        const ConvGrads<double> g = conv2d_backward(up, in, w);

        const auto eval = [&] {
            const Tensor4d out = conv2d_forward(in, w, b);
            double acc = 0;
            for (i64 i = 0; i < out.size(); ++i) acc += out[i] * up[i];
            return acc;
        };
        worst = std::max(worst, check_tensor(g.input, in, eval, corrupt));
        worst = std::max(worst, check_tensor(g.weights, w, eval, corrupt));
        for (std::size_t o = 0; o < b.size(); ++o) {
            const double fd = fd_at(eval, b[o]);
            worst = std::max(worst, rel_err(g.biases[o] * (1.0 + corrupt), fd));
        }
    }
    return {"conv", worst, trials, worst < kTolerance};
}

GradCheckResult gradcheck_fc(int trials, std::uint64_t seed, double corrupt) {
    const Rng root(seed);
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        Rng rng = root.split(static_cast<std::uint64_t>(t));
        const i64 batch = 1 + static_cast<i64>(rng.uniform_int(3));
        const i64 in_w = 2 + static_cast<i64>(rng.uniform_int(11));
        const i64 out_w = 1 + static_cast<i64>(rng.uniform_int(8));
        Tensor4d in = filled(Shape4{batch, in_w, 1, 1}, [&] { return rng.normal(); });
        Tensor4d w = filled(Shape4{out_w, in_w, 1, 1}, [&] { return rng.normal() * 0.5; });
        std::vector<double> b(static_cast<std::size_t>(out_w));
        for (auto& v : b) v = rng.normal() * 0.1;

        const Tensor4d up = filled(Shape4{batch, out_w, 1, 1}, [&] { return rng.uniform(-1.0, 1.0); });
        const FcGrads<double> g = fc_backward(up, in, w);
        const auto eval = [&] {
            const Tensor4d out = fc_forward(in, w, b);
            double acc = 0;
            for (i64 i = 0; i < out.size(); ++i) acc += out[i] * up[i];
            return acc;
        };
        worst = std::max(worst, check_tensor(g.input, in, eval, corrupt));
        worst = std::max(worst, check_tensor(g.weights, w, eval, corrupt));
        for (std::size_t o = 0; o < b.size(); ++o) {
            const double fd = fd_at(eval, b[o]);
            worst = std::max(worst, rel_err(g.biases[o] * (1.0 + corrupt), fd));
        }
    }
    return {"fc", worst, trials, worst < kTolerance};
}

GradCheckResult gradcheck_softmax(int trials, std::uint64_t seed, double corrupt) {
    const Rng root(seed);
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        Rng rng = root.split(static_cast<std::uint64_t>(t));
        const i64 batch = 1 + static_cast<i64>(rng.uniform_int(4));
        const i64 classes = 10;
        Tensor4d logits = filled(Shape4{batch, classes, 1, 1}, [&] { return rng.normal(); });
        std::vector<int> labels(static_cast<std::size_t>(batch));
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(classes)));

        const LossResult<double> r = softmax_nll_loss<double>(logits, labels);
        const auto eval = [&] { return softmax_nll_loss<double>(logits, labels).loss; };
        worst = std::max(worst, check_tensor(r.grad_logits, logits, eval, corrupt));
    }
    return {"softmax", worst, trials, worst < kTolerance};
}

GradCheckResult gradcheck_full_net(int trials, std::uint64_t seed, double corrupt) {
    const Rng root(seed);
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        Rng rng = root.split(static_cast<std::uint64_t>(t));
        auto g = build_digit_net<double>(true, t % 2 == 1);
        init_params(g, rng.next_u64());
        Tensor4d input = filled(Shape4{1, 1, 28, 28}, [&] { return rng.uniform(0.0, 1.0); });
        const std::vector<int> labels = {static_cast<int>(rng.uniform_int(10))};

        ForwardTrace<double> trace;
        graph_forward(g, input, &trace);
        const int top = logits_layer(g.layers);
        const LossResult<double> loss =
            softmax_nll_loss<double>(trace.acts[static_cast<std::size_t>(top)], labels);
        const GraphGrads<double> grads = graph_backward(g, input, trace, loss.grad_logits, top);

        const auto eval = [&] {
            ForwardTrace<double> tr;
            graph_forward(g, input, &tr);
            return softmax_nll_loss<double>(tr.acts[static_cast<std::size_t>(top)], labels).loss;
        };

        // Spot-check a random subset of coordinates in every block.
        constexpr int kInputProbes = 12;
        constexpr int kParamProbes = 8;
        for (int probe = 0; probe < kInputProbes; ++probe) {
            const i64 i = static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(input.size())));
            const double fd = fd_at(eval, input[i]);
            worst = std::max(worst, rel_err(grads.input[i] * (1.0 + corrupt), fd));
        }
        for (std::size_t li = 0; li < g.layers.size(); ++li) {
            if (!g.layers[li].learnable()) continue;
            for (int probe = 0; probe < kParamProbes; ++probe) {
                const i64 i = static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(g.weights[li].size())));
                const double fd = fd_at(eval, g.weights[li][i]);
                worst = std::max(worst, rel_err(grads.weights[li][i] * (1.0 + corrupt), fd));
            }
            const std::size_t bi = rng.uniform_int(g.biases[li].size());
            const double fd = fd_at(eval, g.biases[li][bi]);
            worst = std::max(worst, rel_err(grads.biases[li][bi] * (1.0 + corrupt), fd));
        }
    }
    return {"full-net", worst, trials, worst < kTolerance};
}

GradCheckResult run_gradcheck_scope(const std::string& scope, int trials, std::uint64_t seed, double corrupt) {
    if (scope == "nsl") return gradcheck_nsl(trials, seed, corrupt);
    if (scope == "conv") return gradcheck_conv(trials, seed, corrupt);
    if (scope == "fc") return gradcheck_fc(trials, seed, corrupt);
    if (scope == "softmax") return gradcheck_softmax(trials, seed, corrupt);
    if (scope == "full-net") return gradcheck_full_net(trials, seed, corrupt);
    throw ParamError("gradcheck: unknown scope '" + scope + "'");
}

}  // namespace nsl
