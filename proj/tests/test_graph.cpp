#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nslnet/graph.hpp"
#include "nslnet/threads.hpp"
#include "test_util.hpp"

using namespace nsl;
using namespace nsltest;

namespace {

// Small graph touching every layer kind; input (B, 1, 10, 10).
template <typename T>
LayerGraph<T> tiny_net(bool with_concat = true) {
    LayerGraph<T> g;
    g.input_shape = Shape4{1, 1, 10, 10};
    auto& L = g.layers;
    L.push_back({.kind = LayerKind::Conv, .in_channels = 1, .out_channels = 4, .kh = 3, .kw = 3,
                 .input_a = kInputLayer});                                                    // 0 -> 8x8
    L.push_back({.kind = LayerKind::Relu, .input_a = 0});                                     // 1
    L.push_back({.kind = LayerKind::MaxPool, .window = 2, .stride = 2, .input_a = 1});        // 2 -> 4x4
    L.push_back({.kind = LayerKind::Nsl, .side = 3, .epsilon = 1e-8, .input_a = 2});          // 3 -> 8 ch
    int trunk = 3;
    i64 ch = 8;
    if (with_concat) {
        L.push_back({.kind = LayerKind::Nin, .in_channels = 4, .out_channels = 3, .kh = 1, .kw = 1,
                     .input_a = 2});                                                          // 4
        L.push_back({.kind = LayerKind::Concat, .input_a = 3, .input_b = 4});                 // 5 -> 11 ch
        trunk = 5;
        ch = 11;
    }
    L.push_back({.kind = LayerKind::Conv, .in_channels = ch, .out_channels = 5, .kh = 3, .kw = 3,
                 .input_a = trunk});                                                          // -> 2x2
    L.push_back({.kind = LayerKind::Relu, .input_a = static_cast<int>(L.size()) - 1});
    L.push_back({.kind = LayerKind::Flatten, .input_a = static_cast<int>(L.size()) - 1});     // 20
    L.push_back({.kind = LayerKind::Fc, .in_width = 20, .out_width = 8,
                 .input_a = static_cast<int>(L.size()) - 1});
    L.push_back({.kind = LayerKind::Relu, .input_a = static_cast<int>(L.size()) - 1});
    L.push_back({.kind = LayerKind::Fc, .in_width = 8, .out_width = 4,
                 .input_a = static_cast<int>(L.size()) - 1});
    L.push_back({.kind = LayerKind::Softmax, .input_a = static_cast<int>(L.size()) - 1});
    infer_shapes(g.input_shape, g.layers);
    g.weights.resize(L.size());
    g.biases.resize(L.size());
    return g;
}

template <typename T>
double graph_loss(const LayerGraph<T>& g, const Tensor4<T>& input, std::span<const int> labels) {
    ForwardTrace<T> trace;
    graph_forward(g, input, &trace);
    const int top = logits_layer(g.layers);
    return softmax_nll_loss<T>(trace.acts[static_cast<std::size_t>(top)], labels).loss;
}

}  // namespace

TEST_CASE("digit net shape chain") {
    const auto g = build_digit_net<float>(true, false);
    const auto shapes = infer_shapes(g.input_shape, g.layers);
    // 28 -> 24 -> 12 -> 12 (similarity, 120 ch) -> 8 -> 4 -> 768 -> 100 -> 100 -> 10
    CHECK(shapes[0] == Shape4{1, 120, 24, 24});
    CHECK(shapes[2] == Shape4{1, 120, 12, 12});
    CHECK(shapes[3] == Shape4{1, 120, 12, 12});  // parameter-free, dims preserved
    CHECK(shapes[4] == Shape4{1, 48, 8, 8});
    CHECK(shapes[6] == Shape4{1, 48, 4, 4});
    CHECK(shapes[7] == Shape4{1, 768, 1, 1});
    CHECK(shapes.back() == Shape4{1, 10, 1, 1});
    CHECK(shapes[shapes.size() - 2] == Shape4{1, 10, 1, 1});
}

TEST_CASE("digit net parameter parity with and without the similarity layer") {
    auto with = build_digit_net<float>(true, false);
    auto without = build_digit_net<float>(false, false);
    init_params(with, 1);
    init_params(without, 1);
    CHECK(param_count(with) == param_count(without));
    CHECK(param_count(with) > 0);

    auto with_nin = build_digit_net<float>(true, true);
    init_params(with_nin, 1);
    const auto shapes = infer_shapes(with_nin.input_shape, with_nin.layers);
    bool saw_concat = false;
    for (std::size_t i = 0; i < with_nin.layers.size(); ++i) {
        if (with_nin.layers[i].kind == LayerKind::Concat) {
            saw_concat = true;
            CHECK(shapes[i].channels == 145);
        }
    }
    CHECK(saw_concat);
}

TEST_CASE("digit net forward produces logits for a batch") {
    auto g = build_digit_net<float>(false, false);
    init_params(g, 7);
    Rng rng(3);
    const Tensor4f input = random_tensor<float>(Shape4{64, 1, 28, 28}, rng, 0.0, 1.0);
    ForwardTrace<float> trace;
    graph_forward(g, input, &trace);
    const int top = logits_layer(g.layers);
    CHECK(trace.acts[static_cast<std::size_t>(top)].shape() == Shape4{64, 10, 1, 1});
    CHECK(trace.acts.back().shape() == Shape4{64, 10, 1, 1});
    // softmax rows sum to 1
    const Tensor4f& probs = trace.acts.back();
    for (i64 b = 0; b < 64; ++b) {
        double acc = 0;
        for (i64 k = 0; k < 10; ++k) acc += probs(b, k, 0, 0);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("graph input shape is validated") {
    auto g = build_digit_net<float>(false, false);
    init_params(g, 7);
    const Tensor4f wrong(Shape4{2, 1, 27, 27});
    CHECK_THROWS_AS(graph_forward(g, wrong), ShapeError);
}

TEST_CASE("full graph gradient matches finite differences") {
    auto g = tiny_net<double>(true);
    init_params(g, 11);
    Rng rng(13);
    const Tensor4d input = random_tensor<double>(Shape4{2, 1, 10, 10}, rng, 0.0, 1.0);
    const std::vector<int> labels = {1, 3};

    ForwardTrace<double> trace;
    graph_forward(g, input, &trace);
    const int top = logits_layer(g.layers);
    const LossResult<double> loss = softmax_nll_loss<double>(trace.acts[static_cast<std::size_t>(top)], labels);
    const GraphGrads<double> grads = graph_backward(g, input, trace, loss.grad_logits, top);

    SUBCASE("input gradient") {
        const Tensor4d fd = fd_gradient([&](const Tensor4d& p) { return graph_loss(g, p, labels); }, input);
        CHECK(max_rel_err(grads.input, fd) < 1e-4);
    }

    SUBCASE("every parameter block") {
        for (std::size_t li = 0; li < g.layers.size(); ++li) {
            if (!g.layers[li].learnable()) continue;
            auto probe = g;
            const Tensor4d fd_w = fd_gradient(
                [&](const Tensor4d& p) {
                    probe.weights[li] = p;
                    return graph_loss(probe, input, labels);
                },
                g.weights[li]);
            CHECK(max_rel_err(grads.weights[li], fd_w) < 1e-4);

            for (std::size_t bi = 0; bi < g.biases[li].size(); ++bi) {
                auto probe2 = g;
                const double h = 1e-5;
                probe2.biases[li][bi] += h;
                const double hi = graph_loss(probe2, input, labels);
                probe2.biases[li][bi] -= 2 * h;
                const double lo = graph_loss(probe2, input, labels);
                const double fd = (hi - lo) / (2 * h);
                CHECK(rel_err(grads.biases[li][bi], fd) < 1e-4);
            }
        }
    }
}

TEST_CASE("training is deterministic and descends") {
    Rng rng(17);
    const i64 n = 96;
    const Tensor4f images = random_tensor<float>(Shape4{n, 1, 10, 10}, rng, 0.0, 1.0);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(4));

    TrainConfig cfg;
    cfg.batch_size = 32;
    cfg.lr0 = 0.05;
    cfg.seed = 5;

    auto run = [&](int threads) {
        set_num_threads(threads);
        auto g = tiny_net<float>(true);
        init_params(g, 23);
        std::vector<double> losses;
        for (int e = 1; e <= 3; ++e) losses.push_back(train_epoch(g, images, labels, cfg, e).loss);
        set_num_threads(0);
        return std::pair{losses, evaluate_accuracy(g, images, labels)};
    };

    const auto [l1, acc1] = run(1);
    const auto [l2, acc2] = run(4);
    CHECK(l1 == l2);  // bitwise identical loss trajectories
    CHECK(acc1 == acc2);

    const double init_loss = [&] {
        auto g = tiny_net<float>(true);
        init_params(g, 23);
        Tensor4f imgs = images;
        return graph_loss(g, imgs, labels);
    }();
    CHECK(l1.back() < init_loss);
}

TEST_CASE("single-batch overfit reaches full training accuracy") {
    Rng rng(19);
    const i64 n = 64;
    const Tensor4f images = random_tensor<float>(Shape4{n, 1, 10, 10}, rng, 0.0, 1.0);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(4));

    // conv -> relu -> similarity -> conv -> relu -> fc head, enough capacity
    // to memorize one batch
    LayerGraph<float> g;
    g.input_shape = Shape4{1, 1, 10, 10};
    auto& L = g.layers;
    L.push_back({.kind = LayerKind::Conv, .in_channels = 1, .out_channels = 6, .kh = 3, .kw = 3,
                 .input_a = kInputLayer});                                                 // 8x8
    L.push_back({.kind = LayerKind::Relu, .input_a = 0});
    L.push_back({.kind = LayerKind::Nsl, .side = 3, .epsilon = 1e-6, .input_a = 1});       // 8 ch
    L.push_back({.kind = LayerKind::Conv, .in_channels = 8, .out_channels = 12, .kh = 3, .kw = 3,
                 .input_a = 2});                                                           // 6x6
    L.push_back({.kind = LayerKind::Relu, .input_a = 3});
    L.push_back({.kind = LayerKind::Flatten, .input_a = 4});                               // 432
    L.push_back({.kind = LayerKind::Fc, .in_width = 432, .out_width = 32, .input_a = 5});
    L.push_back({.kind = LayerKind::Relu, .input_a = 6});
    L.push_back({.kind = LayerKind::Fc, .in_width = 32, .out_width = 4, .input_a = 7});
    L.push_back({.kind = LayerKind::Softmax, .input_a = 8});
    infer_shapes(g.input_shape, g.layers);
    g.weights.resize(L.size());
    g.biases.resize(L.size());
    init_params(g, 29);

    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.lr0 = 0.1;
    cfg.decay_start = 1000;
    cfg.seed = 7;

    for (int step = 1; step <= 200; ++step) {
        if (train_epoch(g, images, labels, cfg, 1).accuracy == 1.0) break;
    }
    CHECK(evaluate_accuracy(g, images, labels) == 1.0);
}

TEST_CASE("evaluate_accuracy on a constant-class net") {
    // fc weights zero, bias puts all mass on class 0
    LayerGraph<float> g;
    g.input_shape = Shape4{1, 1, 2, 2};
    g.layers.push_back({.kind = LayerKind::Flatten, .input_a = kInputLayer});
    g.layers.push_back({.kind = LayerKind::Fc, .in_width = 4, .out_width = 3, .input_a = 0});
    g.layers.push_back({.kind = LayerKind::Softmax, .input_a = 1});
    g.weights.resize(3);
    g.biases.resize(3);
    g.weights[1] = Tensor4f(Shape4{3, 4, 1, 1});
    g.biases[1] = {5.0f, 0.0f, 0.0f};

    Rng rng(23);
    const Tensor4f images = random_tensor<float>(Shape4{10, 1, 2, 2}, rng);
    const std::vector<int> zeros(10, 0);
    CHECK(evaluate_accuracy(g, images, zeros) == 1.0);
    std::vector<int> ones(10, 1);
    CHECK(evaluate_accuracy(g, images, ones) == 0.0);
}

TEST_CASE("graph text round-trips") {
    for (const bool with_nin : {false, true}) {
        const auto g = build_digit_net<float>(true, with_nin);
        const std::string text = describe_graph(g.input_shape, g.layers);
        const auto [shape, layers] = parse_graph_text(text);
        CHECK(shape == g.input_shape);
        REQUIRE(layers.size() == g.layers.size());
        CHECK(describe_graph(shape, layers) == text);
    }
    CHECK_THROWS_AS(parse_graph_text("conv in=1 out=2 kh=3 kw=3\n"), FormatError);
    CHECK_THROWS_AS(parse_graph_text("input channels=1 height=4 width=4\nwarp\n"), FormatError);
}

TEST_CASE("checkpoint round-trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "nslnet_test_ckpt";
    fs::create_directories(dir);

    auto g = tiny_net<float>(true);
    init_params(g, 31);
    const fs::path p1 = dir / "a.ckpt";
    const fs::path p2 = dir / "b.ckpt";
    save_checkpoint(g, p1);
    const LayerGraph<float> loaded = load_checkpoint(p1);
    save_checkpoint(loaded, p2);

    // byte-identical files
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());

    // identical behaviour
    Rng rng(37);
    const Tensor4f input = random_tensor<float>(Shape4{3, 1, 10, 10}, rng, 0.0, 1.0);
    const Tensor4f out_a = graph_forward(g, input);
    const Tensor4f out_b = graph_forward(loaded, input);
    CHECK(bitwise_equal(out_a, out_b));

    SUBCASE("corrupted magic is a format error") {
        const fs::path bad = dir / "bad.ckpt";
        std::string bytes = b1;
        bytes[0] = 'X';
        std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
    }
    SUBCASE("truncated payload is an io error") {
        const fs::path cut = dir / "cut.ckpt";
        std::ofstream(cut, std::ios::binary).write(b1.data(), static_cast<std::streamsize>(b1.size() / 2));
        CHECK_THROWS_AS(load_checkpoint(cut), IoError);
    }
    fs::remove_all(dir);
}
