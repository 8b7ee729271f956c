#include "nslnet/graph.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace nsl {

namespace {

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Nsl: return "nsl";
        case LayerKind::Nin: return "nin";
        case LayerKind::Concat: return "concat";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Fc: return "fc";
        case LayerKind::Softmax: return "softmax";
    }
    return "?";
}

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

Shape4 shape_of_input(const LayerSpec& spec, int self, const Shape4& input_shape,
                      const std::vector<Shape4>& shapes, bool second = false) {
    const int idx = second ? spec.input_b : spec.input_a;
    if (idx == kInputLayer) return input_shape;
    if (idx < 0 || idx >= self) {
        throw ShapeError("layer " + std::to_string(self) + ": upstream index " + std::to_string(idx) +
                         " invalid");
    }
    return shapes[static_cast<std::size_t>(idx)];
}

}  // namespace

std::vector<Shape4> infer_shapes(const Shape4& input_shape, const std::vector<LayerSpec>& layers) {
    std::vector<Shape4> shapes;
    shapes.reserve(layers.size());
    for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
        const LayerSpec& spec = layers[static_cast<std::size_t>(i)];
        const Shape4 in = shape_of_input(spec, i, input_shape, shapes);
        Shape4 out = in;
        switch (spec.kind) {
            case LayerKind::Conv:
            case LayerKind::Nin: {
                if (in.channels != spec.in_channels) {
                    throw ShapeError("layer " + std::to_string(i) + " (" + kind_name(spec.kind) + "): expects " +
                                     std::to_string(spec.in_channels) + " channels, got " +
                                     std::to_string(in.channels));
                }
                if (in.height < spec.kh || in.width < spec.kw) {
                    throw ShapeError("layer " + std::to_string(i) + ": kernel larger than input");
                }
                out.channels = spec.out_channels;
                out.height = in.height - spec.kh + 1;
                out.width = in.width - spec.kw + 1;
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::MaxPool:
                if (in.height < spec.window || in.width < spec.window) {
                    throw ShapeError("layer " + std::to_string(i) + ": pool window larger than input");
                }
                out.height = (in.height - spec.window) / spec.stride + 1;
                out.width = (in.width - spec.window) / spec.stride + 1;
                break;
            case LayerKind::Nsl:
                out.channels = static_cast<i64>(spec.side) * spec.side - 1;
                break;
            case LayerKind::Concat: {
                const Shape4 in_b = shape_of_input(spec, i, input_shape, shapes, true);
                if (in.height != in_b.height || in.width != in_b.width) {
                    throw ShapeError("layer " + std::to_string(i) + " (concat): spatial dims differ");
                }
                out.channels = in.channels + in_b.channels;
                break;
            }
            case LayerKind::Flatten:
                out.channels = in.channels * in.height * in.width;
                out.height = 1;
                out.width = 1;
                break;
            case LayerKind::Fc:
                if (in.channels != spec.in_width || in.height != 1 || in.width != 1) {
                    throw ShapeError("layer " + std::to_string(i) + " (fc): expects (" +
                                     std::to_string(spec.in_width) + ",1,1), got " + in.to_string());
                }
                out.channels = spec.out_width;
                break;
            case LayerKind::Softmax:
                if (in.height != 1 || in.width != 1) {
                    throw ShapeError("layer " + std::to_string(i) + " (softmax): expects flat input");
                }
                break;
        }
        shapes.push_back(out);
    }
    return shapes;
}

template <typename T>
LayerGraph<T> build_digit_net(bool with_nsl, bool with_nin) {
    LayerGraph<T> g;
    g.input_shape = Shape4{1, 1, 28, 28};
    auto& L = g.layers;

    auto prev = [&]() { return static_cast<int>(L.size()) - 1; };

    LayerSpec conv1{.kind = LayerKind::Conv, .in_channels = 1, .out_channels = 120, .kh = 5, .kw = 5,
                    .input_a = kInputLayer};
    L.push_back(conv1);
    L.push_back({.kind = LayerKind::Relu, .input_a = prev()});
    L.push_back({.kind = LayerKind::MaxPool, .window = 2, .stride = 2, .input_a = prev()});
    const int pool1 = prev();

    int trunk = pool1;
    if (with_nsl) {
        L.push_back({.kind = LayerKind::Nsl, .side = 11, .epsilon = default_norm_floor<T>(), .input_a = pool1});
        trunk = prev();
    }
    if (with_nin) {
        L.push_back({.kind = LayerKind::Nin, .in_channels = 120, .out_channels = 25, .kh = 1, .kw = 1,
                     .input_a = pool1});
        const int nin = prev();
        L.push_back({.kind = LayerKind::Concat, .input_a = trunk, .input_b = nin});
        trunk = prev();
    }

    const i64 conv2_in = with_nin ? 145 : 120;
    L.push_back({.kind = LayerKind::Conv, .in_channels = conv2_in, .out_channels = 48, .kh = 5, .kw = 5,
                 .input_a = trunk});
    L.push_back({.kind = LayerKind::Relu, .input_a = prev()});
    L.push_back({.kind = LayerKind::MaxPool, .window = 2, .stride = 2, .input_a = prev()});
    L.push_back({.kind = LayerKind::Flatten, .input_a = prev()});
    L.push_back({.kind = LayerKind::Fc, .in_width = 48 * 4 * 4, .out_width = 100, .input_a = prev()});
    L.push_back({.kind = LayerKind::Relu, .input_a = prev()});
    L.push_back({.kind = LayerKind::Fc, .in_width = 100, .out_width = 100, .input_a = prev()});
    L.push_back({.kind = LayerKind::Relu, .input_a = prev()});
    L.push_back({.kind = LayerKind::Fc, .in_width = 100, .out_width = 10, .input_a = prev()});
    L.push_back({.kind = LayerKind::Softmax, .input_a = prev()});

    infer_shapes(g.input_shape, g.layers);  // validate the chain
    g.weights.resize(L.size());
    g.biases.resize(L.size());
    return g;
}

template <typename T>
void init_params(LayerGraph<T>& graph, std::uint64_t seed) {
    const Rng root(seed);
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& spec = graph.layers[i];
        if (!spec.learnable()) continue;
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        if (spec.kind == LayerKind::Fc) {
            graph.weights[i] = xavier_init<T>(Shape4{spec.out_width, spec.in_width, 1, 1}, spec.in_width,
                                              spec.out_width, rng);
            graph.biases[i].assign(static_cast<std::size_t>(spec.out_width), T(0));
        } else {
            const i64 fan_in = spec.in_channels * spec.kh * spec.kw;
            const i64 fan_out = spec.out_channels * spec.kh * spec.kw;
            graph.weights[i] = xavier_init<T>(Shape4{spec.out_channels, spec.in_channels, spec.kh, spec.kw},
                                              fan_in, fan_out, rng);
            graph.biases[i].assign(static_cast<std::size_t>(spec.out_channels), T(0));
        }
    }
}

template <typename T>
i64 param_count(const LayerGraph<T>& graph) {
    i64 n = 0;
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        n += graph.weights[i].size();
        n += static_cast<i64>(graph.biases[i].size());
    }
    return n;
}

template <typename T>
Tensor4<T> graph_forward(const LayerGraph<T>& graph, const Tensor4<T>& input, ForwardTrace<T>* trace) {
    const Shape4& in_s = input.shape();
    if (in_s.channels != graph.input_shape.channels || in_s.height != graph.input_shape.height ||
        in_s.width != graph.input_shape.width) {
        throw ShapeError("graph_forward: input " + in_s.to_string() + " does not match network input " +
                         graph.input_shape.to_string());
    }

    std::vector<Tensor4<T>> local_acts;
    std::vector<Tensor4<T>>& acts = trace ? trace->acts : local_acts;
    acts.clear();
    acts.reserve(graph.layers.size());
    if (trace) trace->nsl_caches.clear();

    auto act_of = [&](int idx) -> const Tensor4<T>& {
        return idx == kInputLayer ? input : acts[static_cast<std::size_t>(idx)];
    };

    for (int i = 0; i < static_cast<int>(graph.layers.size()); ++i) {
        const LayerSpec& spec = graph.layers[static_cast<std::size_t>(i)];
        const std::size_t si = static_cast<std::size_t>(i);
        const Tensor4<T>& in = act_of(spec.input_a);
        switch (spec.kind) {
            case LayerKind::Conv:
            case LayerKind::Nin:
                acts.push_back(conv2d_forward(in, graph.weights[si], graph.biases[si]));
                break;
            case LayerKind::Relu:
                acts.push_back(relu_forward(in));
                break;
            case LayerKind::MaxPool:
                acts.push_back(maxpool_forward(in, spec.window, spec.stride));
                break;
            case LayerKind::Nsl: {
                NslConfig cfg(square_neighborhood(spec.side), spec.epsilon);
                auto [psi, cache] = nsl_forward(in, cfg);
                acts.push_back(std::move(psi));
                if (trace) trace->nsl_caches.emplace(i, std::move(cache));
                break;
            }
            case LayerKind::Concat: {
                const Tensor4<T>& in_b = act_of(spec.input_b);
                const Shape4 sa = in.shape();
                const Shape4 sb = in_b.shape();
                Tensor4<T> out(Shape4{sa.batch, sa.channels + sb.channels, sa.height, sa.width});
                const i64 plane_a = sa.channels * sa.pixels();
                const i64 plane_b = sb.channels * sb.pixels();
                for (i64 b = 0; b < sa.batch; ++b) {
                    std::copy_n(in.data() + b * plane_a, plane_a, out.data() + b * (plane_a + plane_b));
                    std::copy_n(in_b.data() + b * plane_b, plane_b,
                                out.data() + b * (plane_a + plane_b) + plane_a);
                }
                acts.push_back(std::move(out));
                break;
            }
            case LayerKind::Flatten:
                acts.push_back(flatten(in));
                break;
            case LayerKind::Fc:
                acts.push_back(fc_forward(in, graph.weights[si], graph.biases[si]));
                break;
            case LayerKind::Softmax:
                acts.push_back(softmax_forward(in));
                break;
        }
    }
    return acts.back();
}

int logits_layer(const std::vector<LayerSpec>& layers) {
    int top = static_cast<int>(layers.size()) - 1;
    if (top >= 0 && layers[static_cast<std::size_t>(top)].kind == LayerKind::Softmax) {
        top = layers[static_cast<std::size_t>(top)].input_a;
    }
    return top;
}

template <typename T>
GraphGrads<T> graph_backward(const LayerGraph<T>& graph, const Tensor4<T>& input, const ForwardTrace<T>& trace,
                             const Tensor4<T>& grad_top, int top) {
    if (top < 0 || top >= static_cast<int>(graph.layers.size())) {
        throw IndexError("graph_backward: top layer index out of range");
    }
    GraphGrads<T> grads;
    grads.weights.resize(graph.layers.size());
    grads.biases.resize(graph.layers.size());

    std::vector<Tensor4<T>> gacts(graph.layers.size());

    auto act_of = [&](int idx) -> const Tensor4<T>& {
        return idx == kInputLayer ? input : trace.acts[static_cast<std::size_t>(idx)];
    };
    auto add_to = [&](int idx, Tensor4<T>&& g) {
        Tensor4<T>& dst = idx == kInputLayer ? grads.input : gacts[static_cast<std::size_t>(idx)];
        if (dst.empty()) {
            dst = std::move(g);
        } else {
            for (i64 j = 0; j < dst.size(); ++j) dst[j] += g[j];
        }
    };

    gacts[static_cast<std::size_t>(top)] = grad_top;
    if (!(grad_top.shape() == trace.acts[static_cast<std::size_t>(top)].shape())) {
        throw ShapeError("graph_backward: gradient shape does not match layer output");
    }

    for (int i = top; i >= 0; --i) {
        const std::size_t si = static_cast<std::size_t>(i);
        if (gacts[si].empty()) continue;
        const LayerSpec& spec = graph.layers[si];
        const Tensor4<T>& up = gacts[si];
        const Tensor4<T>& in = act_of(spec.input_a);
        switch (spec.kind) {
            case LayerKind::Conv:
            case LayerKind::Nin: {
                ConvGrads<T> g = conv2d_backward(up, in, graph.weights[si]);
                grads.weights[si] = std::move(g.weights);
                grads.biases[si] = std::move(g.biases);
                add_to(spec.input_a, std::move(g.input));
                break;
            }
            case LayerKind::Relu:
                add_to(spec.input_a, relu_backward(up, in));
                break;
            case LayerKind::MaxPool:
                add_to(spec.input_a, maxpool_backward(up, in, spec.window, spec.stride));
                break;
            case LayerKind::Nsl: {
                NslConfig cfg(square_neighborhood(spec.side), spec.epsilon);
                add_to(spec.input_a, nsl_backward(up, trace.nsl_caches.at(i), cfg));
                break;
            }
            case LayerKind::Concat: {
                const Shape4 sa = in.shape();
                const Shape4 sb = act_of(spec.input_b).shape();
                Tensor4<T> ga(sa);
                Tensor4<T> gb(sb);
                const i64 plane_a = sa.channels * sa.pixels();
                const i64 plane_b = sb.channels * sb.pixels();
                for (i64 b = 0; b < sa.batch; ++b) {
                    std::copy_n(up.data() + b * (plane_a + plane_b), plane_a, ga.data() + b * plane_a);
                    std::copy_n(up.data() + b * (plane_a + plane_b) + plane_a, plane_b, gb.data() + b * plane_b);
                }
                add_to(spec.input_a, std::move(ga));
                add_to(spec.input_b, std::move(gb));
                break;
            }
            case LayerKind::Flatten:
                add_to(spec.input_a, up.reshaped(in.shape()));
                break;
            case LayerKind::Fc: {
                FcGrads<T> g = fc_backward(up, in, graph.weights[si]);
                grads.weights[si] = std::move(g.weights);
                grads.biases[si] = std::move(g.biases);
                add_to(spec.input_a, std::move(g.input));
                break;
            }
            case LayerKind::Softmax: {
                // J^T u = p * (u - <u, p>) rowwise
                const Tensor4<T>& p = trace.acts[si];
                Tensor4<T> g(in.shape());
                const Shape4& s = in.shape();
                for (i64 b = 0; b < s.batch; ++b) {
                    const T* pr = p.data() + p.index(b, 0, 0, 0);
                    const T* ur = up.data() + up.index(b, 0, 0, 0);
                    T* gr = g.data() + g.index(b, 0, 0, 0);
                    T dot = T(0);
                    for (i64 k = 0; k < s.channels; ++k) dot += ur[k] * pr[k];
                    for (i64 k = 0; k < s.channels; ++k) gr[k] = pr[k] * (ur[k] - dot);
                }
                add_to(spec.input_a, std::move(g));
                break;
            }
        }
    }
    if (grads.input.empty()) grads.input = Tensor4<T>(input.shape());
    return grads;
}

double learning_rate(const TrainConfig& cfg, int epoch) {
    const int extra = std::max(0, epoch - cfg.decay_start);
    return cfg.lr0 * std::pow(cfg.decay_gamma, extra);
}

template <typename T>
void apply_sgd(LayerGraph<T>& graph, const GraphGrads<T>& grads, double lr) {
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        if (!graph.layers[i].learnable()) continue;
        if (grads.weights[i].empty()) continue;
        sgd_step(graph.weights[i], grads.weights[i], lr);
        sgd_step(graph.biases[i], grads.biases[i], lr);
    }
}

namespace {

template <typename T>
Tensor4<T> gather_batch(const Tensor4<T>& images, std::span<const i64> order, i64 begin, i64 count) {
    const Shape4& s = images.shape();
    Tensor4<T> batch(Shape4{count, s.channels, s.height, s.width});
    const i64 plane = s.channels * s.pixels();
    for (i64 k = 0; k < count; ++k) {
        const i64 src = order[static_cast<std::size_t>(begin + k)];
        std::copy_n(images.data() + src * plane, plane, batch.data() + k * plane);
    }
    return batch;
}

template <typename T>
i64 argmax_row(const Tensor4<T>& out, i64 b) {
    const i64 k = out.shape().channels;
    const T* row = out.data() + out.index(b, 0, 0, 0);
    return static_cast<i64>(std::max_element(row, row + k) - row);
}

}  // namespace

template <typename T>
EpochStats train_epoch(LayerGraph<T>& graph, const Tensor4<T>& images, std::span<const int> labels,
                       const TrainConfig& cfg, int epoch) {
    const i64 n = images.shape().batch;
    if (static_cast<i64>(labels.size()) != n) throw DataError("train_epoch: image/label count mismatch");
    if (cfg.batch_size < 1) throw ParamError("train_epoch: batch_size must be >= 1");

    // Per-epoch derived stream keeps shuffles reproducible and distinct.
    Rng rng = Rng(cfg.seed).split(0xE50C * static_cast<std::uint64_t>(epoch));
    std::vector<i64> order(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (i64 i = n - 1; i > 0; --i) {
        const i64 j = static_cast<i64>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    const double lr = learning_rate(cfg, epoch);
    const int top = logits_layer(graph.layers);
    double loss_sum = 0;
    i64 correct = 0;

    for (i64 begin = 0; begin < n; begin += cfg.batch_size) {
        const i64 bs = std::min<i64>(cfg.batch_size, n - begin);
        Tensor4<T> batch = gather_batch(images, order, begin, bs);
        std::vector<int> batch_labels(static_cast<std::size_t>(bs));
        for (i64 k = 0; k < bs; ++k) {
            batch_labels[static_cast<std::size_t>(k)] = labels[static_cast<std::size_t>(order[static_cast<std::size_t>(begin + k)])];
        }

        ForwardTrace<T> trace;
        graph_forward(graph, batch, &trace);
        const Tensor4<T>& logits = trace.acts[static_cast<std::size_t>(top)];
        LossResult<T> loss = softmax_nll_loss<T>(logits, batch_labels);
        loss_sum += loss.loss * static_cast<double>(bs);
        for (i64 k = 0; k < bs; ++k) {
            if (argmax_row(logits, k) == batch_labels[static_cast<std::size_t>(k)]) ++correct;
        }

        GraphGrads<T> grads = graph_backward(graph, batch, trace, loss.grad_logits, top);
        apply_sgd(graph, grads, lr);
    }

    return EpochStats{loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

template <typename T>
double evaluate_accuracy(const LayerGraph<T>& graph, const Tensor4<T>& images, std::span<const int> labels,
                         i64 batch_size) {
    const i64 n = images.shape().batch;
    if (static_cast<i64>(labels.size()) != n) throw DataError("evaluate_accuracy: image/label count mismatch");
    std::vector<i64> order(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    i64 correct = 0;
    for (i64 begin = 0; begin < n; begin += batch_size) {
        const i64 bs = std::min<i64>(batch_size, n - begin);
        Tensor4<T> batch = gather_batch(images, order, begin, bs);
        const Tensor4<T> out = graph_forward(graph, batch);
        for (i64 k = 0; k < bs; ++k) {
            if (argmax_row(out, k) == labels[static_cast<std::size_t>(begin + k)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

std::string describe_graph(const Shape4& input_shape, const std::vector<LayerSpec>& layers) {
    std::ostringstream os;
    os << "input channels=" << input_shape.channels << " height=" << input_shape.height
       << " width=" << input_shape.width << "\n";
    for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
        const LayerSpec& spec = layers[static_cast<std::size_t>(i)];
        os << kind_name(spec.kind);
        switch (spec.kind) {
            case LayerKind::Conv:
            case LayerKind::Nin:
                os << " in=" << spec.in_channels << " out=" << spec.out_channels << " kh=" << spec.kh
                   << " kw=" << spec.kw;
                break;
            case LayerKind::MaxPool:
                os << " window=" << spec.window << " stride=" << spec.stride;
                break;
            case LayerKind::Nsl:
                os << " side=" << spec.side << " epsilon=" << format_double(spec.epsilon);
                break;
            case LayerKind::Fc:
                os << " in=" << spec.in_width << " out=" << spec.out_width;
                break;
            case LayerKind::Concat:
                os << " a=" << spec.input_a << " b=" << spec.input_b;
                break;
            default:
                break;
        }
        if (spec.kind != LayerKind::Concat && spec.input_a != i - 1) {
            os << " from=";
            if (spec.input_a == kInputLayer) {
                os << "input";
            } else {
                os << spec.input_a;
            }
        }
        os << "\n";
    }
    return os.str();
}

namespace {

std::map<std::string, std::string> parse_kv(const std::string& line, std::string& kind) {
    std::istringstream is(line);
    is >> kind;
    std::map<std::string, std::string> kv;
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw FormatError("graph text: bad token '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return kv;
}

i64 kv_int(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("graph text: missing key '" + key + "'");
    return std::stoll(it->second);
}

double kv_double(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("graph text: missing key '" + key + "'");
    return std::stod(it->second);
}

}  // namespace

std::pair<Shape4, std::vector<LayerSpec>> parse_graph_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    Shape4 input_shape{};
    std::vector<LayerSpec> layers;
    bool saw_input = false;

    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::string kind;
        auto kv = parse_kv(line, kind);
        if (kind == "input") {
            input_shape = Shape4{1, kv_int(kv, "channels"), kv_int(kv, "height"), kv_int(kv, "width")};
            saw_input = true;
            continue;
        }
        if (!saw_input) throw FormatError("graph text: first line must declare the input");

        LayerSpec spec;
        const int i = static_cast<int>(layers.size());
        spec.input_a = i - 1 >= 0 ? i - 1 : kInputLayer;
        if (auto it = kv.find("from"); it != kv.end()) {
            spec.input_a = it->second == "input" ? kInputLayer : std::stoi(it->second);
        }

        if (kind == "conv" || kind == "nin") {
            spec.kind = kind == "conv" ? LayerKind::Conv : LayerKind::Nin;
            spec.in_channels = kv_int(kv, "in");
            spec.out_channels = kv_int(kv, "out");
            spec.kh = kv_int(kv, "kh");
            spec.kw = kv_int(kv, "kw");
        } else if (kind == "relu") {
            spec.kind = LayerKind::Relu;
        } else if (kind == "maxpool") {
            spec.kind = LayerKind::MaxPool;
            spec.window = static_cast<int>(kv_int(kv, "window"));
            spec.stride = static_cast<int>(kv_int(kv, "stride"));
        } else if (kind == "nsl") {
            spec.kind = LayerKind::Nsl;
            spec.side = static_cast<int>(kv_int(kv, "side"));
            spec.epsilon = kv_double(kv, "epsilon");
        } else if (kind == "concat") {
            spec.kind = LayerKind::Concat;
            spec.input_a = static_cast<int>(kv_int(kv, "a"));
            spec.input_b = static_cast<int>(kv_int(kv, "b"));
        } else if (kind == "flatten") {
            spec.kind = LayerKind::Flatten;
        } else if (kind == "fc") {
            spec.kind = LayerKind::Fc;
            spec.in_width = kv_int(kv, "in");
            spec.out_width = kv_int(kv, "out");
        } else if (kind == "softmax") {
            spec.kind = LayerKind::Softmax;
        } else {
            throw FormatError("graph text: unknown layer kind '" + kind + "'");
        }
        layers.push_back(spec);
    }
    if (!saw_input) throw FormatError("graph text: empty descriptor");
    return {input_shape, layers};
}

namespace {

constexpr char kMagic[8] = {'N', 'S', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32_block(std::ostream& os, const float* p, i64 n) {
    static_assert(sizeof(float) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(p), n * 4);
    } else {
        for (i64 i = 0; i < n; ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, p + i, 4);
            write_u32(os, bits);
        }
    }
}

void read_f32_block(std::istream& is, float* p, i64 n) {
    if constexpr (std::endian::native == std::endian::little) {
        if (!is.read(reinterpret_cast<char*>(p), n * 4)) throw IoError("checkpoint: truncated payload");
    } else {
        for (i64 i = 0; i < n; ++i) {
            const std::uint32_t bits = read_u32(is);
            std::memcpy(p + i, &bits, 4);
        }
    }
}

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw IoError("checkpoint: truncated string");
    return s;
}

}  // namespace

void save_checkpoint(const LayerGraph<float>& graph, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open '" + path.string() + "' for writing");
    os.write(kMagic, 8);
    write_u32(os, kVersion);
    write_string(os, describe_graph(graph.input_shape, graph.layers));
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        if (!graph.layers[i].learnable()) continue;
        const std::string base = "layer" + std::to_string(i);
        const Tensor4<float>& w = graph.weights[i];
        write_string(os, base + ".weight");
        write_u32(os, 4);
        const Shape4 ws = w.shape();
        write_u32(os, static_cast<std::uint32_t>(ws.batch));
        write_u32(os, static_cast<std::uint32_t>(ws.channels));
        write_u32(os, static_cast<std::uint32_t>(ws.height));
        write_u32(os, static_cast<std::uint32_t>(ws.width));
        write_f32_block(os, w.data(), w.size());

        const std::vector<float>& b = graph.biases[i];
        write_string(os, base + ".bias");
        write_u32(os, 4);
        write_u32(os, static_cast<std::uint32_t>(b.size()));
        write_u32(os, 1);
        write_u32(os, 1);
        write_u32(os, 1);
        write_f32_block(os, b.data(), static_cast<i64>(b.size()));
    }
    if (!os) throw IoError("checkpoint: write failed for '" + path.string() + "'");
}

LayerGraph<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path.string() + "'");
    char magic[8];
    if (!is.read(magic, 8)) throw IoError("checkpoint: truncated header");
    if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = read_u32(is);
    if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));

    LayerGraph<float> graph;
    auto [input_shape, layers] = parse_graph_text(read_string(is));
    graph.input_shape = input_shape;
    graph.layers = std::move(layers);
    infer_shapes(graph.input_shape, graph.layers);
    graph.weights.resize(graph.layers.size());
    graph.biases.resize(graph.layers.size());

    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& spec = graph.layers[i];
        if (!spec.learnable()) continue;
        const std::string base = "layer" + std::to_string(i);

        const std::string wname = read_string(is);
        if (wname != base + ".weight") throw FormatError("checkpoint: expected block '" + base + ".weight'");
        if (read_u32(is) != 4) throw FormatError("checkpoint: rank must be 4");
        Shape4 ws{static_cast<i64>(read_u32(is)), static_cast<i64>(read_u32(is)),
                  static_cast<i64>(read_u32(is)), static_cast<i64>(read_u32(is))};
        const Shape4 expect = spec.kind == LayerKind::Fc
                                  ? Shape4{spec.out_width, spec.in_width, 1, 1}
                                  : Shape4{spec.out_channels, spec.in_channels, spec.kh, spec.kw};
        if (!(ws == expect)) throw FormatError("checkpoint: weight dims mismatch for " + base);
        Tensor4<float> w(ws);
        read_f32_block(is, w.data(), w.size());
        graph.weights[i] = std::move(w);

        const std::string bname = read_string(is);
        if (bname != base + ".bias") throw FormatError("checkpoint: expected block '" + base + ".bias'");
        if (read_u32(is) != 4) throw FormatError("checkpoint: rank must be 4");
        const i64 bn = static_cast<i64>(read_u32(is));
        if (read_u32(is) != 1 || read_u32(is) != 1 || read_u32(is) != 1) {
            throw FormatError("checkpoint: bias dims must be (n,1,1,1)");
        }
        if (bn != expect.batch) throw FormatError("checkpoint: bias count mismatch for " + base);
        graph.biases[i].resize(static_cast<std::size_t>(bn));
        read_f32_block(is, graph.biases[i].data(), bn);
    }
    if (!all_finite_params(graph)) throw DataError("checkpoint: non-finite parameters");
    return graph;
}

template <typename T>
bool all_finite_params(const LayerGraph<T>& graph) {
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        if (!graph.weights[i].empty() && !all_finite(graph.weights[i])) return false;
        for (T b : graph.biases[i]) {
            if (!std::isfinite(static_cast<double>(b))) return false;
        }
    }
    return true;
}

#define NSL_INSTANTIATE_GRAPH(T)                                                                            \
    template LayerGraph<T> build_digit_net(bool, bool);                                                     \
    template void init_params(LayerGraph<T>&, std::uint64_t);                                               \
    template i64 param_count(const LayerGraph<T>&);                                                         \
    template Tensor4<T> graph_forward(const LayerGraph<T>&, const Tensor4<T>&, ForwardTrace<T>*);           \
    template GraphGrads<T> graph_backward(const LayerGraph<T>&, const Tensor4<T>&, const ForwardTrace<T>&,  \
                                          const Tensor4<T>&, int);                                          \
    template void apply_sgd(LayerGraph<T>&, const GraphGrads<T>&, double);                                  \
    template EpochStats train_epoch(LayerGraph<T>&, const Tensor4<T>&, std::span<const int>,                \
                                    const TrainConfig&, int);                                               \
    template double evaluate_accuracy(const LayerGraph<T>&, const Tensor4<T>&, std::span<const int>, i64);  \
    template bool all_finite_params(const LayerGraph<T>&);

NSL_INSTANTIATE_GRAPH(float)
NSL_INSTANTIATE_GRAPH(double)
#undef NSL_INSTANTIATE_GRAPH

}  // namespace nsl
