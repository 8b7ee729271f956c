#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nslnet/layers.hpp"
#include "nslnet/nsl_layer.hpp"
#include "nslnet/tensor.hpp"

namespace nsl {

enum class LayerKind { Conv, Relu, MaxPool, Nsl, Nin, Concat, Flatten, Fc, Softmax };

// Upstream sentinel: the network input feeds this layer.
inline constexpr int kInputLayer = -1;

struct LayerSpec {
    LayerKind kind;
    i64 in_channels = 0, out_channels = 0, kh = 0, kw = 0;  // conv; nin is a 1x1 conv
    int window = 0, stride = 0;                             // maxpool
    int side = 0;                                           // nsl
    double epsilon = 0;                                     // nsl
    i64 in_width = 0, out_width = 0;                        // fc
    // Wiring: index of the producing layer (kInputLayer for the network
    // input). input_b is used by concat only.
    int input_a = kInputLayer;
    int input_b = kInputLayer;

    bool learnable() const {
        return kind == LayerKind::Conv || kind == LayerKind::Nin || kind == LayerKind::Fc;
    }
};

// Linear chain with an optional two-branch fork joined by a concat layer.
// Weights/biases are indexed by layer; non-learnable layers hold empty blocks.
template <typename T>
struct LayerGraph {
    Shape4 input_shape;  // batch extent is a placeholder (1)
    std::vector<LayerSpec> layers;
    std::vector<Tensor4<T>> weights;
    std::vector<std::vector<T>> biases;
};

// Per-layer output shapes for a batch-1 input; throws ShapeError when the
// chain does not connect.
std::vector<Shape4> infer_shapes(const Shape4& input_shape, const std::vector<LayerSpec>& layers);

// The digit-classification network:
// conv5x5->120, relu, pool2/2, [nsl 11x11 | parallel 1x1 nin 25 + concat],
// conv5x5->48, relu, pool2/2, fc 100, relu, fc 100, relu, fc 10, softmax.
// Without the similarity layer the first conv feeds conv2 directly and the
// parameter count is unchanged.
template <typename T>
LayerGraph<T> build_digit_net(bool with_nsl, bool with_nin);

// Xavier weights, zero biases; one derived stream per layer.
template <typename T>
void init_params(LayerGraph<T>& graph, std::uint64_t seed);

template <typename T>
i64 param_count(const LayerGraph<T>& graph);

template <typename T>
bool all_finite_params(const LayerGraph<T>& graph);

template <typename T>
struct ForwardTrace {
    std::vector<Tensor4<T>> acts;
    std::map<int, NslCache<T>> nsl_caches;
};

// Runs every layer; returns the last layer's output. A trace captures the
// per-layer activations needed by graph_backward.
template <typename T>
Tensor4<T> graph_forward(const LayerGraph<T>& graph, const Tensor4<T>& input, ForwardTrace<T>* trace = nullptr);

// Index of the layer whose output feeds the loss (the layer below the final
// softmax, or the last layer when no softmax is present).
int logits_layer(const std::vector<LayerSpec>& layers);

template <typename T>
struct GraphGrads {
    std::vector<Tensor4<T>> weights;
    std::vector<std::vector<T>> biases;
    Tensor4<T> input;
};

// Jacobian-transpose products for every parameter block and the input, given
// the gradient at the output of layer `top`.
template <typename T>
GraphGrads<T> graph_backward(const LayerGraph<T>& graph, const Tensor4<T>& input, const ForwardTrace<T>& trace,
                             const Tensor4<T>& grad_top, int top);

struct TrainConfig {
    i64 batch_size = 64;
    int epochs = 20;
    double lr0 = 0.01;
    // lr(epoch) = lr0 * gamma^max(0, epoch - decay_start), epoch counted from 1.
    int decay_start = 10;
    double decay_gamma = 0.5;
    std::uint64_t seed = 1;
};

double learning_rate(const TrainConfig& cfg, int epoch);

template <typename T>
void apply_sgd(LayerGraph<T>& graph, const GraphGrads<T>& grads, double lr);

struct EpochStats {
    double loss = 0;
    double accuracy = 0;
};

// One pass over the data: seeded shuffle, mini-batches, forward, loss,
// backward, SGD step.
template <typename T>
EpochStats train_epoch(LayerGraph<T>& graph, const Tensor4<T>& images, std::span<const int> labels,
                       const TrainConfig& cfg, int epoch);

template <typename T>
double evaluate_accuracy(const LayerGraph<T>& graph, const Tensor4<T>& images, std::span<const int> labels,
                         i64 batch_size = 256);

// Checkpoint container: magic "NSLCKPT\0", u32 version, length-prefixed
// architecture text, then per parameter block: length-prefixed name,
// u32 rank=4, four u32 dims, little-endian f32 payload.
void save_checkpoint(const LayerGraph<float>& graph, const std::filesystem::path& path);
LayerGraph<float> load_checkpoint(const std::filesystem::path& path);

// Architecture text round-trip (one canonical line per layer).
std::string describe_graph(const Shape4& input_shape, const std::vector<LayerSpec>& layers);
std::pair<Shape4, std::vector<LayerSpec>> parse_graph_text(const std::string& text);

}  // namespace nsl
