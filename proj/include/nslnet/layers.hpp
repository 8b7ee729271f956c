#pragma once

#include <span>
#include <vector>

#include "nslnet/rng.hpp"
#include "nslnet/tensor.hpp"

namespace nsl {

// Valid (no padding) stride-1 cross-correlation.
// weights (out_ch, in_ch, kh, kw), biases length out_ch,
// output (batch, out_ch, H-kh+1, W-kw+1).
template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const Tensor4<T>& weights, const std::vector<T>& biases);

template <typename T>
struct ConvGrads {
    Tensor4<T> input;
    Tensor4<T> weights;
    std::vector<T> biases;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Tensor4<T>& weights);

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& input);

// Gates upstream by input > 0.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& upstream, const Tensor4<T>& input);

// Window/stride max pooling; trailing remainder rows/cols are dropped.
template <typename T>
Tensor4<T> maxpool_forward(const Tensor4<T>& input, int window, int stride);

// Routes each upstream value to the argmax of its window
// (first occurrence in row-major scan on ties).
template <typename T>
Tensor4<T> maxpool_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, int window, int stride);

// (B, C, H, W) -> (B, C*H*W, 1, 1); payload order unchanged.
template <typename T>
Tensor4<T> flatten(const Tensor4<T>& input);

// input (B, in, 1, 1), weights (out, in, 1, 1), output (B, out, 1, 1).
template <typename T>
Tensor4<T> fc_forward(const Tensor4<T>& input, const Tensor4<T>& weights, const std::vector<T>& biases);

template <typename T>
struct FcGrads {
    Tensor4<T> input;
    Tensor4<T> weights;
    std::vector<T> biases;
};

template <typename T>
FcGrads<T> fc_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Tensor4<T>& weights);

// Softmax over the channel dimension of (B, K, 1, 1).
template <typename T>
Tensor4<T> softmax_forward(const Tensor4<T>& logits);

template <typename T>
struct LossResult {
    double loss = 0;
    Tensor4<T> grad_logits;
};

// Mean over the batch of -log softmax(logits)[label];
// grad = (softmax - onehot) / batch.
template <typename T>
LossResult<T> softmax_nll_loss(const Tensor4<T>& logits, std::span<const int> labels);

// Zero-mean uniform draws with variance 2 / (fan_in + fan_out).
template <typename T>
Tensor4<T> xavier_init(Shape4 shape, i64 fan_in, i64 fan_out, Rng& rng);

// p <- p - lr * g
template <typename T>
void sgd_step(Tensor4<T>& param, const Tensor4<T>& grad, double lr);

template <typename T>
void sgd_step(std::vector<T>& param, const std::vector<T>& grad, double lr);

}  // namespace nsl
