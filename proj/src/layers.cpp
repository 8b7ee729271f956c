#include "nslnet/layers.hpp"

#include <algorithm>
#include <cmath>

#include "nslnet/threads.hpp"

namespace nsl {

namespace {

struct ConvDims {
    i64 in_ch, out_ch, kh, kw, oh, ow, cols, rows;  // rows = in_ch*kh*kw, cols = oh*ow
};

ConvDims conv_dims(const Shape4& in, const Shape4& w) {
    if (w.channels != in.channels) {
        throw ShapeError("conv2d: weights expect " + std::to_string(w.channels) + " input channels, got " +
                         std::to_string(in.channels));
    }
    if (in.height < w.height || in.width < w.width) {
        throw ShapeError("conv2d: input " + in.to_string() + " smaller than kernel " + w.to_string());
    }
    ConvDims d;
    d.in_ch = in.channels;
    d.out_ch = w.batch;
    d.kh = w.height;
    d.kw = w.width;
    d.oh = in.height - w.height + 1;
    d.ow = in.width - w.width + 1;
    d.rows = d.in_ch * d.kh * d.kw;
    d.cols = d.oh * d.ow;
    return d;
}

// col(r, p): r = (ci*kh + ky)*kw + kx, p = y*ow + x.
template <typename T>
void im2col(const Tensor4<T>& input, i64 sample, const ConvDims& d, T* col) {
    for (i64 ci = 0; ci < d.in_ch; ++ci) {
        for (i64 ky = 0; ky < d.kh; ++ky) {
            for (i64 kx = 0; kx < d.kw; ++kx) {
                T* dst = col + ((ci * d.kh + ky) * d.kw + kx) * d.cols;
                for (i64 y = 0; y < d.oh; ++y) {
                    const T* src = input.data() + input.index(sample, ci, y + ky, kx);
                    for (i64 x = 0; x < d.ow; ++x) dst[y * d.ow + x] = src[x];
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, i64 sample, const ConvDims& d, Tensor4<T>& grad_input) {
    for (i64 ci = 0; ci < d.in_ch; ++ci) {
        for (i64 ky = 0; ky < d.kh; ++ky) {
            for (i64 kx = 0; kx < d.kw; ++kx) {
                const T* src = col + ((ci * d.kh + ky) * d.kw + kx) * d.cols;
                for (i64 y = 0; y < d.oh; ++y) {
                    T* dst = grad_input.data() + grad_input.index(sample, ci, y + ky, kx);
                    for (i64 x = 0; x < d.ow; ++x) dst[x] += src[y * d.ow + x];
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const Tensor4<T>& weights, const std::vector<T>& biases) {
    const ConvDims d = conv_dims(input.shape(), weights.shape());
    if (static_cast<i64>(biases.size()) != d.out_ch) {
        throw ShapeError("conv2d_forward: bias count " + std::to_string(biases.size()));
    }
    const i64 batch = input.shape().batch;
    Tensor4<T> out(Shape4{batch, d.out_ch, d.oh, d.ow});

    parallel_for(batch, [&](i64 b0, i64 b1) {
        std::vector<T> col(static_cast<std::size_t>(d.rows * d.cols));
        for (i64 b = b0; b < b1; ++b) {
            im2col(input, b, d, col.data());
            for (i64 o = 0; o < d.out_ch; ++o) {
                T* dst = out.data() + out.index(b, o, 0, 0);
                std::fill(dst, dst + d.cols, biases[static_cast<std::size_t>(o)]);
                const T* wrow = weights.data() + weights.index(o, 0, 0, 0);
                for (i64 r = 0; r < d.rows; ++r) {
                    const T w = wrow[r];
                    const T* c = col.data() + r * d.cols;
                    for (i64 p = 0; p < d.cols; ++p) dst[p] += w * c[p];
                }
            }
        }
    });
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Tensor4<T>& weights) {
    const ConvDims d = conv_dims(input.shape(), weights.shape());
    const i64 batch = input.shape().batch;
    const Shape4 want{batch, d.out_ch, d.oh, d.ow};
    if (!(upstream.shape() == want)) {
        throw ShapeError("conv2d_backward: upstream " + upstream.shape().to_string() + ", expected " +
                         want.to_string());
    }

    ConvGrads<T> g{Tensor4<T>(input.shape()), Tensor4<T>(weights.shape()),
                   std::vector<T>(static_cast<std::size_t>(d.out_ch), T(0))};

    // Weight/bias grads: samples accumulated in order, parallel across output
    // channels, so the reduction order is fixed for any thread count.
    {
        std::vector<T> col(static_cast<std::size_t>(d.rows * d.cols));
        for (i64 b = 0; b < batch; ++b) {
            im2col(input, b, d, col.data());
            parallel_for(d.out_ch, [&](i64 o0, i64 o1) {
                for (i64 o = o0; o < o1; ++o) {
                    const T* up = upstream.data() + upstream.index(b, o, 0, 0);
                    T* gw = g.weights.data() + g.weights.index(o, 0, 0, 0);
                    for (i64 r = 0; r < d.rows; ++r) {
                        const T* c = col.data() + r * d.cols;
                        T acc = T(0);
                        for (i64 p = 0; p < d.cols; ++p) acc += up[p] * c[p];
                        gw[r] += acc;
                    }
                    T acc = T(0);
                    for (i64 p = 0; p < d.cols; ++p) acc += up[p];
                    g.biases[static_cast<std::size_t>(o)] += acc;
                }
            });
        }
    }

    // Input grads are per-sample independent.
    parallel_for(batch, [&](i64 b0, i64 b1) {
        std::vector<T> gcol(static_cast<std::size_t>(d.rows * d.cols));
        for (i64 b = b0; b < b1; ++b) {
            std::fill(gcol.begin(), gcol.end(), T(0));
            for (i64 o = 0; o < d.out_ch; ++o) {
                const T* up = upstream.data() + upstream.index(b, o, 0, 0);
                const T* wrow = weights.data() + weights.index(o, 0, 0, 0);
                for (i64 r = 0; r < d.rows; ++r) {
                    const T w = wrow[r];
                    T* gc = gcol.data() + r * d.cols;
                    for (i64 p = 0; p < d.cols; ++p) gc[p] += w * up[p];
                }
            }
            col2im_add(gcol.data(), b, d, g.input);
        }
    });
    return g;
}

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& input) {
    Tensor4<T> out(input.shape());
    for (i64 i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
    return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& upstream, const Tensor4<T>& input) {
    if (!(upstream.shape() == input.shape())) throw ShapeError("relu_backward: shape mismatch");
    Tensor4<T> out(input.shape());
    for (i64 i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? upstream[i] : T(0);
    return out;
}

template <typename T>
Tensor4<T> maxpool_forward(const Tensor4<T>& input, int window, int stride) {
    if (window < 1 || stride < 1) throw ParamError("maxpool: window and stride must be >= 1");
    const Shape4& s = input.shape();
    if (s.height < window || s.width < window) throw ShapeError("maxpool: input smaller than window");
    const i64 oh = (s.height - window) / stride + 1;
    const i64 ow = (s.width - window) / stride + 1;
    Tensor4<T> out(Shape4{s.batch, s.channels, oh, ow});

    parallel_for(s.batch * s.channels, [&](i64 w0, i64 w1) {
        for (i64 w = w0; w < w1; ++w) {
            const i64 b = w / s.channels;
            const i64 c = w % s.channels;
            for (i64 y = 0; y < oh; ++y) {
                for (i64 x = 0; x < ow; ++x) {
                    T best = input(b, c, y * stride, x * stride);
                    for (i64 ky = 0; ky < window; ++ky) {
                        const T* row = input.data() + input.index(b, c, y * stride + ky, x * stride);
                        for (i64 kx = 0; kx < window; ++kx) best = std::max(best, row[kx]);
                    }
                    out(b, c, y, x) = best;
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor4<T> maxpool_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, int window, int stride) {
    const Shape4& s = input.shape();
    const i64 oh = (s.height - window) / stride + 1;
    const i64 ow = (s.width - window) / stride + 1;
    if (!(upstream.shape() == Shape4{s.batch, s.channels, oh, ow})) {
        throw ShapeError("maxpool_backward: upstream shape mismatch");
    }
    Tensor4<T> grad(s);

    parallel_for(s.batch * s.channels, [&](i64 w0, i64 w1) {
        for (i64 w = w0; w < w1; ++w) {
            const i64 b = w / s.channels;
            const i64 c = w % s.channels;
            for (i64 y = 0; y < oh; ++y) {
                for (i64 x = 0; x < ow; ++x) {
                    i64 by = y * stride, bx = x * stride;
                    T best = input(b, c, by, bx);
                    for (i64 ky = 0; ky < window; ++ky) {
                        for (i64 kx = 0; kx < window; ++kx) {
                            const T v = input(b, c, y * stride + ky, x * stride + kx);
                            if (v > best) {
                                best = v;
                                by = y * stride + ky;
                                bx = x * stride + kx;
                            }
                        }
                    }
                    grad(b, c, by, bx) += upstream(b, c, y, x);
                }
            }
        }
    });
    return grad;
}

template <typename T>
Tensor4<T> flatten(const Tensor4<T>& input) {
    const Shape4& s = input.shape();
    return input.reshaped(Shape4{s.batch, s.channels * s.height * s.width, 1, 1});
}

template <typename T>
Tensor4<T> fc_forward(const Tensor4<T>& input, const Tensor4<T>& weights, const std::vector<T>& biases) {
    const Shape4& s = input.shape();
    const i64 in_w = s.channels;
    const i64 out_w = weights.shape().batch;
    if (s.height != 1 || s.width != 1 || weights.shape().channels != in_w) {
        throw ShapeError("fc_forward: input " + s.to_string() + " vs weights " + weights.shape().to_string());
    }
    if (static_cast<i64>(biases.size()) != out_w) throw ShapeError("fc_forward: bias count");

    Tensor4<T> out(Shape4{s.batch, out_w, 1, 1});
    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 b = b0; b < b1; ++b) {
            const T* in = input.data() + input.index(b, 0, 0, 0);
            T* dst = out.data() + out.index(b, 0, 0, 0);
            for (i64 o = 0; o < out_w; ++o) {
                const T* w = weights.data() + weights.index(o, 0, 0, 0);
                T acc = biases[static_cast<std::size_t>(o)];
                for (i64 i = 0; i < in_w; ++i) acc += w[i] * in[i];
                dst[o] = acc;
            }
        }
    });
    return out;
}

template <typename T>
FcGrads<T> fc_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Tensor4<T>& weights) {
    const Shape4& s = input.shape();
    const i64 in_w = s.channels;
    const i64 out_w = weights.shape().batch;
    if (!(upstream.shape() == Shape4{s.batch, out_w, 1, 1})) throw ShapeError("fc_backward: upstream shape");

    FcGrads<T> g{Tensor4<T>(s), Tensor4<T>(weights.shape()),
                 std::vector<T>(static_cast<std::size_t>(out_w), T(0))};

    parallel_for(out_w, [&](i64 o0, i64 o1) {
        for (i64 o = o0; o < o1; ++o) {
            T* gw = g.weights.data() + g.weights.index(o, 0, 0, 0);
            T gb = T(0);
            for (i64 b = 0; b < s.batch; ++b) {
                const T u = upstream(b, o, 0, 0);
                const T* in = input.data() + input.index(b, 0, 0, 0);
                for (i64 i = 0; i < in_w; ++i) gw[i] += u * in[i];
                gb += u;
            }
            g.biases[static_cast<std::size_t>(o)] = gb;
        }
    });

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 b = b0; b < b1; ++b) {
            const T* up = upstream.data() + upstream.index(b, 0, 0, 0);
            T* gi = g.input.data() + g.input.index(b, 0, 0, 0);
            for (i64 o = 0; o < out_w; ++o) {
                const T u = up[o];
                const T* w = weights.data() + weights.index(o, 0, 0, 0);
                for (i64 i = 0; i < in_w; ++i) gi[i] += u * w[i];
            }
        }
    });
    return g;
}

template <typename T>
Tensor4<T> softmax_forward(const Tensor4<T>& logits) {
    const Shape4& s = logits.shape();
    if (s.height != 1 || s.width != 1) throw ShapeError("softmax_forward: expected (B, K, 1, 1)");
    Tensor4<T> out(s);
    for (i64 b = 0; b < s.batch; ++b) {
        const T* in = logits.data() + logits.index(b, 0, 0, 0);
        T* dst = out.data() + out.index(b, 0, 0, 0);
        T mx = in[0];
        for (i64 k = 1; k < s.channels; ++k) mx = std::max(mx, in[k]);
        T denom = T(0);
        for (i64 k = 0; k < s.channels; ++k) {
            dst[k] = std::exp(in[k] - mx);
            denom += dst[k];
        }
        for (i64 k = 0; k < s.channels; ++k) dst[k] /= denom;
    }
    return out;
}

template <typename T>
LossResult<T> softmax_nll_loss(const Tensor4<T>& logits, std::span<const int> labels) {
    const Shape4& s = logits.shape();
    if (static_cast<i64>(labels.size()) != s.batch) throw ShapeError("softmax_nll_loss: label count");
    for (int l : labels) {
        if (l < 0 || l >= s.channels) {
            throw DataError("softmax_nll_loss: label " + std::to_string(l) + " outside [0, " +
                            std::to_string(s.channels) + ")");
        }
    }
    LossResult<T> r;
    r.grad_logits = softmax_forward(logits);
    double loss = 0;
    const double inv_batch = 1.0 / static_cast<double>(s.batch);
    for (i64 b = 0; b < s.batch; ++b) {
        T* row = r.grad_logits.data() + r.grad_logits.index(b, 0, 0, 0);
        const i64 label = labels[static_cast<std::size_t>(b)];
        const double p = std::max(static_cast<double>(row[label]), 1e-300);
        loss -= std::log(p);
        row[label] -= T(1);
        for (i64 k = 0; k < s.channels; ++k) row[k] = static_cast<T>(row[k] * inv_batch);
    }
    r.loss = loss * inv_batch;
    return r;
}

template <typename T>
Tensor4<T> xavier_init(Shape4 shape, i64 fan_in, i64 fan_out, Rng& rng) {
    if (fan_in < 1 || fan_out < 1) throw ParamError("xavier_init: fans must be >= 1");
    // Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)) has variance
    // 2 / (fan_in + fan_out).
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor4<T> out(shape);
    for (i64 i = 0; i < out.size(); ++i) out[i] = static_cast<T>(rng.uniform(-a, a));
    return out;
}

template <typename T>
void sgd_step(Tensor4<T>& param, const Tensor4<T>& grad, double lr) {
    if (!(param.shape() == grad.shape())) throw ShapeError("sgd_step: param/grad shape mismatch");
    const T step = static_cast<T>(lr);
    for (i64 i = 0; i < param.size(); ++i) param[i] -= step * grad[i];
}

template <typename T>
void sgd_step(std::vector<T>& param, const std::vector<T>& grad, double lr) {
    if (param.size() != grad.size()) throw ShapeError("sgd_step: param/grad size mismatch");
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < param.size(); ++i) param[i] -= step * grad[i];
}

#define NSL_INSTANTIATE(T)                                                                               \
    template Tensor4<T> conv2d_forward(const Tensor4<T>&, const Tensor4<T>&, const std::vector<T>&);    \
    template ConvGrads<T> conv2d_backward(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&);     \
    template Tensor4<T> relu_forward(const Tensor4<T>&);                                                 \
    template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);                             \
    template Tensor4<T> maxpool_forward(const Tensor4<T>&, int, int);                                    \
    template Tensor4<T> maxpool_backward(const Tensor4<T>&, const Tensor4<T>&, int, int);                \
    template Tensor4<T> flatten(const Tensor4<T>&);                                                      \
    template Tensor4<T> fc_forward(const Tensor4<T>&, const Tensor4<T>&, const std::vector<T>&);         \
    template FcGrads<T> fc_backward(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&);            \
    template Tensor4<T> softmax_forward(const Tensor4<T>&);                                              \
    template LossResult<T> softmax_nll_loss(const Tensor4<T>&, std::span<const int>);                    \
    template Tensor4<T> xavier_init(Shape4, i64, i64, Rng&);                                             \
    template void sgd_step(Tensor4<T>&, const Tensor4<T>&, double);                                      \
    template void sgd_step(std::vector<T>&, const std::vector<T>&, double);

NSL_INSTANTIATE(float)
NSL_INSTANTIATE(double)
#undef NSL_INSTANTIATE

}  // namespace nsl
