#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "nslnet/error.hpp"

namespace nsl {

using i64 = std::int64_t;

// Dense 4-D extents: (batch, channels, height, width).
struct Shape4 {
    i64 batch = 0;
    i64 channels = 0;
    i64 height = 0;
    i64 width = 0;

    bool operator==(const Shape4&) const = default;

    i64 pixels() const { return height * width; }

    // Element count with overflow/positivity validation.
    i64 checked_elems() const {
        const i64 dims[4] = {batch, channels, height, width};
        i64 n = 1;
        for (i64 d : dims) {
            if (d < 1) throw SizeError("Shape4: extents must be >= 1, got " + to_string());
            if (n > std::numeric_limits<i64>::max() / d) {
                throw SizeError("Shape4: element count overflows: " + to_string());
            }
            n *= d;
        }
        return n;
    }

    i64 elems() const { return batch * channels * height * width; }

    std::string to_string() const {
        return "(" + std::to_string(batch) + "," + std::to_string(channels) + "," +
               std::to_string(height) + "," + std::to_string(width) + ")";
    }
};

// Contiguous row-major (batch, channel, row, column) tensor.
template <typename T>
class Tensor4 {
public:
    Tensor4() = default;

    explicit Tensor4(Shape4 shape, T fill = T(0))
        : shape_(shape), data_(static_cast<std::size_t>(shape.checked_elems()), fill) {}

    const Shape4& shape() const { return shape_; }
    i64 size() const { return static_cast<i64>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    // flat index = ((b*C + c)*H + y)*W + x
    i64 index(i64 b, i64 c, i64 y, i64 x) const {
        return ((b * shape_.channels + c) * shape_.height + y) * shape_.width + x;
    }

    T& operator()(i64 b, i64 c, i64 y, i64 x) { return data_[static_cast<std::size_t>(index(b, c, y, x))]; }
    T operator()(i64 b, i64 c, i64 y, i64 x) const { return data_[static_cast<std::size_t>(index(b, c, y, x))]; }

    T& operator[](i64 i) { return data_[static_cast<std::size_t>(i)]; }
    T operator[](i64 i) const { return data_[static_cast<std::size_t>(i)]; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    // Reinterprets the extents without touching the payload.
    Tensor4<T> reshaped(Shape4 s) const {
        if (s.checked_elems() != size()) {
            throw ShapeError("reshape " + shape_.to_string() + " -> " + s.to_string());
        }
        Tensor4<T> out = *this;
        out.shape_ = s;
        return out;
    }

private:
    Shape4 shape_;
    std::vector<T> data_;
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

template <typename T>
Tensor4<T> tensor_new(Shape4 shape, T fill) {
    return Tensor4<T>(shape, fill);
}

// Fixed-tree pairwise summation: the reduction order depends only on n,
// never on thread count.
template <typename T>
T pairwise_sum(const T* p, i64 n) {
    if (n <= 8) {
        T s = T(0);
        for (i64 i = 0; i < n; ++i) s += p[i];
        return s;
    }
    const i64 half = n / 2;
    return pairwise_sum(p, half) + pairwise_sum(p + half, n - half);
}

// Strided variant for walking one channel of a (b,c,h,w) tensor.
template <typename T>
T pairwise_sum_strided(const T* p, i64 n, i64 stride) {
    if (n <= 8) {
        T s = T(0);
        for (i64 i = 0; i < n; ++i) s += p[i * stride];
        return s;
    }
    const i64 half = n / 2;
    return pairwise_sum_strided(p, half, stride) + pairwise_sum_strided(p + half * stride, n - half, stride);
}

// Per-channel mean over the spatial grid of one sample.
template <typename T>
std::vector<T> spatial_channel_mean(const Tensor4<T>& t, i64 sample) {
    const Shape4& s = t.shape();
    if (sample < 0 || sample >= s.batch) {
        throw IndexError("spatial_channel_mean: sample " + std::to_string(sample) + " out of range for " +
                         s.to_string());
    }
    const i64 hw = s.pixels();
    std::vector<T> mean(static_cast<std::size_t>(s.channels));
    for (i64 c = 0; c < s.channels; ++c) {
        const T* plane = t.data() + t.index(sample, c, 0, 0);
        mean[static_cast<std::size_t>(c)] = pairwise_sum(plane, hw) / static_cast<T>(hw);
    }
    return mean;
}

// Elementwise |a - b| <= tol_abs + tol_rel * |b|.
template <typename T>
bool tensor_close(const Tensor4<T>& a, const Tensor4<T>& b, double tol_abs, double tol_rel) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError("tensor_close: " + a.shape().to_string() + " vs " + b.shape().to_string());
    }
    for (i64 i = 0; i < a.size(); ++i) {
        const double da = static_cast<double>(a[i]);
        const double db = static_cast<double>(b[i]);
        if (!(std::abs(da - db) <= tol_abs + tol_rel * std::abs(db))) return false;
    }
    return true;
}

template <typename To, typename From>
Tensor4<To> tensor_cast(const Tensor4<From>& t) {
    Tensor4<To> out(t.shape());
    for (i64 i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
    return out;
}

template <typename T>
bool all_finite(const Tensor4<T>& t) {
    for (i64 i = 0; i < t.size(); ++i) {
        if (!std::isfinite(static_cast<double>(t[i]))) return false;
    }
    return true;
}

template <typename T>
void require_finite(const Tensor4<T>& t, const char* what) {
    if (!all_finite(t)) throw DataError(std::string(what) + ": non-finite values in input");
}

}  // namespace nsl
