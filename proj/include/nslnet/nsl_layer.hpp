#pragma once

#include <utility>
#include <vector>

#include "nslnet/tensor.hpp"

namespace nsl {

// Ordered set of non-zero spatial offsets (dy, dx) defining which neighbors
// are compared against the center pixel.
struct Neighborhood {
    std::vector<std::pair<int, int>> offsets;

    i64 size() const { return static_cast<i64>(offsets.size()); }
};

// Offsets of a side x side square around the center, center excluded,
// enumerated row-major top-left to bottom-right. side odd, >= 3.
Neighborhood square_neighborhood(int side);

template <typename T>
constexpr T default_norm_floor() {
    if constexpr (sizeof(T) == 4) {
        return T(1e-6);
    } else {
        return T(1e-8);
    }
}

struct NslConfig {
    Neighborhood neighborhood;
    // Floor on centered-feature norms; similarity and gradient are 0 below it.
    double epsilon;

    NslConfig(Neighborhood n, double eps) : neighborhood(std::move(n)), epsilon(eps) {
        if (!(epsilon > 0)) throw ParamError("NslConfig: epsilon must be > 0");
    }
};

// Per-sample quantities shared between forward and backward:
//   centered     f~ = f - mean(f), laid out like the input (b,c,h,w)
//   centered_cl  the same values channel-last (b,h,w,c) for contiguous dots
//   norms        ||f~(x)|| per (b,y,x)
//   mean         per-sample channel means
template <typename T>
struct NslCache {
    Tensor4<T> centered;
    std::vector<T> centered_cl;
    std::vector<T> norms;
    std::vector<T> mean;
};

// Similarity map: for every offset v, output channel k_v holds
// <f~(x+v), f~(x)> / (||f~(x+v)|| * ||f~(x)||), 0 when either norm is below
// epsilon or x+v falls outside the grid. Output shape (batch, m, H, W).
template <typename T>
std::pair<Tensor4<T>, NslCache<T>> nsl_forward(const Tensor4<T>& phi, const NslConfig& cfg);

// Exact gradient of the composed map phi -> psi: center-pixel terms,
// neighbor-pixel terms, and the mean-coupling from the centering step.
template <typename T>
Tensor4<T> nsl_backward(const Tensor4<T>& upstream, const NslCache<T>& cache, const NslConfig& cfg);

// Unoptimized transcription of the similarity definition; testing baseline.
// Recomputes norms for every output element.
template <typename T>
Tensor4<T> nsl_forward_reference(const Tensor4<T>& phi, const NslConfig& cfg);

// Closed-form d psi_v(x) / d phi(x) restricted to the dependence through
// f~(x), including the (1 - 1/|grid|) diagonal factor of the centering
// Jacobian. Returns one value per input channel. Throws DegeneratePixelError
// where the norm floor was hit and at out-of-grid neighbors.
template <typename T>
std::vector<T> nsl_center_term(const NslCache<T>& cache, const NslConfig& cfg, i64 sample, i64 y, i64 x,
                               i64 offset_index);

}  // namespace nsl
