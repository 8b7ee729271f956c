#include "nslnet/nsl_layer.hpp"

#include <cmath>

#include "nslnet/threads.hpp"

namespace nsl {

Neighborhood square_neighborhood(int side) {
    if (side < 3 || side % 2 == 0) {
        throw ParamError("square_neighborhood: side must be odd and >= 3, got " + std::to_string(side));
    }
    Neighborhood n;
    n.offsets.reserve(static_cast<std::size_t>(side) * side - 1);
    const int r = side / 2;
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            if (dy == 0 && dx == 0) continue;
            n.offsets.emplace_back(dy, dx);
        }
    }
    return n;
}

namespace {

template <typename T>
NslCache<T> build_cache(const Tensor4<T>& phi) {
    const Shape4 s = phi.shape();
    const i64 hw = s.pixels();

    NslCache<T> cache;
    cache.centered = Tensor4<T>(s);
    cache.centered_cl.assign(static_cast<std::size_t>(s.batch * hw * s.channels), T(0));
    cache.norms.assign(static_cast<std::size_t>(s.batch * hw), T(0));
    cache.mean.assign(static_cast<std::size_t>(s.batch * s.channels), T(0));

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        for (i64 b = b0; b < b1; ++b) {
            const std::vector<T> mean = spatial_channel_mean(phi, b);
            for (i64 c = 0; c < s.channels; ++c) {
                cache.mean[static_cast<std::size_t>(b * s.channels + c)] = mean[static_cast<std::size_t>(c)];
                const T* src = phi.data() + phi.index(b, c, 0, 0);
                T* dst = cache.centered.data() + cache.centered.index(b, c, 0, 0);
                T* cl = cache.centered_cl.data() + (b * hw) * s.channels + c;
                const T m = mean[static_cast<std::size_t>(c)];
                for (i64 p = 0; p < hw; ++p) {
                    const T v = src[p] - m;
                    dst[p] = v;
                    cl[p * s.channels] = v;
                }
            }
            const T* cl = cache.centered_cl.data() + b * hw * s.channels;
            T* nrm = cache.norms.data() + b * hw;
            for (i64 p = 0; p < hw; ++p) {
                T acc = T(0);
                const T* v = cl + p * s.channels;
                for (i64 c = 0; c < s.channels; ++c) acc += v[c] * v[c];
                nrm[p] = std::sqrt(acc);
            }
        }
    });
    return cache;
}

}  // namespace

template <typename T>
std::pair<Tensor4<T>, NslCache<T>> nsl_forward(const Tensor4<T>& phi, const NslConfig& cfg) {
    require_finite(phi, "nsl_forward");
    const Shape4 s = phi.shape();
    const i64 m = cfg.neighborhood.size();
    const i64 hw = s.pixels();
    const T eps = static_cast<T>(cfg.epsilon);

    NslCache<T> cache = build_cache(phi);
    Tensor4<T> psi(Shape4{s.batch, m, s.height, s.width});

    // One work item per (sample, output row); each output element is a single
    // contiguous channel dot against cached centered values.
    parallel_for(s.batch * s.height, [&](i64 w0, i64 w1) {
        for (i64 w = w0; w < w1; ++w) {
            const i64 b = w / s.height;
            const i64 y = w % s.height;
            const T* cl = cache.centered_cl.data() + b * hw * s.channels;
            const T* nrm = cache.norms.data() + b * hw;
            for (i64 k = 0; k < m; ++k) {
                const auto [dy, dx] = cfg.neighborhood.offsets[static_cast<std::size_t>(k)];
                T* out = psi.data() + psi.index(b, k, y, 0);
                const i64 ny = y + dy;
                if (ny < 0 || ny >= s.height) {
                    for (i64 x = 0; x < s.width; ++x) out[x] = T(0);
                    continue;
                }
                for (i64 x = 0; x < s.width; ++x) {
                    const i64 nx = x + dx;
                    if (nx < 0 || nx >= s.width) {
                        out[x] = T(0);
                        continue;
                    }
                    const T nc = nrm[y * s.width + x];
                    const T nn = nrm[ny * s.width + nx];
                    if (nc < eps || nn < eps) {
                        out[x] = T(0);
                        continue;
                    }
                    const T* vc = cl + (y * s.width + x) * s.channels;
                    const T* vn = cl + (ny * s.width + nx) * s.channels;
                    T dot = T(0);
                    for (i64 c = 0; c < s.channels; ++c) dot += vn[c] * vc[c];
                    out[x] = dot / (nn * nc);
                }
            }
        }
    });
    return {std::move(psi), std::move(cache)};
}

template <typename T>
Tensor4<T> nsl_backward(const Tensor4<T>& upstream, const NslCache<T>& cache, const NslConfig& cfg) {
    const Shape4 s = cache.centered.shape();
    const i64 m = cfg.neighborhood.size();
    const Shape4 want{s.batch, m, s.height, s.width};
    if (!(upstream.shape() == want)) {
        throw ShapeError("nsl_backward: upstream " + upstream.shape().to_string() + ", cache expects " +
                         want.to_string());
    }
    const i64 hw = s.pixels();
    const i64 ch = s.channels;
    const T eps = static_cast<T>(cfg.epsilon);

    Tensor4<T> grad(s);

    parallel_for(s.batch, [&](i64 b0, i64 b1) {
        std::vector<T> ghat(static_cast<std::size_t>(hw * ch));  // gradient wrt centered features, channel-last
        for (i64 b = b0; b < b1; ++b) {
            std::fill(ghat.begin(), ghat.end(), T(0));
            const T* cl = cache.centered_cl.data() + b * hw * ch;
            const T* nrm = cache.norms.data() + b * hw;

            for (i64 k = 0; k < m; ++k) {
                const auto [dy, dx] = cfg.neighborhood.offsets[static_cast<std::size_t>(k)];
                for (i64 y = 0; y < s.height; ++y) {
                    const i64 ny = y + dy;
                    if (ny < 0 || ny >= s.height) continue;
                    const T* up = upstream.data() + upstream.index(b, k, y, 0);
                    for (i64 x = 0; x < s.width; ++x) {
                        const i64 nx = x + dx;
                        if (nx < 0 || nx >= s.width) continue;
                        const T u = up[x];
                        if (u == T(0)) continue;
                        const i64 pc = y * s.width + x;
                        const i64 pn = ny * s.width + nx;
                        const T nc = nrm[pc];
                        const T nn = nrm[pn];
                        if (nc < eps || nn < eps) continue;

                        const T* vc = cl + pc * ch;
                        const T* vn = cl + pn * ch;
                        T dot = T(0);
                        for (i64 c = 0; c < ch; ++c) dot += vn[c] * vc[c];

                        const T inv = T(1) / (nn * nc);
                        // d psi / d f~(x): vn/(nn*nc) - dot * vc/(nn*nc^3)
                        const T cc = u * dot * inv / (nc * nc);
                        // d psi / d f~(x+v): vc/(nn*nc) - dot * vn/(nc*nn^3)
                        const T cn = u * dot * inv / (nn * nn);
                        const T ui = u * inv;
                        T* gc = ghat.data() + pc * ch;
                        T* gn = ghat.data() + pn * ch;
                        for (i64 c = 0; c < ch; ++c) {
                            gc[c] += ui * vn[c] - cc * vc[c];
                            gn[c] += ui * vc[c] - cn * vn[c];
                        }
                    }
                }
            }

            // Pull back through centering: g = ghat - spatial_mean(ghat).
            for (i64 c = 0; c < ch; ++c) {
                const T total = pairwise_sum_strided(ghat.data() + c, hw, ch);
                const T avg = total / static_cast<T>(hw);
                T* out = grad.data() + grad.index(b, c, 0, 0);
                const T* g = ghat.data() + c;
                for (i64 p = 0; p < hw; ++p) out[p] = g[p * ch] - avg;
            }
        }
    });
    return grad;
}

template <typename T>
Tensor4<T> nsl_forward_reference(const Tensor4<T>& phi, const NslConfig& cfg) {
    require_finite(phi, "nsl_forward_reference");
    const Shape4 s = phi.shape();
    const i64 m = cfg.neighborhood.size();
    const T eps = static_cast<T>(cfg.epsilon);

    Tensor4<T> psi(Shape4{s.batch, m, s.height, s.width});
    for (i64 b = 0; b < s.batch; ++b) {
        std::vector<T> mean(static_cast<std::size_t>(s.channels), T(0));
        for (i64 c = 0; c < s.channels; ++c) {
            T acc = T(0);
            for (i64 y = 0; y < s.height; ++y)
                for (i64 x = 0; x < s.width; ++x) acc += phi(b, c, y, x);
            mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(s.pixels());
        }
        for (i64 k = 0; k < m; ++k) {
            const auto [dy, dx] = cfg.neighborhood.offsets[static_cast<std::size_t>(k)];
            for (i64 y = 0; y < s.height; ++y) {
                for (i64 x = 0; x < s.width; ++x) {
                    const i64 ny = y + dy;
                    const i64 nx = x + dx;
                    if (ny < 0 || ny >= s.height || nx < 0 || nx >= s.width) {
                        psi(b, k, y, x) = T(0);
                        continue;
                    }
                    T dot = T(0), sq_n = T(0), sc = T(0);
                    for (i64 c = 0; c < s.channels; ++c) {
                        const T fc = phi(b, c, y, x) - mean[static_cast<std::size_t>(c)];
                        const T fn = phi(b, c, ny, nx) - mean[static_cast<std::size_t>(c)];
                        dot += fn * fc;
                        sq_n += fn * fn;
                        sc += fc * fc;
                    }
                    const T nn = std::sqrt(sq_n);
                    const T nc = std::sqrt(sc);
                    psi(b, k, y, x) = (nn < eps || nc < eps) ? T(0) : dot / (nn * nc);
                }
            }
        }
    }
    return psi;
}

template <typename T>
std::vector<T> nsl_center_term(const NslCache<T>& cache, const NslConfig& cfg, i64 sample, i64 y, i64 x,
                               i64 offset_index) {
    const Shape4 s = cache.centered.shape();
    if (sample < 0 || sample >= s.batch || y < 0 || y >= s.height || x < 0 || x >= s.width) {
        throw IndexError("nsl_center_term: pixel out of grid");
    }
    if (offset_index < 0 || offset_index >= cfg.neighborhood.size()) {
        throw IndexError("nsl_center_term: offset index out of range");
    }
    const auto [dy, dx] = cfg.neighborhood.offsets[static_cast<std::size_t>(offset_index)];
    const i64 ny = y + dy;
    const i64 nx = x + dx;
    if (ny < 0 || ny >= s.height || nx < 0 || nx >= s.width) {
        throw DegeneratePixelError("nsl_center_term: neighbor outside the grid");
    }
    const i64 hw = s.pixels();
    const i64 ch = s.channels;
    const T* cl = cache.centered_cl.data() + sample * hw * ch;
    const T* vc = cl + (y * s.width + x) * ch;
    const T* vn = cl + (ny * s.width + nx) * ch;
    const T nc = cache.norms[static_cast<std::size_t>(sample * hw + y * s.width + x)];
    const T nn = cache.norms[static_cast<std::size_t>(sample * hw + ny * s.width + nx)];
    const T eps = static_cast<T>(cfg.epsilon);
    if (nc < eps || nn < eps) {
        throw DegeneratePixelError("nsl_center_term: centered norm below epsilon");
    }

    T dot = T(0);
    for (i64 c = 0; c < ch; ++c) dot += vn[c] * vc[c];
    const T diag = T(1) - T(1) / static_cast<T>(hw);
    const T inv = T(1) / (nn * nc);
    std::vector<T> term(static_cast<std::size_t>(ch));
    for (i64 c = 0; c < ch; ++c) {
        term[static_cast<std::size_t>(c)] = diag * (vn[c] * inv - dot * vc[c] * inv / (nc * nc));
    }
    return term;
}

template std::pair<Tensor4<float>, NslCache<float>> nsl_forward(const Tensor4<float>&, const NslConfig&);
template std::pair<Tensor4<double>, NslCache<double>> nsl_forward(const Tensor4<double>&, const NslConfig&);
template Tensor4<float> nsl_backward(const Tensor4<float>&, const NslCache<float>&, const NslConfig&);
template Tensor4<double> nsl_backward(const Tensor4<double>&, const NslCache<double>&, const NslConfig&);
template Tensor4<float> nsl_forward_reference(const Tensor4<float>&, const NslConfig&);
template Tensor4<double> nsl_forward_reference(const Tensor4<double>&, const NslConfig&);
template std::vector<float> nsl_center_term(const NslCache<float>&, const NslConfig&, i64, i64, i64, i64);
template std::vector<double> nsl_center_term(const NslCache<double>&, const NslConfig&, i64, i64, i64, i64);

}  // namespace nsl
