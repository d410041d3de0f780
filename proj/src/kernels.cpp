#include "morphldm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace morphldm::kernels {
namespace {

// Sampling stencil of one point: 2^D corners with multilinear weights plus the
// partial derivative of each weight with respect to each sampling coordinate.
template <class T>
struct Stencil {
    int ncorners = 0;
    std::array<int64_t, 8> offset{};
    std::array<T, 8> weight{};
    std::array<std::array<T, 3>, 8> dweight{};  // [corner][axis]
};

template <class T>
inline void make_stencil(const GridShape& shape, const std::array<int64_t, 3>& strides,
                         const T* x, Stencil<T>& st) {
    std::array<int64_t, 3> lo{}, hi{};
    std::array<T, 3> frac{};
    std::array<bool, 3> inside{};
    for (int d = 0; d < shape.dims; ++d) {
        const T maxc = static_cast<T>(shape.size[d] - 1);
        T c = x[d];
        inside[d] = c >= T(0) && c <= maxc;
        c = std::clamp(c, T(0), maxc);
        int64_t i0 = static_cast<int64_t>(std::floor(c));
        i0 = std::min<int64_t>(i0, shape.size[d] - 1);
        lo[d] = i0;
        hi[d] = std::min<int64_t>(i0 + 1, shape.size[d] - 1);
        frac[d] = c - static_cast<T>(i0);
    }
    st.ncorners = 1 << shape.dims;
    for (int k = 0; k < st.ncorners; ++k) {
        int64_t off = 0;
        T w = 1;
        for (int d = 0; d < shape.dims; ++d) {
            const bool up = (k >> d) & 1;
            off += (up ? hi[d] : lo[d]) * strides[d];
            w *= up ? frac[d] : T(1) - frac[d];
        }
        st.offset[k] = off;
        st.weight[k] = w;
        for (int a = 0; a < shape.dims; ++a) {
            if (!inside[a]) {
                st.dweight[k][a] = 0;
                continue;
            }
            T dw = ((k >> a) & 1) ? T(1) : T(-1);
            for (int d = 0; d < shape.dims; ++d) {
                if (d == a) continue;
                dw *= ((k >> d) & 1) ? frac[d] : T(1) - frac[d];
            }
            st.dweight[k][a] = dw;
        }
    }
}

inline std::array<int64_t, 3> unravel(int64_t v, const GridShape& shape) {
    std::array<int64_t, 3> idx{0, 0, 0};
    for (int d = shape.dims - 1; d >= 0; --d) {
        idx[d] = v % shape.size[d];
        v /= shape.size[d];
    }
    return idx;
}

template <class T>
inline void sample_point(const T* disp_n, int64_t v, int64_t nvox, const GridShape& shape,
                         const std::array<int64_t, 3>& strides, Stencil<T>& st) {
    const auto idx = unravel(v, shape);
    std::array<T, 3> x{};
    for (int d = 0; d < shape.dims; ++d) x[d] = static_cast<T>(idx[d]) + disp_n[d * nvox + v];
    make_stencil(shape, strides, x.data(), st);
}

// Forward differences along `axis`, zero at the last index.
template <class T>
inline T forward_diff(const T* comp, int64_t v, const std::array<int64_t, 3>& idx, int axis,
                      const GridShape& shape, const std::array<int64_t, 3>& strides) {
    if (idx[axis] + 1 >= shape.size[axis]) return T(0);
    return comp[v + strides[axis]] - comp[v];
}

// d(p + u(p))_d / dp_a with central differences inside and one-sided at the border.
template <class T>
inline T deformation_partial(const T* comp, int64_t v, const std::array<int64_t, 3>& idx,
                             int axis, const GridShape& shape,
                             const std::array<int64_t, 3>& strides) {
    const int64_t n = shape.size[axis];
    const int64_t s = strides[axis];
    if (n < 2) return T(0);
    if (idx[axis] == 0) return comp[v + s] - comp[v];
    if (idx[axis] == n - 1) return comp[v] - comp[v - s];
    return (comp[v + s] - comp[v - s]) / T(2);
}

template <class T>
inline T det(const std::array<std::array<T, 3>, 3>& m, int dims) {
    if (dims == 1) return m[0][0];
    if (dims == 2) return m[0][0] * m[1][1] - m[0][1] * m[1][0];
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

template <class T>
inline T jacobian_at(const T* disp_n, int64_t v, int64_t nvox, const GridShape& shape,
                     const std::array<int64_t, 3>& strides) {
    const auto idx = unravel(v, shape);
    std::array<std::array<T, 3>, 3> m{};
    for (int d = 0; d < shape.dims; ++d) {
        const T* comp = disp_n + d * nvox;
        for (int a = 0; a < shape.dims; ++a) {
            m[d][a] = (d == a ? T(1) : T(0)) + deformation_partial(comp, v, idx, a, shape, strides);
        }
    }
    return det(m, shape.dims);
}

GridShape filtered_shape(const GridShape& shape, int ntaps) {
    GridShape out = shape;
    for (int d = 0; d < shape.dims; ++d) out.size[d] = shape.size[d] - (ntaps - 1);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// serial reference
// ---------------------------------------------------------------------------
namespace serial {

template <class T>
void warp_forward(const T* image, const T* disp, T* out, int64_t batch, int64_t channels,
                  const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    Stencil<T> st;
    for (int64_t n = 0; n < batch; ++n) {
        const T* disp_n = disp + n * shape.dims * nvox;
        for (int64_t v = 0; v < nvox; ++v) {
            sample_point(disp_n, v, nvox, shape, strides, st);
            for (int64_t c = 0; c < channels; ++c) {
                const T* plane = image + (n * channels + c) * nvox;
                T acc = 0;
                for (int k = 0; k < st.ncorners; ++k) acc += st.weight[k] * plane[st.offset[k]];
                out[(n * channels + c) * nvox + v] = acc;
            }
        }
    }
}

template <class T>
void warp_backward(const T* image, const T* disp, const T* grad_out, T* grad_image,
                   T* grad_disp, int64_t batch, int64_t channels, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    std::fill(grad_image, grad_image + batch * channels * nvox, T(0));
    std::fill(grad_disp, grad_disp + batch * shape.dims * nvox, T(0));
    Stencil<T> st;
    for (int64_t n = 0; n < batch; ++n) {
        const T* disp_n = disp + n * shape.dims * nvox;
        for (int64_t v = 0; v < nvox; ++v) {
            sample_point(disp_n, v, nvox, shape, strides, st);
            for (int64_t c = 0; c < channels; ++c) {
                const int64_t base = (n * channels + c) * nvox;
                const T g = grad_out[base + v];
                for (int k = 0; k < st.ncorners; ++k) {
                    grad_image[base + st.offset[k]] += g * st.weight[k];
                    for (int a = 0; a < shape.dims; ++a) {
                        grad_disp[(n * shape.dims + a) * nvox + v] +=
                            g * st.dweight[k][a] * image[base + st.offset[k]];
                    }
                }
            }
        }
    }
}

template <class T>
double magnitude_forward(const T* disp, int64_t batch, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    double total = 0;
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t v = 0; v < nvox; ++v) {
            double sq = 0;
            for (int d = 0; d < shape.dims; ++d) {
                const double u = disp[(n * shape.dims + d) * nvox + v];
                sq += u * u;
            }
            total += std::sqrt(sq);
        }
    }
    return total / static_cast<double>(batch * nvox);
}

template <class T>
void magnitude_backward(const T* disp, double grad_scale, T* grad_disp, int64_t batch,
                        const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const double scale = grad_scale / static_cast<double>(batch * nvox);
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t v = 0; v < nvox; ++v) {
            double sq = 0;
            for (int d = 0; d < shape.dims; ++d) {
                const double u = disp[(n * shape.dims + d) * nvox + v];
                sq += u * u;
            }
            const double norm = std::sqrt(sq);
            for (int d = 0; d < shape.dims; ++d) {
                const int64_t i = (n * shape.dims + d) * nvox + v;
                grad_disp[i] = norm > 0 ? static_cast<T>(scale * disp[i] / norm) : T(0);
            }
        }
    }
}

template <class T>
double gradient_penalty_forward(const T* disp, int64_t batch, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    double total = 0;
    for (int64_t n = 0; n < batch; ++n) {
        for (int c = 0; c < shape.dims; ++c) {
            const T* comp = disp + (n * shape.dims + c) * nvox;
            for (int64_t v = 0; v < nvox; ++v) {
                const auto idx = unravel(v, shape);
                double sq = 0;
                for (int a = 0; a < shape.dims; ++a) {
                    const double g = forward_diff(comp, v, idx, a, shape, strides);
                    sq += g * g;
                }
                total += std::sqrt(sq);
            }
        }
    }
    return total / static_cast<double>(batch * shape.dims * nvox);
}

template <class T>
void gradient_penalty_backward(const T* disp, double grad_scale, T* grad_disp, int64_t batch,
                               const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    const double scale = grad_scale / static_cast<double>(batch * shape.dims * nvox);
    std::fill(grad_disp, grad_disp + batch * shape.dims * nvox, T(0));
    for (int64_t n = 0; n < batch; ++n) {
        for (int c = 0; c < shape.dims; ++c) {
            const int64_t base = (n * shape.dims + c) * nvox;
            const T* comp = disp + base;
            for (int64_t v = 0; v < nvox; ++v) {
                const auto idx = unravel(v, shape);
                std::array<double, 3> g{};
                double sq = 0;
                for (int a = 0; a < shape.dims; ++a) {
                    g[a] = forward_diff(comp, v, idx, a, shape, strides);
                    sq += g[a] * g[a];
                }
                const double norm = std::sqrt(sq);
                if (norm == 0) continue;
                for (int a = 0; a < shape.dims; ++a) {
                    if (idx[a] + 1 >= shape.size[a]) continue;
                    const double h = scale * g[a] / norm;
                    grad_disp[base + v + strides[a]] += static_cast<T>(h);
                    grad_disp[base + v] -= static_cast<T>(h);
                }
            }
        }
    }
}

template <class T>
void jacobian_determinant(const T* disp, T* out, int64_t batch, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    for (int64_t n = 0; n < batch; ++n) {
        const T* disp_n = disp + n * shape.dims * nvox;
        for (int64_t v = 0; v < nvox; ++v) out[n * nvox + v] = jacobian_at(disp_n, v, nvox, shape, strides);
    }
}

void gaussian_filter_valid(const double* in, double* out, const GridShape& shape,
                           const double* taps, int ntaps) {
    // Direct (non-separable) evaluation of the product kernel.
    const GridShape os = filtered_shape(shape, ntaps);
    const auto is = shape.strides();
    const int64_t onvox = os.voxels();
    int64_t kvox = 1;
    for (int d = 0; d < shape.dims; ++d) kvox *= ntaps;
    for (int64_t v = 0; v < onvox; ++v) {
        const auto oidx = unravel(v, os);
        double acc = 0;
        for (int64_t k = 0; k < kvox; ++k) {
            int64_t rem = k, off = 0;
            double w = 1;
            for (int d = shape.dims - 1; d >= 0; --d) {
                const int64_t t = rem % ntaps;
                rem /= ntaps;
                w *= taps[t];
                off += (oidx[d] + t) * is[d];
            }
            acc += w * in[off];
        }
        out[v] = acc;
    }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP
// ---------------------------------------------------------------------------
namespace parallel {

template <class T>
void warp_forward(const T* image, const T* disp, T* out, int64_t batch, int64_t channels,
                  const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t v = 0; v < nvox; ++v) {
            Stencil<T> st;
            sample_point(disp + n * shape.dims * nvox, v, nvox, shape, strides, st);
            for (int64_t c = 0; c < channels; ++c) {
                const T* plane = image + (n * channels + c) * nvox;
                T acc = 0;
                for (int k = 0; k < st.ncorners; ++k) acc += st.weight[k] * plane[st.offset[k]];
                out[(n * channels + c) * nvox + v] = acc;
            }
        }
    }
}

template <class T>
void warp_backward(const T* image, const T* disp, const T* grad_out, T* grad_image,
                   T* grad_disp, int64_t batch, int64_t channels, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();

    // Displacement gradient is a per-voxel gather.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t v = 0; v < nvox; ++v) {
            Stencil<T> st;
            sample_point(disp + n * shape.dims * nvox, v, nvox, shape, strides, st);
            std::array<T, 3> acc{};
            for (int64_t c = 0; c < channels; ++c) {
                const int64_t base = (n * channels + c) * nvox;
                const T g = grad_out[base + v];
                for (int k = 0; k < st.ncorners; ++k) {
                    const T gi = g * image[base + st.offset[k]];
                    for (int a = 0; a < shape.dims; ++a) acc[a] += gi * st.dweight[k][a];
                }
            }
            for (int a = 0; a < shape.dims; ++a) grad_disp[(n * shape.dims + a) * nvox + v] = acc[a];
        }
    }

    // Image gradient is a scatter; planes are independent so each thread owns one.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t c = 0; c < channels; ++c) {
            const int64_t base = (n * channels + c) * nvox;
            T* gplane = grad_image + base;
            std::fill(gplane, gplane + nvox, T(0));
            Stencil<T> st;
            for (int64_t v = 0; v < nvox; ++v) {
                sample_point(disp + n * shape.dims * nvox, v, nvox, shape, strides, st);
                const T g = grad_out[base + v];
                for (int k = 0; k < st.ncorners; ++k) gplane[st.offset[k]] += g * st.weight[k];
            }
        }
    }
}

template <class T>
double magnitude_forward(const T* disp, int64_t batch, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const int64_t total_vox = batch * nvox;
    double total = 0;
#pragma omp parallel for reduction(+ : total) schedule(static)
    for (int64_t i = 0; i < total_vox; ++i) {
        const int64_t n = i / nvox, v = i % nvox;
        double sq = 0;
        for (int d = 0; d < shape.dims; ++d) {
            const double u = disp[(n * shape.dims + d) * nvox + v];
            sq += u * u;
        }
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(total_vox);
}

template <class T>
void magnitude_backward(const T* disp, double grad_scale, T* grad_disp, int64_t batch,
                        const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const int64_t total_vox = batch * nvox;
    const double scale = grad_scale / static_cast<double>(total_vox);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < total_vox; ++i) {
        const int64_t n = i / nvox, v = i % nvox;
        double sq = 0;
        for (int d = 0; d < shape.dims; ++d) {
            const double u = disp[(n * shape.dims + d) * nvox + v];
            sq += u * u;
        }
        const double inv = sq > 0 ? scale / std::sqrt(sq) : 0.0;
        for (int d = 0; d < shape.dims; ++d) {
            const int64_t j = (n * shape.dims + d) * nvox + v;
            grad_disp[j] = static_cast<T>(inv * disp[j]);
        }
    }
}

template <class T>
double gradient_penalty_forward(const T* disp, int64_t batch, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    const int64_t planes = batch * shape.dims;
    double total = 0;
#pragma omp parallel for collapse(2) reduction(+ : total) schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
        for (int64_t v = 0; v < nvox; ++v) {
            const T* comp = disp + p * nvox;
            const auto idx = unravel(v, shape);
            double sq = 0;
            for (int a = 0; a < shape.dims; ++a) {
                const double g = forward_diff(comp, v, idx, a, shape, strides);
                sq += g * g;
            }
            total += std::sqrt(sq);
        }
    }
    return total / static_cast<double>(planes * nvox);
}

template <class T>
void gradient_penalty_backward(const T* disp, double grad_scale, T* grad_disp, int64_t batch,
                               const GridShape& shape) {
    // Two gather passes: h_a(p) = scale * g_a(p) / |g(p)|, then
    // grad(q) = sum_a h_a(q - e_a) - h_a(q).
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
    const int64_t planes = batch * shape.dims;
    const double scale = grad_scale / static_cast<double>(planes * nvox);
    std::vector<double> h(static_cast<size_t>(planes * nvox * shape.dims));

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
        for (int64_t v = 0; v < nvox; ++v) {
            const T* comp = disp + p * nvox;
            const auto idx = unravel(v, shape);
            std::array<double, 3> g{};
            double sq = 0;
            for (int a = 0; a < shape.dims; ++a) {
                g[a] = forward_diff(comp, v, idx, a, shape, strides);
                sq += g[a] * g[a];
            }
            const double inv = sq > 0 ? scale / std::sqrt(sq) : 0.0;
            for (int a = 0; a < shape.dims; ++a) h[(p * nvox + v) * shape.dims + a] = inv * g[a];
        }
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
        for (int64_t v = 0; v < nvox; ++v) {
            const auto idx = unravel(v, shape);
            double acc = 0;
            for (int a = 0; a < shape.dims; ++a) {
                acc -= h[(p * nvox + v) * shape.dims + a];
                if (idx[a] > 0) acc += h[(p * nvox + v - strides[a]) * shape.dims + a];
            }
            grad_disp[p * nvox + v] = static_cast<T>(acc);
        }
    }
}

template <class T>
void jacobian_determinant(const T* disp, T* out, int64_t batch, const GridShape& shape) {
    const int64_t nvox = shape.voxels();
    const auto strides = shape.strides();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t v = 0; v < nvox; ++v) {
            out[n * nvox + v] = jacobian_at(disp + n * shape.dims * nvox, v, nvox, shape, strides);
        }
    }
}

void gaussian_filter_valid(const double* in, double* out, const GridShape& shape,
                           const double* taps, int ntaps) {
    // Separable: one 1-D pass per axis, each shrinking that axis.
    GridShape cur = shape;
    std::vector<double> src(in, in + shape.voxels());
    std::vector<double> dst;
    for (int axis = 0; axis < shape.dims; ++axis) {
        GridShape next = cur;
        next.size[axis] = cur.size[axis] - (ntaps - 1);
        const auto cs = cur.strides();
        const int64_t nn = next.voxels();
        dst.assign(static_cast<size_t>(nn), 0.0);
#pragma omp parallel for schedule(static)
        for (int64_t v = 0; v < nn; ++v) {
            const auto idx = unravel(v, next);
            int64_t off = 0;
            for (int d = 0; d < shape.dims; ++d) off += idx[d] * cs[d];
            double acc = 0;
            for (int t = 0; t < ntaps; ++t) acc += taps[t] * src[off + t * cs[axis]];
            dst[v] = acc;
        }
        src.swap(dst);
        cur = next;
    }
    std::copy(src.begin(), src.end(), out);
}

}  // namespace parallel

#define MORPHLDM_INSTANTIATE(NS, T)                                                             \
    template void NS::warp_forward<T>(const T*, const T*, T*, int64_t, int64_t,                 \
                                      const GridShape&);                                        \
    template void NS::warp_backward<T>(const T*, const T*, const T*, T*, T*, int64_t, int64_t,  \
                                       const GridShape&);                                       \
    template double NS::magnitude_forward<T>(const T*, int64_t, const GridShape&);              \
    template void NS::magnitude_backward<T>(const T*, double, T*, int64_t, const GridShape&);   \
    template double NS::gradient_penalty_forward<T>(const T*, int64_t, const GridShape&);       \
    template void NS::gradient_penalty_backward<T>(const T*, double, T*, int64_t,               \
                                                   const GridShape&);                           \
    template void NS::jacobian_determinant<T>(const T*, T*, int64_t, const GridShape&);

MORPHLDM_INSTANTIATE(serial, float)
MORPHLDM_INSTANTIATE(serial, double)
MORPHLDM_INSTANTIATE(parallel, float)
MORPHLDM_INSTANTIATE(parallel, double)

#undef MORPHLDM_INSTANTIATE

}  // namespace morphldm::kernels
