#pragma once

// Raw dense-field kernels on contiguous row-major buffers.
//
// Every kernel exists twice with identical signatures: `serial::` is the
// straightforward reference implementation kept for testing, `parallel::`
// is the OpenMP version used by the library. Layout conventions:
//
//   image        [batch][channel][voxel]
//   displacement [batch][axis][voxel], axis d displaces spatial dim d
//
// where `voxel` is the row-major flattening of the spatial shape.
// Displacements are in voxel units and sampling clamps to the border.

#include <array>
#include <cstdint>

namespace morphldm::kernels {

struct GridShape {
    int dims = 2;
    std::array<int64_t, 3> size{1, 1, 1};

    int64_t voxels() const {
        int64_t n = 1;
        for (int d = 0; d < dims; ++d) n *= size[d];
        return n;
    }
    std::array<int64_t, 3> strides() const {
        std::array<int64_t, 3> s{1, 1, 1};
        for (int d = dims - 2; d >= 0; --d) s[d] = s[d + 1] * size[d + 1];
        return s;
    }
};

#define MORPHLDM_DECLARE_KERNELS                                                        \
    template <class T>                                                                  \
    void warp_forward(const T* image, const T* disp, T* out, int64_t batch,             \
                      int64_t channels, const GridShape& shape);                        \
    /* grad_image and grad_disp are overwritten, not accumulated. */                    \
    template <class T>                                                                  \
    void warp_backward(const T* image, const T* disp, const T* grad_out, T* grad_image, \
                       T* grad_disp, int64_t batch, int64_t channels,                   \
                       const GridShape& shape);                                         \
    template <class T>                                                                  \
    double magnitude_forward(const T* disp, int64_t batch, const GridShape& shape);     \
    template <class T>                                                                  \
    void magnitude_backward(const T* disp, double grad_scale, T* grad_disp,             \
                            int64_t batch, const GridShape& shape);                     \
    template <class T>                                                                  \
    double gradient_penalty_forward(const T* disp, int64_t batch,                       \
                                    const GridShape& shape);                            \
    template <class T>                                                                  \
    void gradient_penalty_backward(const T* disp, double grad_scale, T* grad_disp,      \
                                   int64_t batch, const GridShape& shape);              \
    template <class T>                                                                  \
    void jacobian_determinant(const T* disp, T* out, int64_t batch,                     \
                              const GridShape& shape);                                  \
    /* Separable Gaussian blur, "valid" region only: output spatial size is  */         \
    /* size - (taps - 1) per dim. */                                                    \
    void gaussian_filter_valid(const double* in, double* out, const GridShape& shape,  \
                               const double* taps, int ntaps);

namespace serial {
MORPHLDM_DECLARE_KERNELS
}  // namespace serial

namespace parallel {
MORPHLDM_DECLARE_KERNELS
}  // namespace parallel

#undef MORPHLDM_DECLARE_KERNELS

}  // namespace morphldm::kernels
