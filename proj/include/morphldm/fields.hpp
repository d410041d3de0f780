#pragma once

// Dense deformation-field math on batched tensors.
//
// Volumes are [N, C, *S] and displacement fields are [N, D, *S] with D = |S|
// (2 or 3). A deformation is v = Id + u, the field stores u in voxel units,
// and channel d of u moves along spatial dim d. All ops are differentiable
// through libtorch autograd where that makes sense.

#include <torch/torch.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphldm/kernels.hpp"

namespace morphldm {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Integer region map over the spatial grid; region 0 is background.
struct LabelMap {
    torch::Tensor labels;  // uint8, shape S (unbatched)
    std::vector<std::string> region_names;

    int64_t num_regions() const { return static_cast<int64_t>(region_names.size()); }
};

/// Spatial shape of a batched tensor, i.e. sizes after the first two dims.
std::vector<int64_t> spatial_shape(const torch::Tensor& batched);

kernels::GridShape grid_shape(const std::vector<int64_t>& spatial);

/// Voxel coordinate grid [D, *S]: grid[d][idx] = idx[d].
torch::Tensor identity_grid(const std::vector<int64_t>& spatial,
                            torch::ScalarType dtype = torch::kFloat);

/// Samples `image` at Id + u with multilinear interpolation and border clamping.
torch::Tensor apply_deformation(const torch::Tensor& image, const torch::Tensor& displacement);

/// Mean over voxels (and batch) of |u(p)|.
torch::Tensor displacement_magnitude(const torch::Tensor& displacement);

/// Mean over voxels and components of |grad u_c(p)|, forward differences,
/// zero difference at the far border of each axis.
torch::Tensor displacement_gradient_penalty(const torch::Tensor& displacement);

/// det(d(Id + u)/dp) per voxel, [N, *S]. Diagnostic only; not differentiable.
torch::Tensor jacobian_determinant_map(const torch::Tensor& displacement);

/// Fraction of voxels with a non-positive Jacobian determinant.
double folding_fraction(const torch::Tensor& displacement);

/// Warps a label map through one-hot encoding, linear warping and per-voxel
/// argmax (ties resolve to the lowest region index).
LabelMap warp_labels(const LabelMap& labels, const torch::Tensor& displacement);

/// Batched form: labels [N, *S] integer, displacement [N, D, *S]. Returns uint8 [N, *S].
torch::Tensor warp_label_batch(const torch::Tensor& labels, const torch::Tensor& displacement,
                               int64_t num_regions);

}  // namespace morphldm
