#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace morphldm {

/// Writes a [H, W] image with values in [0, 1] as 8-bit grayscale PNG.
void write_png(const std::filesystem::path& file, const torch::Tensor& image);

/// Tiles [rows * cols] images of shape [C, *S] into one grid; 3D volumes show
/// their middle slice along the first axis. Missing tiles stay black.
torch::Tensor montage(const std::vector<torch::Tensor>& tiles, int64_t rows, int64_t cols, int64_t pad = 2);

}  // namespace morphldm
