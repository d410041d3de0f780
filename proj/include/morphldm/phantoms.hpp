#pragma once

// Attribute-dependent synthetic head phantoms.
//
// Each phantom is a head ellipse with a cortex band (thickness depends on sex),
// white matter, and a central ventricle whose radius grows linearly with age.
// A smooth random per-sample warp is applied identically to image and labels,
// then Gaussian noise is added to the image only.

#include <json.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "morphldm/fields.hpp"
#include "morphldm/rng.hpp"

namespace morphldm {

enum Region : uint8_t { kBackground = 0, kCortex = 1, kWhiteMatter = 2, kVentricle = 3 };
inline constexpr int64_t kNumRegions = 4;

const std::vector<std::string>& region_names();

/// Noise-free intensity of each region. Increasing from background inward so
/// thresholding a blurred boundary never produces a spurious third region.
double region_intensity(int region);

/// Nearest-band segmentation of intensities. image [N, 1, *S] -> uint8 [N, *S].
torch::Tensor segment_by_intensity(const torch::Tensor& image);

struct PhantomSpec {
    std::vector<int64_t> image_size{64, 64};
    double noise_sigma = 0.02;
    double warp_smoothness = 48.0;  // wavelength of the warp modes, voxels
    double warp_amplitude = 2.0;    // peak displacement scale, voxels
    int warp_modes = 3;
    double ventricle_growth_rate = 0.07;  // voxels per year
    double base_ventricle_radius = 3.0;   // voxels at age 0
    std::array<double, 2> cortex_thickness_by_sex{4.0, 5.5};  // female, male
    std::array<double, 3> head_semi_axes_fraction{0.40, 0.34, 0.36};

    void validate() const;
    std::array<double, 3> head_semi_axes() const;
    double ventricle_radius(double age) const;

    static PhantomSpec default_3d();
};

nlohmann::json to_json(const PhantomSpec& s);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
/// Stable hash of the canonical JSON form, hex.
std::string spec_hash(const PhantomSpec& s);

struct Phantom {
    torch::Tensor image;  // float [1, *S], values in [0, 1]
    LabelMap labels;
    torch::Tensor warp;   // float [D, *S], the per-sample displacement used
};

/// Deterministic in (age, sex, seed, spec).
Phantom generate_phantom(double age, int sex, uint64_t seed, const PhantomSpec& spec);

/// Draws decade bins uniformly among non-empty bins, then a sample uniformly within.
class AgeBinnedSampler {
public:
    explicit AgeBinnedSampler(std::span<const double> ages, double bin_width = 10.0);

    int64_t draw(NormalStream& rng) const;
    std::vector<int64_t> draw_batch(int64_t n, uint64_t seed) const;

    const std::vector<std::vector<int64_t>>& bins() const { return bins_; }
    const std::vector<int64_t>& bin_ids() const { return bin_ids_; }
    /// Decade bins between the youngest and oldest sample that hold no samples.
    const std::vector<int64_t>& empty_bins() const { return empty_; }

private:
    std::vector<std::vector<int64_t>> bins_;
    std::vector<int64_t> bin_ids_;
    std::vector<int64_t> empty_;
};

}  // namespace morphldm
