#include "morphldm/phantoms.hpp"

#include "morphldm/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numbers>
#include <stdexcept>

namespace morphldm {
namespace {

constexpr std::array<double, kNumRegions> kIntensity{0.0, 0.45, 0.75, 0.95};
constexpr std::array<double, 3> kVentricleAspect{0.8, 1.25, 1.0};

struct WarpMode {
    std::array<double, 3> freq{};
    double amplitude = 0;
    double phase = 0;
};

int classify(const std::array<double, 3>& x, int dims, const std::array<double, 3>& head, double thickness,
             double vent_radius) {
    double rho_head = 0, rho_inner = 0, rho_vent = 0;
    for (int d = 0; d < dims; ++d) {
        rho_head += (x[d] / head[d]) * (x[d] / head[d]);
        const double inner = head[d] - thickness;
        rho_inner += (x[d] / inner) * (x[d] / inner);
        const double v = vent_radius * kVentricleAspect[d];
        rho_vent += (x[d] / v) * (x[d] / v);
    }
    if (rho_head >= 1.0) return kBackground;
    if (rho_inner >= 1.0) return kCortex;
    if (rho_vent < 1.0) return kVentricle;
    return kWhiteMatter;
}

}  // namespace

const std::vector<std::string>& region_names() {
    static const std::vector<std::string> names{"background", "cortex", "white_matter", "ventricle"};
    return names;
}

double region_intensity(int region) {
    if (region < 0 || region >= kNumRegions) throw std::out_of_range("unknown region");
    return kIntensity[static_cast<size_t>(region)];
}

torch::Tensor segment_by_intensity(const torch::Tensor& image) {
    if (image.dim() < 4 || image.size(1) != 1) throw ShapeError("segment_by_intensity expects [N, 1, *S]");
    auto x = image.detach().to(torch::kFloat).squeeze(1).contiguous();
    auto out = torch::zeros(x.sizes(), torch::kUInt8);
    // Thresholds at band midpoints; bands are sorted by intensity.
    for (int r = 1; r < kNumRegions; ++r) {
        const double mid = 0.5 * (kIntensity[r - 1] + kIntensity[r]);
        out.masked_fill_(x >= mid, static_cast<uint8_t>(r));
    }
    return out;
}

void PhantomSpec::validate() const {
    if (image_size.size() < 2 || image_size.size() > 3) throw std::invalid_argument("phantom image_size must be 2D or 3D");
    for (int64_t s : image_size) {
        if (s < 8 || s % 8 != 0) throw std::invalid_argument("phantom sizes must be positive multiples of 8");
    }
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (!(warp_smoothness > 0) || !(warp_amplitude >= 0) || warp_modes < 1) {
        throw std::invalid_argument("invalid warp parameters");
    }
    if (!(base_ventricle_radius > 0) || !(ventricle_growth_rate >= 0)) {
        throw std::invalid_argument("ventricle radius parameters must be positive");
    }
    const auto head = head_semi_axes();
    const double max_t = std::max(cortex_thickness_by_sex[0], cortex_thickness_by_sex[1]);
    if (!(std::min(cortex_thickness_by_sex[0], cortex_thickness_by_sex[1]) > 0)) {
        throw std::invalid_argument("cortex thickness must be positive");
    }
    const double r_max = ventricle_radius(120.0);
    for (size_t d = 0; d < image_size.size(); ++d) {
        const double inner = head[d] - max_t;
        if (!(head[d] > 0) || head[d] >= 0.5 * static_cast<double>(image_size[d])) {
            throw std::invalid_argument("head ellipse must fit inside the image");
        }
        if (inner <= 0 || r_max * kVentricleAspect[d] >= inner) {
            throw std::invalid_argument("ventricle and cortex must nest inside the head ellipse");
        }
    }
}

std::array<double, 3> PhantomSpec::head_semi_axes() const {
    std::array<double, 3> a{0, 0, 0};
    for (size_t d = 0; d < image_size.size(); ++d) a[d] = head_semi_axes_fraction[d] * static_cast<double>(image_size[d]);
    return a;
}

double PhantomSpec::ventricle_radius(double age) const { return base_ventricle_radius + ventricle_growth_rate * age; }

PhantomSpec PhantomSpec::default_3d() {
    PhantomSpec s;
    s.image_size = {32, 32, 32};
    s.warp_smoothness = 32.0;
    s.warp_amplitude = 1.0;
    s.base_ventricle_radius = 1.5;
    s.ventricle_growth_rate = 0.035;
    s.cortex_thickness_by_sex = {2.0, 2.75};
    return s;
}

nlohmann::json to_json(const PhantomSpec& s) {
    return {{"image_size", s.image_size},
            {"noise_sigma", s.noise_sigma},
            {"warp_smoothness", s.warp_smoothness},
            {"warp_amplitude", s.warp_amplitude},
            {"warp_modes", s.warp_modes},
            {"ventricle_growth_rate", s.ventricle_growth_rate},
            {"base_ventricle_radius", s.base_ventricle_radius},
            {"cortex_thickness_by_sex", s.cortex_thickness_by_sex},
            {"head_semi_axes_fraction", s.head_semi_axes_fraction}};
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("phantom spec must be a JSON object");
    static const std::vector<std::string> known{"image_size",       "noise_sigma",           "warp_smoothness",
                                                "warp_amplitude",   "warp_modes",            "ventricle_growth_rate",
                                                "base_ventricle_radius", "cortex_thickness_by_sex",
                                                "head_semi_axes_fraction"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw std::invalid_argument("unknown phantom spec key '" + key + "'");
        }
    }
    PhantomSpec s;
    try {
        s.image_size = j.value("image_size", s.image_size);
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.warp_smoothness = j.value("warp_smoothness", s.warp_smoothness);
        s.warp_amplitude = j.value("warp_amplitude", s.warp_amplitude);
        s.warp_modes = j.value("warp_modes", s.warp_modes);
        s.ventricle_growth_rate = j.value("ventricle_growth_rate", s.ventricle_growth_rate);
        s.base_ventricle_radius = j.value("base_ventricle_radius", s.base_ventricle_radius);
        s.cortex_thickness_by_sex = j.value("cortex_thickness_by_sex", s.cortex_thickness_by_sex);
        s.head_semi_axes_fraction = j.value("head_semi_axes_fraction", s.head_semi_axes_fraction);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed phantom spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::string spec_hash(const PhantomSpec& s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(s).dump())));
    return buf;
}

Phantom generate_phantom(double age, int sex, uint64_t seed, const PhantomSpec& spec) {
    validate(Condition{age, sex});
    spec.validate();
    const int dims = static_cast<int>(spec.image_size.size());
    const auto shape = grid_shape(spec.image_size);
    const auto strides = shape.strides();
    const int64_t nvox = shape.voxels();
    NormalStream rng(seed);

    // Smooth warp: a few random plane-wave modes per displacement component.
    std::vector<std::vector<WarpMode>> modes(static_cast<size_t>(dims));
    const double mode_scale = spec.warp_amplitude / std::sqrt(static_cast<double>(spec.warp_modes));
    for (int d = 0; d < dims; ++d) {
        for (int k = 0; k < spec.warp_modes; ++k) {
            WarpMode m;
            bool nonzero = false;
            while (!nonzero) {
                for (int e = 0; e < dims; ++e) {
                    m.freq[e] = static_cast<double>(static_cast<int>(rng.below(3)) - 1);
                    nonzero = nonzero || m.freq[e] != 0.0;
                }
            }
            m.amplitude = mode_scale * (2.0 * rng.uniform() - 1.0);
            m.phase = 2.0 * std::numbers::pi * rng.uniform();
            modes[d].push_back(m);
        }
    }

    const auto head = spec.head_semi_axes();
    const double thickness = spec.cortex_thickness_by_sex[static_cast<size_t>(sex)];
    const double vent = spec.ventricle_radius(age);
    const double omega = 2.0 * std::numbers::pi / spec.warp_smoothness;

    std::vector<int64_t> field_shape{dims};
    field_shape.insert(field_shape.end(), spec.image_size.begin(), spec.image_size.end());
    auto warp = torch::empty(field_shape, torch::kFloat);
    auto labels = torch::empty(spec.image_size, torch::kUInt8);
    std::vector<int64_t> img_shape{1};
    img_shape.insert(img_shape.end(), spec.image_size.begin(), spec.image_size.end());
    auto image = torch::empty(img_shape, torch::kFloat);
    float* wp = warp.data_ptr<float>();
    uint8_t* lp = labels.data_ptr<uint8_t>();
    float* ip = image.data_ptr<float>();

    for (int64_t v = 0; v < nvox; ++v) {
        std::array<double, 3> p{0, 0, 0}, x{0, 0, 0};
        int64_t rem = v;
        for (int d = 0; d < dims; ++d) {
            p[d] = static_cast<double>(rem / strides[d]);
            rem %= strides[d];
        }
        for (int d = 0; d < dims; ++d) {
            double u = 0;
            for (const auto& m : modes[d]) {
                double arg = m.phase;
                for (int e = 0; e < dims; ++e) arg += omega * m.freq[e] * p[e];
                u += m.amplitude * std::sin(arg);
            }
            wp[d * nvox + v] = static_cast<float>(u);
            x[d] = p[d] + u - 0.5 * static_cast<double>(spec.image_size[d] - 1);
        }
        const int r = classify(x, dims, head, thickness, vent);
        lp[v] = static_cast<uint8_t>(r);
        ip[v] = static_cast<float>(kIntensity[static_cast<size_t>(r)]);
    }
    if (spec.noise_sigma > 0) {
        for (int64_t v = 0; v < nvox; ++v) {
            const double val = ip[v] + spec.noise_sigma * rng.next();
            ip[v] = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
    }
    return Phantom{image, LabelMap{labels, region_names()}, warp};
}

AgeBinnedSampler::AgeBinnedSampler(std::span<const double> ages, double bin_width) {
    if (ages.empty()) throw std::invalid_argument("age-binned sampler: empty dataset");
    if (!(bin_width > 0)) throw std::invalid_argument("age-binned sampler: bin width must be positive");
    std::map<int64_t, std::vector<int64_t>> by_bin;
    for (size_t i = 0; i < ages.size(); ++i) {
        by_bin[static_cast<int64_t>(std::floor(ages[i] / bin_width))].push_back(static_cast<int64_t>(i));
    }
    for (auto& [id, members] : by_bin) {
        bin_ids_.push_back(id);
        bins_.push_back(std::move(members));
    }
    for (int64_t b = bin_ids_.front(); b <= bin_ids_.back(); ++b) {
        if (!std::binary_search(bin_ids_.begin(), bin_ids_.end(), b)) {
            empty_.push_back(b);
            std::cerr << "warning: age bin [" << b * bin_width << ", " << (b + 1) * bin_width
                      << ") has no samples and is skipped\n";
        }
    }
}

int64_t AgeBinnedSampler::draw(NormalStream& rng) const {
    const auto& bin = bins_[rng.below(bins_.size())];
    return bin[rng.below(bin.size())];
}

std::vector<int64_t> AgeBinnedSampler::draw_batch(int64_t n, uint64_t seed) const {
    NormalStream rng(seed);
    std::vector<int64_t> out(static_cast<size_t>(n));
    for (auto& i : out) i = draw(rng);
    return out;
}

}  // namespace morphldm
