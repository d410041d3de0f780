#pragma once

// Cohort evaluation: diversity (MS-SSIM), attribute adherence, regional-volume
// effect sizes and a Frechet distance over predictor features ("FD-phantom").

#include <json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "morphldm/dataset.hpp"
#include "morphldm/nets.hpp"

namespace morphldm {

struct MsSsimOptions {
    int scales = 3;
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 1.0;
};

/// Per-scale weights: the first `scales` standard weights renormalized to sum to 1.
std::vector<double> ms_ssim_weights(int scales);

/// a, b: [C, *S]. Throws std::invalid_argument when the coarsest scale is smaller
/// than the window.
double ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const MsSsimOptions& opt = {});

/// `n_pairs` distinct unordered pairs drawn without replacement (all pairs if fewer exist).
std::vector<std::pair<int64_t, int64_t>> distinct_pairs(int64_t n, int64_t n_pairs, uint64_t seed);

/// Mean MS-SSIM over distinct random pairs of images [N, C, *S].
double ms_ssim_pairs(const torch::Tensor& images, int64_t n_pairs, uint64_t seed, const MsSsimOptions& opt = {});

struct DecadeError {
    int decade = 0;  // ages [10 d, 10 d + 10); the last decade also holds age 100+
    int64_t count = 0;
    double age_mae = 0;
    double sex_acc = 0;
};

struct AttributeAdherence {
    double age_mae = 0;
    double sex_acc = 0;
    std::vector<DecadeError> decades;  // non-empty decades only, ascending
};

inline constexpr int kLastDecade = 9;
int age_decade(double age);

AttributeAdherence attribute_adherence(std::span<const double> age_pred, std::span<const double> sex_logit,
                                       std::span<const Condition> conditions);

struct Predictions {
    std::vector<double> age;
    std::vector<double> sex_logit;
    torch::Tensor features;  // [N, F] double
};

Predictions predict_attributes(AttributePredictor& predictor, const torch::Tensor& images, int64_t batch = 100);

/// labels uint8 [N, *S] -> int64 [N, R] voxel counts.
torch::Tensor regional_volumes(const torch::Tensor& labels, int64_t num_regions);
std::vector<int64_t> regional_volumes(const LabelMap& labels);

/// |mean_a - mean_b| / pooled std. Throws on fewer than 2 samples or zero pooled std.
double cohens_d(std::span<const double> a, std::span<const double> b);

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2) over rows of [N, F].
double fd_phantom(const torch::Tensor& real_features, const torch::Tensor& synth_features);

/// For each synthetic record, the nearest-age real record of the same sex, without
/// replacement while unused candidates remain. Ties resolve to the lower index.
std::vector<int64_t> match_real(std::span<const SampleRecord> real, std::span<const SampleRecord> synth);

/// Stored labels, or intensity-band segmentation when a cohort has none.
torch::Tensor cohort_labels(const Dataset& ds);

struct RegionRow {
    std::string name;
    double real_mean = 0, real_std = 0;
    double synth_mean = 0, synth_std = 0;
    std::optional<double> cohens_d;  // empty when both populations are constant
};

struct CohortMetrics {
    double sex_acc = 0;
    double age_mae = 0;
    std::optional<double> fd_phantom;
    double ms_ssim = 0;
};

struct CohortReport {
    CohortMetrics synthetic;
    CohortMetrics real;  // matched real cohort; fd_phantom left empty
    std::vector<RegionRow> regions;  // foreground regions
    std::vector<DecadeError> decades;
    std::vector<DecadeError> real_decades;
    int64_t n_real = 0;
    int64_t n_synth = 0;
    int64_t n_matched_unique = 0;
    std::string label_source;
    std::string fingerprint;

    nlohmann::json to_json() const;
};

struct EvalOptions {
    int64_t ms_ssim_pairs = 1000;
    uint64_t seed = 0;
    int64_t batch = 100;
    MsSsimOptions ms_ssim;
};

CohortReport evaluate_cohorts(const Dataset& real, const Dataset& synth, AttributePredictor& predictor,
                              const EvalOptions& opt = {});

/// report.json, regions.csv, decade_mae.csv, montage_synth.png, montage_real.png.
std::vector<std::filesystem::path> write_report(const CohortReport& report, const std::filesystem::path& dir,
                                                const Dataset& real, const Dataset& synth);

}  // namespace morphldm
