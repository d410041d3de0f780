#pragma once

// On-disk dataset directories shared by phantom cohorts and generated samples.
//
//   <dir>/manifest.json   schema below
//   <dir>/images.f32      little-endian float32, one [C, *S] blob per sample
//   <dir>/labels.u8       uint8 label maps [*S] (optional)
//   <dir>/fields.f32      float32 displacements [D, *S] (optional)
//   <dir>/templates.f32   float32 templates [C, *S] (optional)
//
// Every blob is listed per sample with its byte offset, size and CRC32.

#include <json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphldm/phantoms.hpp"

namespace morphldm {

inline constexpr int kDatasetFormatVersion = 1;

enum class DatasetErrc {
    Io = 1,
    CorruptManifest = 2,
    UnknownVersion = 3,
    SizeMismatch = 4,
    ChecksumMismatch = 5,
};

class DatasetError : public std::runtime_error {
public:
    DatasetError(DatasetErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    DatasetErrc code() const { return code_; }

private:
    DatasetErrc code_;
};

struct SampleRecord {
    std::string id;
    double age = 0;
    int sex = 0;
    uint64_t seed = 0;
};

struct Dataset {
    std::string kind = "phantom";  // "phantom" or "synthetic"
    std::optional<PhantomSpec> spec;
    std::vector<SampleRecord> records;
    std::vector<std::string> regions = region_names();
    torch::Tensor images;     // float [N, C, *S]
    torch::Tensor labels;     // uint8 [N, *S] or undefined
    torch::Tensor fields;     // float [N, D, *S] or undefined
    torch::Tensor templates;  // float [N, C, *S] or undefined
    nlohmann::json metadata = nlohmann::json::object();

    int64_t size() const { return static_cast<int64_t>(records.size()); }
    std::vector<double> ages() const;
    std::vector<int64_t> spatial() const;
    /// Stable content hash: manifest checksums plus metadata.
    std::string fingerprint() const;
    void validate() const;
};

struct CohortPlan {
    int64_t n = 1;
    double age_min = 5.0;
    double age_max = 100.0;
    double sex_balance = 0.5;  // probability of male
    double young_fraction = 0.7;  // share drawn from [age_min, young_cutoff]
    double young_cutoff = 20.0;
};

/// Generates a phantom cohort; sample i uses seed derive_seed(seed, "phantom", i).
Dataset generate_phantom_dataset(const PhantomSpec& spec, const CohortPlan& plan, uint64_t seed);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Generate and write in one step.
Dataset write_phantom_dataset(const PhantomSpec& spec, const CohortPlan& plan, uint64_t seed,
                              const std::filesystem::path& dir);

uint32_t crc32_bytes(const void* data, size_t n);

/// Subset of samples by index (images, labels, fields and templates follow).
Dataset select(const Dataset& ds, const std::vector<int64_t>& indices);

}  // namespace morphldm
