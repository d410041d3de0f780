#pragma once

// Declarative run configuration (one JSON file per run).
//
// {
//   "version": 1,
//   "variant": "morphldm_c",          // ldm | ldm_c | morphldm | morphldm_c
//   "seed": 0,                        // root of every random substream
//   "dataset": "data/train",          // relative paths resolve against the config file
//   "output": "runs/morphldm_c",
//   "stage1_checkpoint": "",          // stage 2 and sampling read these
//   "stage2_checkpoint": "",
//   "net": { NetConfig keys },
//   "weights": { "alpha", "beta", "kl_weight", "adv_weight" },
//   "diffusion": { "timesteps", "schedule", "beta_min", "beta_max" },
//   "stage1": { TrainConfig keys, "adversarial", "validation_fraction",
//               "validate_every", "early_stop_val_l1" },
//   "stage2": { TrainConfig keys },
//   "predictor": { TrainConfig keys, "validation_fraction" }
// }
//
// Unknown keys are rejected so typos never silently fall back to defaults.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "morphldm/diffusion.hpp"
#include "morphldm/losses.hpp"
#include "morphldm/nets.hpp"

namespace morphldm {

inline constexpr int kConfigVersion = 1;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
    int64_t steps = 1000;
    int64_t batch_size = 8;
    double lr = 1e-4;
    int64_t warmup = 500;
    int64_t log_every = 50;
    int64_t checkpoint_every = 1000;

    /// Learning rate at 0-based step `step` (linear warmup, then constant).
    double lr_at(int64_t step) const;
    void validate(const char* section) const;
};

struct Stage1TrainConfig : TrainConfig {
    bool adversarial = false;
    double validation_fraction = 0.1;  // tail of the dataset held out
    int64_t validate_every = 500;
    double early_stop_val_l1 = 0.0;    // stop once held-out L1 drops below; 0 disables
};

struct PredictorTrainConfig : TrainConfig {
    double validation_fraction = 0.1;
};

struct DiffusionConfig {
    int64_t timesteps = 250;
    ScheduleKind schedule = ScheduleKind::Linear;
    double beta_min = 1e-4;
    double beta_max = 0.02;

    DiffusionSchedule make() const { return DiffusionSchedule::make(timesteps, schedule, beta_min, beta_max); }
};

struct RunConfig {
    Variant variant = Variant::MorphLdmC;
    uint64_t seed = 0;
    std::filesystem::path dataset;
    std::filesystem::path output;
    std::filesystem::path stage1_checkpoint;
    std::filesystem::path stage2_checkpoint;
    NetConfig net;
    Stage1Weights weights;
    DiffusionConfig diffusion;
    Stage1TrainConfig stage1;
    TrainConfig stage2;
    PredictorTrainConfig predictor;

    void validate() const;
};

nlohmann::json to_json(const NetConfig& c);
NetConfig net_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Stage1Weights& w);
Stage1Weights stage1_weights_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DiffusionConfig& d);
DiffusionConfig diffusion_config_from_json(const nlohmann::json& j);

/// Paths are written as given (no resolution).
nlohmann::json to_json(const RunConfig& c);
/// Relative paths are resolved against `base_dir` when it is non-empty.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

RunConfig load_run_config(const std::filesystem::path& file);
void save_run_config(const RunConfig& c, const std::filesystem::path& file);

}  // namespace morphldm
