#pragma once

// Two-stage training, attribute-predictor training and sample generation.
//
// Output layout under RunConfig::output:
//   stage1/     checkpoint + loss.csv
//   stage2/     checkpoint + loss.csv
//   predictor/  checkpoint + loss.csv
//
// Per-step randomness (batch indices, latent noise, timesteps) comes from
// derive_seed(seed, "<stage>/<stream>", {step}), so a resumed run replays the
// uninterrupted trajectory exactly.

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphldm/checkpoint.hpp"
#include "morphldm/config.hpp"
#include "morphldm/dataset.hpp"
#include "morphldm/diffusion.hpp"
#include "morphldm/nets.hpp"

namespace morphldm {

/// Non-finite loss. Carries the component values at the failing step.
class TrainingAbort : public std::runtime_error {
public:
    TrainingAbort(int64_t step, std::map<std::string, double> components);
    int64_t step() const { return step_; }
    const std::map<std::string, double>& components() const { return components_; }

private:
    int64_t step_;
    std::map<std::string, double> components_;
};

struct LossRecord {
    int64_t step = 0;
    std::map<std::string, double> values;  // missing keys are written as empty CSV cells
};

struct TrainOptions {
    bool resume = false;
    /// Stop (after checkpointing) once this many steps are done; -1 runs to the configured end.
    int64_t stop_after = -1;
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    std::filesystem::path checkpoint;
    int64_t start_step = 0;
    int64_t end_step = 0;
    std::vector<LossRecord> history;  // full history including rows restored on resume
};

std::filesystem::path stage1_dir(const RunConfig& c);
std::filesystem::path stage2_dir(const RunConfig& c);
std::filesystem::path predictor_dir(const RunConfig& c);

TrainResult train_stage1(const RunConfig& cfg, const TrainOptions& opts = {});
/// Requires cfg.stage1_checkpoint.
TrainResult train_stage2(const RunConfig& cfg, const TrainOptions& opts = {});
TrainResult train_predictor(const RunConfig& cfg, const TrainOptions& opts = {});

/// Compatibility keys stored in checkpoint metadata.
nlohmann::json stage1_signature(const RunConfig& c);
nlohmann::json stage2_signature(const RunConfig& c);
nlohmann::json predictor_signature(const NetConfig& c);

Stage1Model load_stage1(const RunConfig& cfg, const std::filesystem::path& dir);

struct Stage2Bundle {
    DiffusionUNet unet{nullptr};
    LatentScaler scaler;
    DiffusionSchedule schedule;
};
Stage2Bundle load_stage2(const RunConfig& cfg, const std::filesystem::path& dir);

/// Reads the net configuration from the checkpoint itself.
AttributePredictor load_predictor(const std::filesystem::path& dir);

/// Held-out tail of a dataset: indices [n - floor(n * fraction), n).
std::pair<std::vector<int64_t>, std::vector<int64_t>> train_validation_split(int64_t n, double fraction);

/// Deterministic reconstruction (z = mu) L1 over the given samples.
double reconstruction_l1(Stage1Model& model, const Dataset& ds, const std::vector<int64_t>& indices,
                         int64_t batch = 50);

struct ConditionPlan {
    int64_t n = 1000;
    double age_min = 5.0;
    double age_max = 100.0;
    double sex_balance = 0.5;  // fraction male

    /// Ages linearly spaced over [age_min, age_max]; sexes interleaved so that any
    /// prefix holds floor(k * sex_balance) males.
    std::vector<Condition> conditions() const;
    void validate() const;
};

/// Samples one synthetic cohort from both checkpoints. Sample i uses seed
/// derive_seed(seed, "sample", {i}); `chunk` only changes float rounding in batched kernels.
Dataset generate_samples(const RunConfig& cfg, const ConditionPlan& plan, uint64_t seed, int64_t chunk = 50,
                         const std::function<void(const std::string&)>& log = {});

void write_loss_csv(const std::filesystem::path& file, const std::vector<std::string>& columns,
                    const std::vector<LossRecord>& rows);
std::vector<LossRecord> read_loss_csv(const std::filesystem::path& file);

}  // namespace morphldm
