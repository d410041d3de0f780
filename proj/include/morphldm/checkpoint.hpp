#pragma once

// Checkpoint directories:
//
//   <dir>/model.pt      named parameters and buffers (torch serialize archive)
//   <dir>/optim.pt      optimizer state, one file per optimizer (optim.pt, optim_disc.pt, ...)
//   <dir>/meta.json     {"format", "version", "kind", "step", "config", "dataset_fingerprint", "extra"}
//
// meta.json is written last, so a directory without it is an incomplete save.

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace morphldm {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
    std::string kind;        // "stage1", "stage2" or "predictor"
    int64_t step = 0;
    nlohmann::json config;   // the compatibility-relevant part of the run config
    std::string dataset_fingerprint;
    nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const CheckpointMeta& m);

void save_checkpoint(const std::filesystem::path& dir, torch::nn::Module& model,
                     const std::map<std::string, torch::optim::Optimizer*>& optimizers,
                     const CheckpointMeta& meta);

bool checkpoint_exists(const std::filesystem::path& dir);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);

/// Loads parameters (and optimizer state when given). Throws CheckpointError when
/// the stored kind or config differs from `expected`.
CheckpointMeta load_checkpoint(const std::filesystem::path& dir, torch::nn::Module& model,
                               const std::map<std::string, torch::optim::Optimizer*>& optimizers,
                               const std::string& expected_kind, const nlohmann::json& expected_config);

}  // namespace morphldm
