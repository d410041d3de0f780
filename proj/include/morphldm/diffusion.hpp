#pragma once

// DDPM machinery over latents (epsilon parameterization).

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace morphldm {

enum class ScheduleKind { Linear, ScaledLinear };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct DiffusionSchedule {
    std::vector<double> betas;
    std::vector<double> alpha_bars;  // alpha_bars[t] = prod_{s<=t} (1 - betas[s])

    int64_t timesteps() const { return static_cast<int64_t>(betas.size()); }

    /// Betas evenly spaced from beta_min to beta_max (linear) or evenly spaced
    /// in sqrt-space (scaled_linear). T must be >= 2.
    static DiffusionSchedule make(int64_t T, ScheduleKind kind, double beta_min = 1e-4, double beta_max = 0.02);
    /// Arbitrary betas in (0,1); used for degenerate schedules in tests.
    static DiffusionSchedule from_betas(std::vector<double> betas);
};

/// Noise predictor: (z_t, t [N] int64, cond [N,2]) -> eps.
using EpsModel = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one timestep per batch element.
torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& sched);
torch::Tensor q_sample(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps, const DiffusionSchedule& sched);

/// x0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
torch::Tensor predict_x0(const torch::Tensor& z_t, int64_t t, const torch::Tensor& eps, const DiffusionSchedule& sched);

/// Draws t ~ U[0,T) and eps ~ N(0,I) per element and returns the denoising loss.
torch::Tensor training_step(const torch::Tensor& z0, const torch::Tensor& cond, const EpsModel& model,
                            const DiffusionSchedule& sched, at::Generator& gen);

/// Ancestral sampling from z_T ~ N(0, I). `sample_seeds` gives one seed per batch
/// element so a sample never depends on what else shares its batch.
torch::Tensor ddpm_sample(const EpsModel& model, const torch::Tensor& cond, const DiffusionSchedule& sched,
                          const std::vector<int64_t>& shape, std::span<const uint64_t> sample_seeds);

struct LatentScaler {
    double scale = 1.0;

    /// scale = 1 / std(z) over the calibration batch.
    static LatentScaler calibrate(const torch::Tensor& z);
    torch::Tensor apply(const torch::Tensor& z) const { return z * scale; }
    torch::Tensor invert(const torch::Tensor& z) const { return z / scale; }
    void validate() const;
};

}  // namespace morphldm
