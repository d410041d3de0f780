#include "morphldm/diffusion.hpp"

#include "morphldm/losses.hpp"
#include "morphldm/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace morphldm {
namespace {

torch::Tensor per_element(const std::vector<double>& table, const torch::Tensor& t, const torch::Tensor& like) {
    auto tab = torch::tensor(table, torch::kDouble).index_select(0, t.to(torch::kLong).flatten());
    std::vector<int64_t> view{like.size(0)};
    for (int64_t d = 1; d < like.dim(); ++d) view.push_back(1);
    return tab.view(view).to(like.scalar_type());
}

void check_timesteps(const torch::Tensor& t, const DiffusionSchedule& sched) {
    if (t.numel() == 0) return;
    if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= sched.timesteps()) {
        throw std::out_of_range("timestep outside [0, T)");
    }
}

}  // namespace

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "scaled_linear"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "scaled_linear") return ScheduleKind::ScaledLinear;
    throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

DiffusionSchedule DiffusionSchedule::make(int64_t T, ScheduleKind kind, double beta_min, double beta_max) {
    if (T < 2) throw std::invalid_argument("diffusion schedule needs T >= 2");
    std::vector<double> betas(static_cast<size_t>(T));
    for (int64_t i = 0; i < T; ++i) {
        const double f = static_cast<double>(i) / static_cast<double>(T - 1);
        if (kind == ScheduleKind::Linear) {
            betas[i] = beta_min + f * (beta_max - beta_min);
        } else {
            const double s = std::sqrt(beta_min) + f * (std::sqrt(beta_max) - std::sqrt(beta_min));
            betas[i] = s * s;
        }
    }
    return from_betas(std::move(betas));
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("empty beta schedule");
    DiffusionSchedule s;
    s.alpha_bars.resize(betas.size());
    double prod = 1.0;
    for (size_t i = 0; i < betas.size(); ++i) {
        if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw std::invalid_argument("betas must lie in (0, 1)");
        prod *= 1.0 - betas[i];
        s.alpha_bars[i] = prod;
    }
    s.betas = std::move(betas);
    return s;
}

torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& sched) {
    if (!z0.sizes().equals(eps.sizes())) throw std::invalid_argument("q_sample: eps shape mismatch");
    if (t.numel() != z0.size(0)) throw std::invalid_argument("q_sample: one timestep per element required");
    check_timesteps(t, sched);
    auto ab = per_element(sched.alpha_bars, t, z0);
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor q_sample(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps, const DiffusionSchedule& sched) {
    return q_sample(z0, torch::full({z0.size(0)}, t, torch::kLong), eps, sched);
}

torch::Tensor predict_x0(const torch::Tensor& z_t, int64_t t, const torch::Tensor& eps, const DiffusionSchedule& sched) {
    if (t < 0 || t >= sched.timesteps()) throw std::out_of_range("timestep outside [0, T)");
    const double ab = sched.alpha_bars[t];
    return (z_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
}

torch::Tensor training_step(const torch::Tensor& z0, const torch::Tensor& cond, const EpsModel& model,
                            const DiffusionSchedule& sched, at::Generator& gen) {
    auto t = torch::randint(sched.timesteps(), {z0.size(0)}, gen, torch::kLong);
    auto eps = torch::randn(z0.sizes(), gen, z0.options());
    auto z_t = q_sample(z0, t, eps, sched);
    return denoising_objective(eps, model(z_t, t, cond));
}

torch::Tensor ddpm_sample(const EpsModel& model, const torch::Tensor& cond, const DiffusionSchedule& sched,
                          const std::vector<int64_t>& shape, std::span<const uint64_t> sample_seeds) {
    if (shape.empty() || static_cast<size_t>(shape[0]) != sample_seeds.size()) {
        throw std::invalid_argument("ddpm_sample: need one seed per batch element");
    }
    torch::NoGradGuard no_grad;
    std::vector<at::Generator> gens;
    for (uint64_t s : sample_seeds) gens.push_back(make_generator(s));
    std::vector<int64_t> elem(shape.begin() + 1, shape.end());
    elem.insert(elem.begin(), 1);
    auto draw = [&] {
        std::vector<torch::Tensor> parts;
        for (auto& g : gens) parts.push_back(torch::randn(elem, g));
        return torch::cat(parts, 0);
    };

    auto z = draw();
    const int64_t n = shape[0];
    for (int64_t t = sched.timesteps() - 1; t >= 0; --t) {
        auto eps = model(z, torch::full({n}, t, torch::kLong), cond);
        const double beta = sched.betas[t];
        const double ab = sched.alpha_bars[t];
        auto mean = (z - beta / std::sqrt(1.0 - ab) * eps) / std::sqrt(1.0 - beta);
        if (t > 0) {
            const double var = beta * (1.0 - sched.alpha_bars[t - 1]) / (1.0 - ab);
            z = mean + std::sqrt(var) * draw();
        } else {
            z = mean;
        }
    }
    return z;
}

LatentScaler LatentScaler::calibrate(const torch::Tensor& z) {
    const double sd = z.detach().to(torch::kDouble).std().item<double>();
    if (!(sd > 0.0) || !std::isfinite(sd)) throw std::domain_error("latent scaler: degenerate calibration batch");
    return LatentScaler{1.0 / sd};
}

void LatentScaler::validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw std::domain_error("latent scale must be positive and finite");
}

}  // namespace morphldm
