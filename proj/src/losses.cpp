#include "morphldm/losses.hpp"

#include "morphldm/fields.hpp"

#include <stdexcept>

namespace morphldm {
namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (!a.sizes().equals(b.sizes())) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

void Stage1Weights::validate() const {
    if (!(alpha >= 0 && beta >= 0 && kl_weight >= 0 && adv_weight >= 0)) {
        throw std::invalid_argument("stage-1 weights must be non-negative");
    }
}

torch::Tensor l1_similarity(const torch::Tensor& pred, const torch::Tensor& target) {
    require_same_shape(pred, target, "l1_similarity");
    return (pred - target).abs().mean();
}

torch::Tensor kl_to_standard_normal(const Latent& lat) {
    require_same_shape(lat.mu, lat.logvar, "kl_to_standard_normal");
    return (0.5 * (lat.mu.pow(2) + lat.logvar.exp() - lat.logvar - 1.0)).mean();
}

AdversarialLosses adversarial_losses(const torch::Tensor& disc_real, const torch::Tensor& disc_fake) {
    AdversarialLosses out;
    out.generator = -disc_fake.mean();
    out.discriminator = torch::relu(1.0 - disc_real).mean() + torch::relu(1.0 + disc_fake).mean();
    return out;
}

std::map<std::string, double> Stage1Terms::values() const {
    auto v = [](const torch::Tensor& t) { return t.defined() ? t.detach().item<double>() : 0.0; };
    return {{"total", v(total)},         {"l1", v(similarity)},      {"adversarial", v(adversarial)},
            {"magnitude", v(magnitude)}, {"smoothness", v(smoothness)}, {"kl", v(kl)}};
}

Stage1Terms stage1_objective(const torch::Tensor& x, const torch::Tensor& reconstruction,
                             const torch::Tensor& displacement, const Latent& latent,
                             const Stage1Weights& weights, const torch::Tensor& disc_fake) {
    weights.validate();
    Stage1Terms t;
    const auto zero = torch::zeros({}, x.options());
    t.similarity = l1_similarity(reconstruction, x);
    t.adversarial = disc_fake.defined() ? -disc_fake.mean() : zero;
    if (displacement.defined()) {
        t.magnitude = displacement_magnitude(displacement);
        t.smoothness = displacement_gradient_penalty(displacement);
    } else {
        t.magnitude = zero;
        t.smoothness = zero;
    }
    t.kl = kl_to_standard_normal(latent);
    t.total = t.similarity + weights.adv_weight * t.adversarial + weights.alpha * t.magnitude +
              weights.beta * t.smoothness + weights.kl_weight * t.kl;
    return t;
}

torch::Tensor denoising_objective(const torch::Tensor& eps_true, const torch::Tensor& eps_pred) {
    require_same_shape(eps_true, eps_pred, "denoising_objective");
    return (eps_true - eps_pred).pow(2).mean();
}

}  // namespace morphldm
