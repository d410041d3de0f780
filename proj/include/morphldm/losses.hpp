#pragma once

// Scalar objectives. Every reduction is a mean so weights carry over between
// resolutions.

#include <torch/torch.h>

#include <map>
#include <string>

#include "morphldm/nets.hpp"

namespace morphldm {

struct Stage1Weights {
    double alpha = 5.0;        // displacement magnitude
    double beta = 1.0;         // displacement gradient
    double kl_weight = 1e-7;
    double adv_weight = 0.005;

    void validate() const;
};

torch::Tensor l1_similarity(const torch::Tensor& pred, const torch::Tensor& target);

/// mean of 0.5 (mu^2 + exp(logvar) - logvar - 1)
torch::Tensor kl_to_standard_normal(const Latent& lat);

struct AdversarialLosses {
    torch::Tensor generator;      // -mean(fake)
    torch::Tensor discriminator;  // mean(relu(1 - real)) + mean(relu(1 + fake))
};

/// Hinge losses. Pass detached fake scores when updating the discriminator.
AdversarialLosses adversarial_losses(const torch::Tensor& disc_real, const torch::Tensor& disc_fake);

struct Stage1Terms {
    torch::Tensor total;
    torch::Tensor similarity;
    torch::Tensor adversarial;
    torch::Tensor magnitude;
    torch::Tensor smoothness;
    torch::Tensor kl;

    /// Detached scalar values keyed by component name, for logging.
    std::map<std::string, double> values() const;
};

/// Registration objective. `disc_fake` holds discriminator scores of the
/// reconstruction on the generator pass (undefined disables the adversarial term);
/// an undefined displacement drops the field regularizers (plain autoencoder).
Stage1Terms stage1_objective(const torch::Tensor& x, const torch::Tensor& reconstruction,
                             const torch::Tensor& displacement, const Latent& latent,
                             const Stage1Weights& weights, const torch::Tensor& disc_fake = {});

/// Mean squared error between true and predicted noise.
torch::Tensor denoising_objective(const torch::Tensor& eps_true, const torch::Tensor& eps_pred);

}  // namespace morphldm
