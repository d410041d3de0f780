#pragma once

// Trainable networks. Every module is rank-generic (2D or 3D spatial data)
// and uses group normalization so outputs never depend on batch composition.

#include <torch/torch.h>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace morphldm {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Subject attributes. Age in years, sex 0 = female, 1 = male.
struct Condition {
    double age = 0.0;
    int sex = 0;
};

inline constexpr double kAgeNormalizer = 100.0;

void validate(const Condition& c);

/// [N, 2] tensor of (age / 100, sex).
torch::Tensor condition_tensor(std::span<const Condition> conds,
                               torch::ScalarType dtype = torch::kFloat);

/// Encoder output at the downsampled resolution.
struct Latent {
    torch::Tensor mu;
    torch::Tensor logvar;  // clamped to [-30, 20]
};

/// z = mu + exp(0.5 logvar) * noise
torch::Tensor reparameterize(const Latent& lat, const torch::Tensor& noise);

enum class Variant { Ldm, LdmC, MorphLdm, MorphLdmC };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
inline bool is_morph(Variant v) { return v == Variant::MorphLdm || v == Variant::MorphLdmC; }
/// Superscript-c: conditions enter the autoencoder (and the template decoder).
inline bool conditions_autoencoder(Variant v) { return v == Variant::LdmC || v == Variant::MorphLdmC; }

struct NetConfig {
    std::vector<int64_t> image_size{64, 64};  // spatial shape; its length sets the rank
    int64_t image_channels = 1;
    int64_t latent_channels = 8;
    int64_t encoder_levels = 3;
    int64_t base_width = 16;
    std::vector<int64_t> unet_channels{64, 96, 96};
    std::vector<int64_t> cross_attention_levels{1, 2};
    int64_t condition_embed_dim = 64;
    int64_t attention_heads = 4;
    int64_t num_conditions = 2;
    int64_t predictor_width = 8;
    int64_t discriminator_width = 32;
    int64_t norm_groups = 8;
    double template_init_mean = 0.3;  // logit of this seeds the template bias

    int64_t spatial_dims() const { return static_cast<int64_t>(image_size.size()); }
    std::vector<int64_t> latent_size() const;
    /// Autoencoder width at encoder level l (0 = full resolution).
    int64_t width(int64_t level) const;
    void validate() const;

    static NetConfig full_scale();
};

bool operator==(const NetConfig& a, const NetConfig& b);

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

struct ConvNdOptions {
    int64_t dims = 2, in = 1, out = 1, kernel = 3, stride = 1, padding = 1;
};

/// Conv2d or Conv3d depending on `dims`.
class ConvNdImpl : public torch::nn::Module {
public:
    explicit ConvNdImpl(const ConvNdOptions& o);
    torch::Tensor forward(const torch::Tensor& x);
    void zero_init();
    torch::Tensor& bias();

private:
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Conv3d conv3_{nullptr};
};
TORCH_MODULE(ConvNd);

/// GroupNorm -> SiLU -> conv -> GroupNorm -> SiLU -> conv, residual skip, optional
/// additive time embedding.
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t dims, int64_t in, int64_t out, int64_t groups, int64_t temb_dim = 0);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {});

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    ConvNd conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    torch::nn::Linear temb_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Multi-head attention from spatial feature tokens onto context tokens.
class CrossAttentionImpl : public torch::nn::Module {
public:
    CrossAttentionImpl(int64_t channels, int64_t context_dim, int64_t heads, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

private:
    int64_t heads_;
    torch::nn::GroupNorm norm_{nullptr};
    torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(CrossAttention);

/// Maps (age, sex) to two context tokens of size `dim`.
class ConditionEmbedderImpl : public torch::nn::Module {
public:
    explicit ConditionEmbedderImpl(int64_t dim);
    torch::Tensor forward(const torch::Tensor& cond);  // [N,2] -> [N,2,dim]

private:
    torch::nn::Sequential age_{nullptr}, sex_{nullptr};
};
TORCH_MODULE(ConditionEmbedder);

/// Repeats [N, k] condition values as k constant channels over `spatial`.
torch::Tensor condition_channels(const torch::Tensor& cond, const std::vector<int64_t>& spatial);

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

class EncoderImpl : public torch::nn::Module {
public:
    EncoderImpl(const NetConfig& cfg, int64_t in_channels, bool conditional);
    Latent forward(const torch::Tensor& x, const std::optional<torch::Tensor>& cond = std::nullopt);
    bool conditional() const { return conditional_; }

private:
    NetConfig cfg_;
    bool conditional_;
    ConvNd conv_in_{nullptr};
    std::vector<ResBlock> blocks_;
    std::vector<ConvNd> downs_;
    ResBlock mid_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    ConvNd conv_out_{nullptr};
};
TORCH_MODULE(Encoder);

/// Upsampling decoder from latent resolution to image resolution. Used for the
/// deformation decoder (out = spatial dims, zero-initialized head), the image
/// decoder of the plain autoencoder, and as the trunk of the template decoder.
class DecoderImpl : public torch::nn::Module {
public:
    DecoderImpl(const NetConfig& cfg, int64_t in_channels, int64_t out_channels, bool zero_init_head,
                bool conditional);
    torch::Tensor forward(const torch::Tensor& z, const std::optional<torch::Tensor>& cond = std::nullopt);
    ConvNd& head() { return conv_out_; }

private:
    NetConfig cfg_;
    bool conditional_;
    ConvNd conv_in_{nullptr};
    ResBlock mid_{nullptr};
    std::vector<ConvNd> ups_;
    std::vector<ResBlock> blocks_;
    torch::nn::GroupNorm norm_out_{nullptr};
    ConvNd conv_out_{nullptr};
};
TORCH_MODULE(Decoder);

/// Template x̄(c) in [0,1]. The unconditional form feeds a learnable vector
/// instead of the condition.
class TemplateDecoderImpl : public torch::nn::Module {
public:
    TemplateDecoderImpl(const NetConfig& cfg, bool conditional);
    /// cond: [N, 2]; for the unconditional decoder it only sets the batch size.
    torch::Tensor forward(const torch::Tensor& cond);
    bool conditional() const { return conditional_; }

private:
    NetConfig cfg_;
    bool conditional_;
    torch::Tensor learned_input_;
    torch::nn::Sequential embed_{nullptr};
    Decoder trunk_{nullptr};
};
TORCH_MODULE(TemplateDecoder);

class PatchDiscriminatorImpl : public torch::nn::Module {
public:
    explicit PatchDiscriminatorImpl(const NetConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct AttributePrediction {
    torch::Tensor age;       // [N] years
    torch::Tensor sex_logit; // [N]
    torch::Tensor features;  // [N, F] pooled penultimate features
};

/// 4 levels x 2 (conv, norm, ReLU) blocks, global average pool, linear head.
class AttributePredictorImpl : public torch::nn::Module {
public:
    explicit AttributePredictorImpl(const NetConfig& cfg);
    AttributePrediction forward(const torch::Tensor& x);
    int64_t feature_dim() const { return feature_dim_; }

private:
    int64_t dims_;
    int64_t feature_dim_;
    std::vector<torch::nn::Sequential> levels_;
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(AttributePredictor);

/// Sinusoidal timestep embedding, [N] -> [N, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

/// Time-conditional UNet predicting noise; conditions enter through cross-attention
/// at the configured levels. `extra_in` adds constant condition channels to the input.
class DiffusionUNetImpl : public torch::nn::Module {
public:
    DiffusionUNetImpl(const NetConfig& cfg, int64_t timesteps, int64_t extra_in);
    torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond);
    int64_t timesteps() const { return timesteps_; }
    int64_t extra_in() const { return extra_in_; }

private:
    NetConfig cfg_;
    int64_t timesteps_;
    int64_t extra_in_;
    ConvNd conv_in_{nullptr};
    torch::nn::Sequential time_mlp_{nullptr};
    ConditionEmbedder cond_embed_{nullptr};
    std::vector<ResBlock> down_blocks_, up_blocks_;
    std::vector<CrossAttention> down_attn_, up_attn_;  // null where a level has no attention
    std::vector<ConvNd> downs_, ups_;
    ResBlock mid1_{nullptr}, mid2_{nullptr};
    CrossAttention mid_attn_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    ConvNd conv_out_{nullptr};
};
TORCH_MODULE(DiffusionUNet);

// ---------------------------------------------------------------------------
// Stage-1 bundle
// ---------------------------------------------------------------------------

struct Stage1Outputs {
    torch::Tensor reconstruction;  // x̂
    torch::Tensor displacement;    // u, undefined for plain autoencoders
    torch::Tensor templ;           // x̄(c), undefined for plain autoencoders
    Latent latent;
    torch::Tensor z;
};

/// Encoder, decoder(s) and discriminator of one variant.
class Stage1ModelImpl : public torch::nn::Module {
public:
    Stage1ModelImpl(const NetConfig& cfg, Variant variant);

    /// Full autoencoding pass. `noise` has the latent shape.
    Stage1Outputs forward(const torch::Tensor& x, const torch::Tensor& cond, const torch::Tensor& noise);
    /// Latent -> sample. Fills reconstruction (and displacement/templ for morph variants).
    Stage1Outputs decode(const torch::Tensor& z, const torch::Tensor& cond);
    Latent encode(const torch::Tensor& x, const torch::Tensor& cond);
    torch::Tensor make_template(const torch::Tensor& cond);

    std::vector<torch::Tensor> generator_parameters();
    std::vector<torch::Tensor> discriminator_parameters();

    Variant variant() const { return variant_; }
    const NetConfig& config() const { return cfg_; }
    Encoder& encoder() { return encoder_; }
    Decoder& decoder() { return decoder_; }
    TemplateDecoder& template_decoder() { return template_; }
    PatchDiscriminator& discriminator() { return disc_; }

private:
    std::optional<torch::Tensor> ae_cond(const torch::Tensor& cond) const;

    NetConfig cfg_;
    Variant variant_;
    Encoder encoder_{nullptr};
    Decoder decoder_{nullptr};
    TemplateDecoder template_{nullptr};
    PatchDiscriminator disc_{nullptr};
};
TORCH_MODULE(Stage1Model);

}  // namespace morphldm
