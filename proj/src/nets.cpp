#include "morphldm/nets.hpp"

#include "morphldm/fields.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace morphldm {
namespace F = torch::nn::functional;

namespace {

int64_t groups_for(int64_t channels, int64_t max_groups) {
    int64_t g = std::min(channels, max_groups);
    while (channels % g != 0) --g;
    return g;
}

torch::nn::GroupNorm group_norm(int64_t channels, int64_t max_groups) {
    return torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups_for(channels, max_groups), channels));
}

torch::Tensor upsample2(const torch::Tensor& x) {
    std::vector<double> scale(static_cast<size_t>(x.dim() - 2), 2.0);
    return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(scale).mode(torch::kNearest));
}

torch::Tensor spatial_mean(const torch::Tensor& x) {
    std::vector<int64_t> axes;
    for (int64_t d = 2; d < x.dim(); ++d) axes.push_back(d);
    return x.mean(axes);
}

}  // namespace

// ---------------------------------------------------------------------------
// Domain helpers
// ---------------------------------------------------------------------------

void validate(const Condition& c) {
    if (!std::isfinite(c.age) || c.age < 0.0 || c.age > 120.0) {
        throw std::out_of_range("condition age must be in [0, 120], got " + std::to_string(c.age));
    }
    if (c.sex != 0 && c.sex != 1) throw std::out_of_range("condition sex must be 0 or 1");
}

torch::Tensor condition_tensor(std::span<const Condition> conds, torch::ScalarType dtype) {
    auto out = torch::empty({static_cast<int64_t>(conds.size()), 2}, torch::kDouble);
    auto acc = out.accessor<double, 2>();
    for (size_t i = 0; i < conds.size(); ++i) {
        validate(conds[i]);
        acc[static_cast<int64_t>(i)][0] = conds[i].age / kAgeNormalizer;
        acc[static_cast<int64_t>(i)][1] = conds[i].sex;
    }
    return out.to(dtype);
}

torch::Tensor reparameterize(const Latent& lat, const torch::Tensor& noise) {
    if (!lat.mu.sizes().equals(noise.sizes())) throw std::invalid_argument("reparameterize: noise shape mismatch");
    return lat.mu + torch::exp(0.5 * lat.logvar) * noise;
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Ldm: return "ldm";
        case Variant::LdmC: return "ldm_c";
        case Variant::MorphLdm: return "morphldm";
        case Variant::MorphLdmC: return "morphldm_c";
    }
    return "?";
}

Variant variant_from_string(const std::string& s) {
    if (s == "ldm") return Variant::Ldm;
    if (s == "ldm_c") return Variant::LdmC;
    if (s == "morphldm") return Variant::MorphLdm;
    if (s == "morphldm_c") return Variant::MorphLdmC;
    throw std::invalid_argument("unknown model variant '" + s + "'");
}

std::vector<int64_t> NetConfig::latent_size() const {
    std::vector<int64_t> s = image_size;
    for (auto& v : s) v >>= encoder_levels;
    return s;
}

int64_t NetConfig::width(int64_t level) const { return base_width * std::min<int64_t>(int64_t{1} << level, 4); }

void NetConfig::validate() const {
    if (image_size.size() < 2 || image_size.size() > 3) throw std::invalid_argument("image_size must be 2D or 3D");
    if (encoder_levels < 1) throw std::invalid_argument("encoder_levels must be >= 1");
    if (unet_channels.size() < 2) throw std::invalid_argument("unet_channels needs at least 2 levels");
    const int64_t div = int64_t{1} << encoder_levels;
    for (int64_t s : image_size) {
        if (s % div != 0) {
            throw std::invalid_argument("image size " + std::to_string(s) + " not divisible by 2^" +
                                        std::to_string(encoder_levels));
        }
    }
    for (int64_t l : cross_attention_levels) {
        if (l < 0 || l >= static_cast<int64_t>(unet_channels.size())) {
            throw std::invalid_argument("cross_attention_levels entry out of range");
        }
    }
    for (int64_t c : unet_channels) {
        if (c % attention_heads != 0) throw std::invalid_argument("unet channels must divide by attention_heads");
    }
    if (latent_channels < 1 || image_channels < 1 || base_width < 1 || num_conditions != 2) {
        throw std::invalid_argument("invalid NetConfig widths");
    }
}

NetConfig NetConfig::full_scale() {
    NetConfig c;
    c.image_size = {160, 192, 176};
    c.unet_channels = {384, 512, 512};
    c.base_width = 64;
    c.condition_embed_dim = 512;
    c.attention_heads = 8;
    c.norm_groups = 32;
    return c;
}

bool operator==(const NetConfig& a, const NetConfig& b) {
    return a.image_size == b.image_size && a.image_channels == b.image_channels &&
           a.latent_channels == b.latent_channels && a.encoder_levels == b.encoder_levels &&
           a.base_width == b.base_width && a.unet_channels == b.unet_channels &&
           a.cross_attention_levels == b.cross_attention_levels &&
           a.condition_embed_dim == b.condition_embed_dim && a.attention_heads == b.attention_heads &&
           a.num_conditions == b.num_conditions && a.predictor_width == b.predictor_width &&
           a.discriminator_width == b.discriminator_width && a.norm_groups == b.norm_groups &&
           a.template_init_mean == b.template_init_mean;
}

torch::Tensor condition_channels(const torch::Tensor& cond, const std::vector<int64_t>& spatial) {
    std::vector<int64_t> view{cond.size(0), cond.size(1)};
    std::vector<int64_t> expand = view;
    for (int64_t s : spatial) {
        view.push_back(1);
        expand.push_back(s);
    }
    return cond.view(view).expand(expand);
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

ConvNdImpl::ConvNdImpl(const ConvNdOptions& o) {
    if (o.dims == 2) {
        conv2_ = register_module(
            "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(o.in, o.out, o.kernel).stride(o.stride).padding(o.padding)));
    } else if (o.dims == 3) {
        conv3_ = register_module(
            "conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(o.in, o.out, o.kernel).stride(o.stride).padding(o.padding)));
    } else {
        throw std::invalid_argument("ConvNd supports 2 or 3 spatial dims");
    }
}

torch::Tensor ConvNdImpl::forward(const torch::Tensor& x) { return conv2_ ? conv2_->forward(x) : conv3_->forward(x); }

void ConvNdImpl::zero_init() {
    torch::NoGradGuard g;
    auto& w = conv2_ ? conv2_->weight : conv3_->weight;
    w.zero_();
    bias().zero_();
}

torch::Tensor& ConvNdImpl::bias() { return conv2_ ? conv2_->bias : conv3_->bias; }

ResBlockImpl::ResBlockImpl(int64_t dims, int64_t in, int64_t out, int64_t groups, int64_t temb_dim) {
    norm1_ = register_module("norm1", group_norm(in, groups));
    conv1_ = register_module("conv1", ConvNd(ConvNdOptions{dims, in, out}));
    norm2_ = register_module("norm2", group_norm(out, groups));
    conv2_ = register_module("conv2", ConvNd(ConvNdOptions{dims, out, out}));
    if (in != out) skip_ = register_module("skip", ConvNd(ConvNdOptions{dims, in, out, 1, 1, 0}));
    if (temb_dim > 0) temb_proj_ = register_module("temb_proj", torch::nn::Linear(temb_dim, out));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1_(F::silu(norm1_(x)));
    if (temb_proj_ && temb.defined()) {
        auto t = temb_proj_(F::silu(temb));
        std::vector<int64_t> view{t.size(0), t.size(1)};
        for (int64_t d = 2; d < h.dim(); ++d) view.push_back(1);
        h = h + t.view(view);
    }
    h = conv2_(F::silu(norm2_(h)));
    return (skip_ ? skip_(x) : x) + h;
}

CrossAttentionImpl::CrossAttentionImpl(int64_t channels, int64_t context_dim, int64_t heads, int64_t groups)
    : heads_(heads) {
    norm_ = register_module("norm", group_norm(channels, groups));
    q_ = register_module("q", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)));
    k_ = register_module("k", torch::nn::Linear(torch::nn::LinearOptions(context_dim, channels).bias(false)));
    v_ = register_module("v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, channels).bias(false)));
    out_ = register_module("out", torch::nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
    const int64_t n = x.size(0), c = x.size(1);
    const int64_t dh = c / heads_;
    auto tokens = norm_(x).flatten(2).transpose(1, 2);  // [N, V, C]
    const int64_t nv = tokens.size(1), nt = context.size(1);
    auto q = q_(tokens).view({n, nv, heads_, dh}).transpose(1, 2);
    auto k = k_(context).view({n, nt, heads_, dh}).transpose(1, 2);
    auto v = v_(context).view({n, nt, heads_, dh}).transpose(1, 2);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh)), -1);
    auto h = torch::matmul(attn, v).transpose(1, 2).reshape({n, nv, c});
    h = out_(h).transpose(1, 2).reshape(x.sizes());
    return x + h;
}

ConditionEmbedderImpl::ConditionEmbedderImpl(int64_t dim) {
    age_ = register_module("age", torch::nn::Sequential(torch::nn::Linear(1, dim), torch::nn::SiLU(),
                                                        torch::nn::Linear(dim, dim)));
    sex_ = register_module("sex", torch::nn::Sequential(torch::nn::Linear(1, dim), torch::nn::SiLU(),
                                                        torch::nn::Linear(dim, dim)));
}

torch::Tensor ConditionEmbedderImpl::forward(const torch::Tensor& cond) {
    auto a = age_->forward(cond.narrow(1, 0, 1));
    auto s = sex_->forward(cond.narrow(1, 1, 1));
    return torch::stack({a, s}, 1);
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const NetConfig& cfg, int64_t in_channels, bool conditional)
    : cfg_(cfg), conditional_(conditional) {
    cfg_.validate();
    const int64_t dims = cfg.spatial_dims();
    const int64_t levels = cfg.encoder_levels;
    conv_in_ = register_module("conv_in", ConvNd(ConvNdOptions{dims, in_channels, cfg.width(0)}));
    for (int64_t l = 0; l < levels; ++l) {
        blocks_.push_back(register_module("block" + std::to_string(l),
                                          ResBlock(dims, cfg.width(l), cfg.width(l), cfg.norm_groups)));
        downs_.push_back(register_module("down" + std::to_string(l),
                                         ConvNd(ConvNdOptions{dims, cfg.width(l), cfg.width(l + 1), 3, 2, 1})));
    }
    const int64_t extra = conditional ? cfg.num_conditions : 0;
    mid_ = register_module("mid", ResBlock(dims, cfg.width(levels) + extra, cfg.width(levels), cfg.norm_groups));
    norm_out_ = register_module("norm_out", group_norm(cfg.width(levels), cfg.norm_groups));
    conv_out_ = register_module("conv_out", ConvNd(ConvNdOptions{dims, cfg.width(levels), 2 * cfg.latent_channels}));
}

Latent EncoderImpl::forward(const torch::Tensor& x, const std::optional<torch::Tensor>& cond) {
    if (conditional_ && !cond) throw std::invalid_argument("conditional encoder requires a condition");
    auto h = conv_in_(x);
    for (size_t l = 0; l < blocks_.size(); ++l) h = downs_[l](blocks_[l](h));
    if (conditional_) {
        std::vector<int64_t> sp(h.sizes().begin() + 2, h.sizes().end());
        h = torch::cat({h, condition_channels(cond->to(h.dtype()), sp)}, 1);
    }
    h = conv_out_(F::silu(norm_out_(mid_(h))));
    auto parts = h.chunk(2, 1);
    return Latent{parts[0], torch::clamp(parts[1], -30.0, 20.0)};
}

DecoderImpl::DecoderImpl(const NetConfig& cfg, int64_t in_channels, int64_t out_channels, bool zero_init_head,
                         bool conditional)
    : cfg_(cfg), conditional_(conditional) {
    cfg_.validate();
    const int64_t dims = cfg.spatial_dims();
    const int64_t levels = cfg.encoder_levels;
    const int64_t extra = conditional ? cfg.num_conditions : 0;
    conv_in_ = register_module("conv_in", ConvNd(ConvNdOptions{dims, in_channels + extra, cfg.width(levels)}));
    mid_ = register_module("mid", ResBlock(dims, cfg.width(levels), cfg.width(levels), cfg.norm_groups));
    for (int64_t l = levels - 1; l >= 0; --l) {
        ups_.push_back(register_module("up" + std::to_string(l),
                                       ConvNd(ConvNdOptions{dims, cfg.width(l + 1), cfg.width(l)})));
        blocks_.push_back(register_module("block" + std::to_string(l),
                                          ResBlock(dims, cfg.width(l), cfg.width(l), cfg.norm_groups)));
    }
    norm_out_ = register_module("norm_out", group_norm(cfg.width(0), cfg.norm_groups));
    conv_out_ = register_module("conv_out", ConvNd(ConvNdOptions{dims, cfg.width(0), out_channels}));
    if (zero_init_head) conv_out_->zero_init();
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z, const std::optional<torch::Tensor>& cond) {
    if (conditional_ && !cond) throw std::invalid_argument("conditional decoder requires a condition");
    auto h = z;
    if (conditional_) {
        std::vector<int64_t> sp(z.sizes().begin() + 2, z.sizes().end());
        h = torch::cat({h, condition_channels(cond->to(z.dtype()), sp)}, 1);
    }
    h = mid_(conv_in_(h));
    for (size_t i = 0; i < ups_.size(); ++i) h = blocks_[i](ups_[i](upsample2(h)));
    return conv_out_(F::silu(norm_out_(h)));
}

TemplateDecoderImpl::TemplateDecoderImpl(const NetConfig& cfg, bool conditional)
    : cfg_(cfg), conditional_(conditional) {
    const int64_t deep = cfg.width(cfg.encoder_levels);
    int64_t latent_vox = 1;
    for (int64_t s : cfg.latent_size()) latent_vox *= s;
    if (!conditional) learned_input_ = register_parameter("learned_input", torch::randn({cfg.num_conditions}));
    embed_ = register_module(
        "embed", torch::nn::Sequential(torch::nn::Linear(cfg.num_conditions, cfg.condition_embed_dim),
                                       torch::nn::SiLU(),
                                       torch::nn::Linear(cfg.condition_embed_dim, deep * latent_vox)));
    trunk_ = register_module("trunk", Decoder(cfg, deep, cfg.image_channels, false, false));
    torch::NoGradGuard g;
    const double m = std::clamp(cfg.template_init_mean, 1e-3, 1.0 - 1e-3);
    trunk_->head()->bias().fill_(std::log(m / (1.0 - m)));
}

torch::Tensor TemplateDecoderImpl::forward(const torch::Tensor& cond) {
    const int64_t n = cond.size(0);
    const auto dtype = embed_->parameters().front().scalar_type();
    auto input = conditional_ ? cond.to(dtype) : learned_input_.unsqueeze(0);
    std::vector<int64_t> shape{input.size(0), cfg_.width(cfg_.encoder_levels)};
    for (int64_t s : cfg_.latent_size()) shape.push_back(s);
    auto out = torch::sigmoid(trunk_(embed_->forward(input).view(shape)));
    if (!conditional_) {
        std::vector<int64_t> ex(out.sizes().begin(), out.sizes().end());
        ex[0] = n;
        out = out.expand(ex);
    }
    return out;
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const NetConfig& cfg) {
    const int64_t d = cfg.spatial_dims(), w = cfg.discriminator_width;
    net_ = register_module(
        "net", torch::nn::Sequential(
                   ConvNd(ConvNdOptions{d, cfg.image_channels, w, 4, 2, 1}),
                   torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                   ConvNd(ConvNdOptions{d, w, 2 * w, 4, 2, 1}), group_norm(2 * w, cfg.norm_groups),
                   torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                   ConvNd(ConvNdOptions{d, 2 * w, 4 * w, 4, 2, 1}), group_norm(4 * w, cfg.norm_groups),
                   torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                   ConvNd(ConvNdOptions{d, 4 * w, 1, 3, 1, 1})));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return net_->forward(x); }

AttributePredictorImpl::AttributePredictorImpl(const NetConfig& cfg) : dims_(cfg.spatial_dims()) {
    int64_t in = cfg.image_channels;
    for (int64_t l = 0; l < 4; ++l) {
        const int64_t w = cfg.predictor_width * std::min<int64_t>(int64_t{1} << l, 4);
        torch::nn::Sequential level;
        for (int b = 0; b < 2; ++b) {
            level->push_back(ConvNd(ConvNdOptions{dims_, b == 0 ? in : w, w}));
            level->push_back(group_norm(w, cfg.norm_groups));
            level->push_back(torch::nn::ReLU());
        }
        levels_.push_back(register_module("level" + std::to_string(l), level));
        in = w;
    }
    feature_dim_ = in;
    head_ = register_module("head", torch::nn::Linear(in, 2));
}

AttributePrediction AttributePredictorImpl::forward(const torch::Tensor& x) {
    auto h = x;
    for (auto& level : levels_) {
        h = level->forward(h);
        h = dims_ == 2 ? F::avg_pool2d(h, F::AvgPool2dFuncOptions(2)) : F::avg_pool3d(h, F::AvgPool3dFuncOptions(2));
    }
    auto feats = spatial_mean(h);
    auto out = head_(feats);
    return {out.select(1, 0) * kAgeNormalizer, out.select(1, 1), feats};
}

// ---------------------------------------------------------------------------
// Diffusion UNet
// ---------------------------------------------------------------------------

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
    const int64_t half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat) / static_cast<double>(half));
    auto args = t.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2) emb = torch::cat({emb, torch::zeros({t.size(0), 1})}, 1);
    return emb;
}

DiffusionUNetImpl::DiffusionUNetImpl(const NetConfig& cfg, int64_t timesteps, int64_t extra_in)
    : cfg_(cfg), timesteps_(timesteps), extra_in_(extra_in) {
    cfg_.validate();
    const int64_t dims = cfg.spatial_dims();
    const auto& ch = cfg.unet_channels;
    const int64_t levels = static_cast<int64_t>(ch.size());
    const int64_t temb = 4 * ch[0];
    const int64_t ctx = cfg.condition_embed_dim;
    auto has_attn = [&](int64_t l) {
        return std::find(cfg.cross_attention_levels.begin(), cfg.cross_attention_levels.end(), l) !=
               cfg.cross_attention_levels.end();
    };

    conv_in_ = register_module("conv_in", ConvNd(ConvNdOptions{dims, cfg.latent_channels + extra_in, ch[0]}));
    time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(ch[0], temb), torch::nn::SiLU(),
                                                                  torch::nn::Linear(temb, temb)));
    cond_embed_ = register_module("cond_embed", ConditionEmbedder(ctx));

    int64_t cur = ch[0];
    for (int64_t l = 0; l < levels; ++l) {
        const auto tag = std::to_string(l);
        down_blocks_.push_back(register_module("down_block" + tag, ResBlock(dims, cur, ch[l], cfg.norm_groups, temb)));
        down_attn_.push_back(has_attn(l) ? register_module("down_attn" + tag,
                                                           CrossAttention(ch[l], ctx, cfg.attention_heads, cfg.norm_groups))
                                         : CrossAttention(nullptr));
        downs_.push_back(l + 1 < levels
                             ? register_module("down" + tag, ConvNd(ConvNdOptions{dims, ch[l], ch[l], 3, 2, 1}))
                             : ConvNd(nullptr));
        cur = ch[l];
    }
    mid1_ = register_module("mid1", ResBlock(dims, cur, cur, cfg.norm_groups, temb));
    mid_attn_ = register_module("mid_attn", CrossAttention(cur, ctx, cfg.attention_heads, cfg.norm_groups));
    mid2_ = register_module("mid2", ResBlock(dims, cur, cur, cfg.norm_groups, temb));
    for (int64_t l = levels - 1; l >= 0; --l) {
        const auto tag = std::to_string(l);
        up_blocks_.push_back(register_module("up_block" + tag, ResBlock(dims, cur + ch[l], ch[l], cfg.norm_groups, temb)));
        up_attn_.push_back(has_attn(l) ? register_module("up_attn" + tag,
                                                         CrossAttention(ch[l], ctx, cfg.attention_heads, cfg.norm_groups))
                                       : CrossAttention(nullptr));
        ups_.push_back(l > 0 ? register_module("up" + tag, ConvNd(ConvNdOptions{dims, ch[l], ch[l]})) : ConvNd(nullptr));
        cur = ch[l];
    }
    norm_out_ = register_module("norm_out", group_norm(ch[0], cfg.norm_groups));
    conv_out_ = register_module("conv_out", ConvNd(ConvNdOptions{dims, ch[0], cfg.latent_channels}));
}

torch::Tensor DiffusionUNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& cond) {
    if (t.numel() != z_t.size(0)) throw std::invalid_argument("unet: one timestep per batch element required");
    if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= timesteps_) {
        throw std::out_of_range("unet: timestep outside [0, T)");
    }
    const auto cond_f = cond.to(z_t.dtype());
    auto x = z_t;
    if (extra_in_ > 0) {
        std::vector<int64_t> sp(z_t.sizes().begin() + 2, z_t.sizes().end());
        x = torch::cat({x, condition_channels(cond_f, sp)}, 1);
    }
    auto temb = time_mlp_->forward(timestep_embedding(t, cfg_.unet_channels[0]).to(z_t.dtype()));
    auto ctx = cond_embed_(cond_f);

    // pad odd latent grids up to a multiple of the UNet stride, crop at the end
    const int64_t stride = int64_t{1} << (cfg_.unet_channels.size() - 1);
    std::vector<int64_t> pad, spatial(x.sizes().begin() + 2, x.sizes().end());
    for (auto it = spatial.rbegin(); it != spatial.rend(); ++it) {
        pad.push_back(0);
        pad.push_back((stride - *it % stride) % stride);
    }
    x = F::pad(x, F::PadFuncOptions(pad).mode(torch::kReplicate));

    auto h = conv_in_(x);
    std::vector<torch::Tensor> skips;
    for (size_t l = 0; l < down_blocks_.size(); ++l) {
        h = down_blocks_[l](h, temb);
        if (down_attn_[l]) h = down_attn_[l](h, ctx);
        skips.push_back(h);
        if (downs_[l]) h = downs_[l](h);
    }
    h = mid2_(mid_attn_(mid1_(h, temb), ctx), temb);
    for (size_t i = 0; i < up_blocks_.size(); ++i) {
        h = up_blocks_[i](torch::cat({h, skips[skips.size() - 1 - i]}, 1), temb);
        if (up_attn_[i]) h = up_attn_[i](h, ctx);
        if (ups_[i]) h = ups_[i](upsample2(h));
    }
    auto out = conv_out_(F::silu(norm_out_(h)));
    for (size_t d = 0; d < spatial.size(); ++d) out = out.narrow(static_cast<int64_t>(d) + 2, 0, spatial[d]);
    return out;
}

// ---------------------------------------------------------------------------
// Stage-1 bundle
// ---------------------------------------------------------------------------

Stage1ModelImpl::Stage1ModelImpl(const NetConfig& cfg, Variant variant) : cfg_(cfg), variant_(variant) {
    cfg_.validate();
    const bool cond = conditions_autoencoder(variant);
    const int64_t c = cfg.image_channels;
    if (is_morph(variant)) {
        template_ = register_module("template", TemplateDecoder(cfg, cond));
        encoder_ = register_module("encoder", Encoder(cfg, 2 * c, cond));
        decoder_ = register_module("decoder", Decoder(cfg, cfg.latent_channels, cfg.spatial_dims(), true, cond));
    } else {
        encoder_ = register_module("encoder", Encoder(cfg, c, cond));
        decoder_ = register_module("decoder", Decoder(cfg, cfg.latent_channels, c, false, cond));
    }
    disc_ = register_module("discriminator", PatchDiscriminator(cfg));
}

std::optional<torch::Tensor> Stage1ModelImpl::ae_cond(const torch::Tensor& cond) const {
    if (conditions_autoencoder(variant_)) return cond;
    return std::nullopt;
}

torch::Tensor Stage1ModelImpl::make_template(const torch::Tensor& cond) {
    if (!is_morph(variant_)) throw std::logic_error("plain autoencoder has no template");
    return template_(cond);
}

Latent Stage1ModelImpl::encode(const torch::Tensor& x, const torch::Tensor& cond) {
    if (is_morph(variant_)) return encoder_(torch::cat({x, make_template(cond).to(x.dtype())}, 1), ae_cond(cond));
    return encoder_(x, ae_cond(cond));
}

Stage1Outputs Stage1ModelImpl::decode(const torch::Tensor& z, const torch::Tensor& cond) {
    Stage1Outputs out;
    out.z = z;
    if (is_morph(variant_)) {
        out.templ = make_template(cond);
        out.displacement = decoder_(z, ae_cond(cond));
        out.reconstruction = apply_deformation(out.templ.contiguous(), out.displacement);
    } else {
        out.reconstruction = decoder_(z, ae_cond(cond));
    }
    return out;
}

Stage1Outputs Stage1ModelImpl::forward(const torch::Tensor& x, const torch::Tensor& cond, const torch::Tensor& noise) {
    Stage1Outputs out;
    if (is_morph(variant_)) {
        out.templ = make_template(cond);
        out.latent = encoder_(torch::cat({x, out.templ}, 1), ae_cond(cond));
        out.z = reparameterize(out.latent, noise);
        out.displacement = decoder_(out.z, ae_cond(cond));
        out.reconstruction = apply_deformation(out.templ.contiguous(), out.displacement);
    } else {
        out.latent = encoder_(x, ae_cond(cond));
        out.z = reparameterize(out.latent, noise);
        out.reconstruction = decoder_(out.z, ae_cond(cond));
    }
    return out;
}

std::vector<torch::Tensor> Stage1ModelImpl::generator_parameters() {
    std::vector<torch::Tensor> p;
    for (auto& m : std::vector<std::shared_ptr<torch::nn::Module>>{encoder_.ptr(), decoder_.ptr()}) {
        for (auto& t : m->parameters()) p.push_back(t);
    }
    if (template_) {
        for (auto& t : template_->parameters()) p.push_back(t);
    }
    return p;
}

std::vector<torch::Tensor> Stage1ModelImpl::discriminator_parameters() { return disc_->parameters(); }

}  // namespace morphldm
