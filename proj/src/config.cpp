#include "morphldm/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>

namespace morphldm {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
}

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

json train_json(const TrainConfig& t) {
    return {{"steps", t.steps},       {"batch_size", t.batch_size}, {"lr", t.lr},
            {"warmup", t.warmup},     {"log_every", t.log_every},   {"checkpoint_every", t.checkpoint_every}};
}

void read_train(const json& j, TrainConfig& t, const std::string& where) {
    read(j, "steps", t.steps, where);
    read(j, "batch_size", t.batch_size, where);
    read(j, "lr", t.lr, where);
    read(j, "warmup", t.warmup, where);
    read(j, "log_every", t.log_every, where);
    read(j, "checkpoint_every", t.checkpoint_every, where);
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

}  // namespace

double TrainConfig::lr_at(int64_t step) const {
    if (warmup <= 0) return lr;
    return lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

void TrainConfig::validate(const char* section) const {
    const std::string s(section);
    if (steps < 0) throw ConfigError(s + ".steps must be >= 0");
    if (batch_size < 1) throw ConfigError(s + ".batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError(s + ".lr must be positive");
    if (warmup < 0) throw ConfigError(s + ".warmup must be >= 0");
    if (log_every < 1) throw ConfigError(s + ".log_every must be >= 1");
    if (checkpoint_every < 1) throw ConfigError(s + ".checkpoint_every must be >= 1");
}

void RunConfig::validate() const {
    try {
        net.validate();
        weights.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    stage1.validate("stage1");
    stage2.validate("stage2");
    predictor.validate("predictor");
    if (!(stage1.validation_fraction >= 0 && stage1.validation_fraction < 1)) {
        throw ConfigError("stage1.validation_fraction must lie in [0, 1)");
    }
    if (!(predictor.validation_fraction >= 0 && predictor.validation_fraction < 1)) {
        throw ConfigError("predictor.validation_fraction must lie in [0, 1)");
    }
    if (stage1.validate_every < 1) throw ConfigError("stage1.validate_every must be >= 1");
    if (!(stage1.early_stop_val_l1 >= 0)) throw ConfigError("stage1.early_stop_val_l1 must be >= 0");
    if (diffusion.timesteps < 2) throw ConfigError("diffusion.timesteps must be >= 2");
    if (!(diffusion.beta_min > 0 && diffusion.beta_min <= diffusion.beta_max && diffusion.beta_max < 1)) {
        throw ConfigError("diffusion betas must satisfy 0 < beta_min <= beta_max < 1");
    }
}

json to_json(const NetConfig& c) {
    return {{"image_size", c.image_size},
            {"image_channels", c.image_channels},
            {"latent_channels", c.latent_channels},
            {"encoder_levels", c.encoder_levels},
            {"base_width", c.base_width},
            {"unet_channels", c.unet_channels},
            {"cross_attention_levels", c.cross_attention_levels},
            {"condition_embed_dim", c.condition_embed_dim},
            {"attention_heads", c.attention_heads},
            {"num_conditions", c.num_conditions},
            {"predictor_width", c.predictor_width},
            {"discriminator_width", c.discriminator_width},
            {"norm_groups", c.norm_groups},
            {"template_init_mean", c.template_init_mean}};
}

NetConfig net_config_from_json(const json& j) {
    const std::string w = "net";
    require_object(j, w);
    reject_unknown(j, w,
                   {"image_size", "image_channels", "latent_channels", "encoder_levels", "base_width",
                    "unet_channels", "cross_attention_levels", "condition_embed_dim", "attention_heads",
                    "num_conditions", "predictor_width", "discriminator_width", "norm_groups",
                    "template_init_mean"});
    NetConfig c;
    read(j, "image_size", c.image_size, w);
    read(j, "image_channels", c.image_channels, w);
    read(j, "latent_channels", c.latent_channels, w);
    read(j, "encoder_levels", c.encoder_levels, w);
    read(j, "base_width", c.base_width, w);
    read(j, "unet_channels", c.unet_channels, w);
    read(j, "cross_attention_levels", c.cross_attention_levels, w);
    read(j, "condition_embed_dim", c.condition_embed_dim, w);
    read(j, "attention_heads", c.attention_heads, w);
    read(j, "num_conditions", c.num_conditions, w);
    read(j, "predictor_width", c.predictor_width, w);
    read(j, "discriminator_width", c.discriminator_width, w);
    read(j, "norm_groups", c.norm_groups, w);
    read(j, "template_init_mean", c.template_init_mean, w);
    return c;
}

json to_json(const Stage1Weights& w) {
    return {{"alpha", w.alpha}, {"beta", w.beta}, {"kl_weight", w.kl_weight}, {"adv_weight", w.adv_weight}};
}

Stage1Weights stage1_weights_from_json(const json& j) {
    const std::string w = "weights";
    require_object(j, w);
    reject_unknown(j, w, {"alpha", "beta", "kl_weight", "adv_weight"});
    Stage1Weights s;
    read(j, "alpha", s.alpha, w);
    read(j, "beta", s.beta, w);
    read(j, "kl_weight", s.kl_weight, w);
    read(j, "adv_weight", s.adv_weight, w);
    return s;
}

json to_json(const DiffusionConfig& d) {
    return {{"timesteps", d.timesteps},
            {"schedule", to_string(d.schedule)},
            {"beta_min", d.beta_min},
            {"beta_max", d.beta_max}};
}

DiffusionConfig diffusion_config_from_json(const json& j) {
    const std::string w = "diffusion";
    require_object(j, w);
    reject_unknown(j, w, {"timesteps", "schedule", "beta_min", "beta_max"});
    DiffusionConfig d;
    read(j, "timesteps", d.timesteps, w);
    std::string kind = to_string(d.schedule);
    read(j, "schedule", kind, w);
    try {
        d.schedule = schedule_kind_from_string(kind);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("diffusion.schedule: ") + e.what());
    }
    read(j, "beta_min", d.beta_min, w);
    read(j, "beta_max", d.beta_max, w);
    return d;
}

json to_json(const RunConfig& c) {
    json s1 = train_json(c.stage1);
    s1["adversarial"] = c.stage1.adversarial;
    s1["validation_fraction"] = c.stage1.validation_fraction;
    s1["validate_every"] = c.stage1.validate_every;
    s1["early_stop_val_l1"] = c.stage1.early_stop_val_l1;
    json pred = train_json(c.predictor);
    pred["validation_fraction"] = c.predictor.validation_fraction;
    return {{"version", kConfigVersion},
            {"variant", to_string(c.variant)},
            {"seed", c.seed},
            {"dataset", c.dataset.string()},
            {"output", c.output.string()},
            {"stage1_checkpoint", c.stage1_checkpoint.string()},
            {"stage2_checkpoint", c.stage2_checkpoint.string()},
            {"net", to_json(c.net)},
            {"weights", to_json(c.weights)},
            {"diffusion", to_json(c.diffusion)},
            {"stage1", s1},
            {"stage2", train_json(c.stage2)},
            {"predictor", pred}};
}

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
    require_object(j, "config");
    reject_unknown(j, "config",
                   {"version", "variant", "seed", "dataset", "output", "stage1_checkpoint", "stage2_checkpoint",
                    "net", "weights", "diffusion", "stage1", "stage2", "predictor", "conditional_template"});
    int version = kConfigVersion;
    read(j, "version", version, "config");
    if (version != kConfigVersion) {
        throw ConfigError("config version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kConfigVersion) + ")");
    }
    RunConfig c;
    std::string variant = to_string(c.variant);
    read(j, "variant", variant, "config");
    try {
        c.variant = variant_from_string(variant);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("variant: ") + e.what());
    }
    if (j.contains("conditional_template")) {
        bool cond = false;
        read(j, "conditional_template", cond, "config");
        if (!is_morph(c.variant)) throw ConfigError("conditional_template only applies to morphldm variants");
        if (cond != conditions_autoencoder(c.variant)) {
            throw ConfigError("conditional_template=" + std::string(cond ? "true" : "false") +
                              " contradicts variant " + variant);
        }
    }
    read(j, "seed", c.seed, "config");
    std::string path;
    for (auto [key, field] : {std::pair{"dataset", &c.dataset}, std::pair{"output", &c.output},
                              std::pair{"stage1_checkpoint", &c.stage1_checkpoint},
                              std::pair{"stage2_checkpoint", &c.stage2_checkpoint}}) {
        path.clear();
        read(j, key, path, "config");
        *field = resolve(path, base_dir);
    }
    if (j.contains("net")) c.net = net_config_from_json(j["net"]);
    if (j.contains("weights")) c.weights = stage1_weights_from_json(j["weights"]);
    if (j.contains("diffusion")) c.diffusion = diffusion_config_from_json(j["diffusion"]);
    if (j.contains("stage1")) {
        const auto& s = j["stage1"];
        require_object(s, "stage1");
        reject_unknown(s, "stage1",
                       {"steps", "batch_size", "lr", "warmup", "log_every", "checkpoint_every", "adversarial",
                        "validation_fraction", "validate_every", "early_stop_val_l1"});
        read_train(s, c.stage1, "stage1");
        read(s, "adversarial", c.stage1.adversarial, "stage1");
        read(s, "validation_fraction", c.stage1.validation_fraction, "stage1");
        read(s, "validate_every", c.stage1.validate_every, "stage1");
        read(s, "early_stop_val_l1", c.stage1.early_stop_val_l1, "stage1");
    }
    if (j.contains("stage2")) {
        const auto& s = j["stage2"];
        require_object(s, "stage2");
        reject_unknown(s, "stage2", {"steps", "batch_size", "lr", "warmup", "log_every", "checkpoint_every"});
        read_train(s, c.stage2, "stage2");
    }
    if (j.contains("predictor")) {
        const auto& s = j["predictor"];
        require_object(s, "predictor");
        reject_unknown(s, "predictor",
                       {"steps", "batch_size", "lr", "warmup", "log_every", "checkpoint_every",
                        "validation_fraction"});
        read_train(s, c.predictor, "predictor");
        read(s, "validation_fraction", c.predictor.validation_fraction, "predictor");
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j, file.parent_path());
}

void save_run_config(const RunConfig& c, const fs::path& file) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << to_json(c).dump(2) << "\n";
}

}  // namespace morphldm
