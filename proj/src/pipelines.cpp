#include "morphldm/pipelines.hpp"

#include "morphldm/fields.hpp"
#include "morphldm/losses.hpp"
#include "morphldm/phantoms.hpp"
#include "morphldm/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

namespace morphldm {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// paths left out so a run directory can move
json recorded_config(const RunConfig& c) {
    auto j = to_json(c);
    for (const char* k : {"dataset", "output", "stage1_checkpoint", "stage2_checkpoint"}) j.erase(k);
    return j;
}

// step and model.pt checksum of a stage-1 checkpoint
std::string stage1_identity(const fs::path& dir) {
    std::ifstream in(dir / "model.pt", std::ios::binary);
    if (!in) throw CheckpointError("cannot read " + (dir / "model.pt").string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char crc[9];
    std::snprintf(crc, sizeof crc, "%08x", crc32_bytes(bytes.data(), bytes.size()));
    return std::to_string(read_checkpoint_meta(dir).step) + ":" + crc;
}

void require_stage1_match(const CheckpointMeta& stage2_meta, const std::string& stage1_id, const fs::path& stage2_dir) {
    const auto it = stage2_meta.extra.find("stage1_model");
    if (it == stage2_meta.extra.end() || *it != stage1_id) {
        throw CheckpointError("stage-2 checkpoint at '" + stage2_dir.string() +
                              "' was trained on a different stage-1 model");
    }
}

void say(const TrainOptions& o, const std::string& msg) {
    if (o.log) o.log(msg);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string components_line(const std::map<std::string, double>& v) {
    std::string s;
    for (const auto& [k, x] : v) s += (s.empty() ? "" : " ") + k + "=" + fmt(x);
    return s;
}

Dataset load_training_data(const RunConfig& cfg) {
    if (cfg.dataset.empty()) throw ConfigError("config has no dataset path");
    auto ds = read_dataset(cfg.dataset);
    if (ds.spatial() != cfg.net.image_size || ds.images.size(1) != cfg.net.image_channels) {
        throw ConfigError("dataset " + cfg.dataset.string() + " does not match net.image_size / image_channels");
    }
    return ds;
}

torch::Tensor dataset_conditions(const Dataset& ds) {
    std::vector<Condition> c;
    c.reserve(ds.records.size());
    for (const auto& r : ds.records) c.push_back({r.age, r.sex});
    return condition_tensor(c);
}

torch::Tensor index_tensor(const std::vector<int64_t>& idx) { return torch::tensor(idx, torch::kLong); }

/// Maps sampler draws (positions within `subset`) back to dataset indices.
std::vector<int64_t> draw_indices(const AgeBinnedSampler& sampler, const std::vector<int64_t>& subset, int64_t n,
                                  uint64_t seed) {
    auto pos = sampler.draw_batch(n, seed);
    for (auto& p : pos) p = subset[static_cast<size_t>(p)];
    return pos;
}

std::vector<double> subset_ages(const Dataset& ds, const std::vector<int64_t>& subset) {
    std::vector<double> a;
    a.reserve(subset.size());
    for (int64_t i : subset) a.push_back(ds.records[static_cast<size_t>(i)].age);
    return a;
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

torch::optim::AdamOptions adam(double lr) { return torch::optim::AdamOptions(lr); }

void check_finite(int64_t step, const std::map<std::string, double>& values) {
    for (const auto& [_, v] : values) {
        if (!std::isfinite(v)) throw TrainingAbort(step, values);
    }
}

std::vector<LossRecord> restore_history(const fs::path& csv, int64_t start) {
    std::vector<LossRecord> rows;
    if (!fs::exists(csv)) return rows;
    for (auto& r : read_loss_csv(csv)) {
        if (r.step < start) rows.push_back(std::move(r));
    }
    return rows;
}

bool at_boundary(int64_t done, int64_t every, int64_t last) { return done % every == 0 || done == last; }

}  // namespace

TrainingAbort::TrainingAbort(int64_t step, std::map<std::string, double> components)
    : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + components_line(components)),
      step_(step),
      components_(std::move(components)) {}

fs::path stage1_dir(const RunConfig& c) { return c.output / "stage1"; }
fs::path stage2_dir(const RunConfig& c) { return c.output / "stage2"; }
fs::path predictor_dir(const RunConfig& c) { return c.output / "predictor"; }

json stage1_signature(const RunConfig& c) { return {{"variant", to_string(c.variant)}, {"net", to_json(c.net)}}; }

json stage2_signature(const RunConfig& c) {
    return {{"variant", to_string(c.variant)}, {"net", to_json(c.net)}, {"diffusion", to_json(c.diffusion)}};
}

json predictor_signature(const NetConfig& c) { return {{"net", to_json(c)}}; }

std::pair<std::vector<int64_t>, std::vector<int64_t>> train_validation_split(int64_t n, double fraction) {
    const auto n_val = static_cast<int64_t>(std::floor(static_cast<double>(n) * fraction));
    if (n - n_val < 1) throw std::invalid_argument("validation split leaves no training samples");
    std::vector<int64_t> train, val;
    for (int64_t i = 0; i < n; ++i) (i < n - n_val ? train : val).push_back(i);
    return {train, val};
}

double reconstruction_l1(Stage1Model& model, const Dataset& ds, const std::vector<int64_t>& indices, int64_t batch) {
    if (indices.empty()) return std::numeric_limits<double>::quiet_NaN();
    torch::NoGradGuard guard;
    const auto conds = dataset_conditions(ds);
    double sum = 0;
    int64_t count = 0;
    for (size_t s = 0; s < indices.size(); s += static_cast<size_t>(batch)) {
        std::vector<int64_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(s),
                                   indices.begin() + static_cast<std::ptrdiff_t>(
                                                         std::min(indices.size(), s + static_cast<size_t>(batch))));
        auto idx = index_tensor(chunk);
        auto x = ds.images.index_select(0, idx);
        auto c = conds.index_select(0, idx);
        auto lat = model->encode(x, c);
        auto out = model->decode(lat.mu, c);
        sum += (out.reconstruction - x).abs().sum().item<double>();
        count += x.numel();
    }
    return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

TrainResult train_stage1(const RunConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    const auto ds = load_training_data(cfg);
    const auto& tc = cfg.stage1;
    const auto [train_idx, val_idx] = train_validation_split(ds.size(), tc.validation_fraction);
    const auto conds = dataset_conditions(ds);
    const AgeBinnedSampler sampler(subset_ages(ds, train_idx));

    torch::manual_seed(derive_seed(cfg.seed, "stage1/init"));
    Stage1Model model(cfg.net, cfg.variant);
    torch::optim::Adam gen_opt(model->generator_parameters(), adam(tc.lr));
    torch::optim::Adam disc_opt(model->discriminator_parameters(), adam(tc.lr));
    std::map<std::string, torch::optim::Optimizer*> optims{{"", &gen_opt}};
    if (tc.adversarial) optims["disc"] = &disc_opt;

    const fs::path dir = stage1_dir(cfg);
    TrainResult res;
    res.checkpoint = dir;
    if (opts.resume && checkpoint_exists(dir)) {
        const auto meta = load_checkpoint(dir, *model, optims, "stage1", stage1_signature(cfg));
        if (meta.dataset_fingerprint != ds.fingerprint()) {
            throw CheckpointError("stage-1 checkpoint was trained on a different dataset");
        }
        res.start_step = meta.step;
        res.history = restore_history(dir / "loss.csv", res.start_step);
        say(opts, "resumed stage 1 at step " + std::to_string(res.start_step));
    }

    const std::vector<std::string> columns{"total", "l1", "adversarial", "magnitude", "smoothness",
                                           "kl",    "disc",       "lr",          "val_l1"};
    auto save = [&](int64_t step) {
        CheckpointMeta meta{"stage1", step, stage1_signature(cfg), ds.fingerprint(), json::object()};
        meta.extra["run_config"] = recorded_config(cfg);
        save_checkpoint(dir, *model, optims, meta);
        write_loss_csv(dir / "loss.csv", columns, res.history);
    };

    const int64_t last = tc.steps;
    const int64_t stop = opts.stop_after >= 0 ? std::min(last, opts.stop_after) : last;
    const auto lat_size = cfg.net.latent_size();
    int64_t step = res.start_step;
    model->train();
    while (step < stop) {
        const double lr = tc.lr_at(step);
        set_lr(gen_opt, lr);
        set_lr(disc_opt, lr);
        const auto idx = index_tensor(
            draw_indices(sampler, train_idx, tc.batch_size, derive_seed(cfg.seed, "stage1/batch", {uint64_t(step)})));
        auto x = ds.images.index_select(0, idx);
        auto c = conds.index_select(0, idx);
        auto gen = make_generator(derive_seed(cfg.seed, "stage1/noise", {uint64_t(step)}));
        std::vector<int64_t> zshape{tc.batch_size, cfg.net.latent_channels};
        zshape.insert(zshape.end(), lat_size.begin(), lat_size.end());
        auto noise = torch::randn(zshape, gen, torch::kFloat);

        auto out = model->forward(x, c, noise);
        torch::Tensor fake_scores;
        if (tc.adversarial) fake_scores = model->discriminator()->forward(out.reconstruction);
        auto terms = stage1_objective(x, out.reconstruction, out.displacement, out.latent, cfg.weights, fake_scores);
        LossRecord rec{step, terms.values()};
        rec.values["lr"] = lr;
        check_finite(step, rec.values);
        gen_opt.zero_grad();
        terms.total.backward();
        gen_opt.step();

        if (tc.adversarial) {
            disc_opt.zero_grad();
            auto real = model->discriminator()->forward(x);
            auto fake = model->discriminator()->forward(out.reconstruction.detach());
            auto d = adversarial_losses(real, fake).discriminator;
            rec.values["disc"] = d.item<double>();
            check_finite(step, rec.values);
            d.backward();
            disc_opt.step();
        }
        ++step;

        const bool validate_now = !val_idx.empty() && at_boundary(step, tc.validate_every, last);
        if (validate_now) {
            rec.values["val_l1"] = reconstruction_l1(model, ds, val_idx);
            model->train();
        }
        res.history.push_back(rec);
        if (step % tc.log_every == 0 || step == stop) {
            say(opts, "stage1 step " + std::to_string(step) + " " + components_line(rec.values));
        }
        const bool early = validate_now && tc.early_stop_val_l1 > 0 && rec.values["val_l1"] < tc.early_stop_val_l1;
        if (at_boundary(step, tc.checkpoint_every, stop) || early) save(step);
        if (early) {
            say(opts, "held-out L1 below " + fmt(tc.early_stop_val_l1) + " at step " + std::to_string(step));
            break;
        }
    }
    if (step == res.start_step) save(step);
    res.end_step = step;
    return res;
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

Stage1Model load_stage1(const RunConfig& cfg, const fs::path& dir) {
    Stage1Model model(cfg.net, cfg.variant);
    load_checkpoint(dir, *model, {}, "stage1", stage1_signature(cfg));
    model->eval();
    return model;
}

Stage2Bundle load_stage2(const RunConfig& cfg, const fs::path& dir) {
    Stage2Bundle b;
    b.unet = DiffusionUNet(cfg.net, cfg.diffusion.timesteps, conditions_autoencoder(cfg.variant) ? 2 : 0);
    const auto meta = load_checkpoint(dir, *b.unet, {}, "stage2", stage2_signature(cfg));
    b.scaler.scale = meta.extra.at("latent_scale").get<double>();
    b.scaler.validate();
    b.schedule = cfg.diffusion.make();
    b.unet->eval();
    return b;
}

TrainResult train_stage2(const RunConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    if (cfg.stage1_checkpoint.empty()) throw ConfigError("stage 2 needs stage1_checkpoint in the config");
    if (!checkpoint_exists(cfg.stage1_checkpoint)) {
        throw ConfigError("stage-1 checkpoint not found at " + cfg.stage1_checkpoint.string());
    }
    const auto ds = load_training_data(cfg);
    auto stage1 = load_stage1(cfg, cfg.stage1_checkpoint);
    for (auto& p : stage1->parameters()) p.set_requires_grad(false);
    const auto& tc = cfg.stage2;
    const auto [train_idx, val_idx] = train_validation_split(ds.size(), cfg.stage1.validation_fraction);
    (void)val_idx;
    const auto conds = dataset_conditions(ds);
    const AgeBinnedSampler sampler(subset_ages(ds, train_idx));

    // Stage 1 is frozen and deterministic, so latent means are computed once.
    torch::Tensor mu;
    {
        torch::NoGradGuard guard;
        std::vector<torch::Tensor> parts;
        for (int64_t s = 0; s < ds.size(); s += 64) {
            const int64_t e = std::min(ds.size(), s + 64);
            parts.push_back(stage1->encode(ds.images.slice(0, s, e), conds.slice(0, s, e)).mu);
        }
        mu = torch::cat(parts, 0);
    }

    torch::manual_seed(derive_seed(cfg.seed, "stage2/init"));
    DiffusionUNet unet(cfg.net, cfg.diffusion.timesteps, conditions_autoencoder(cfg.variant) ? 2 : 0);
    torch::optim::Adam opt(unet->parameters(), adam(tc.lr));
    const auto sched = cfg.diffusion.make();

    const fs::path dir = stage2_dir(cfg);
    TrainResult res;
    res.checkpoint = dir;
    LatentScaler scaler;
    const auto stage1_meta = read_checkpoint_meta(cfg.stage1_checkpoint);
    const auto stage1_id = stage1_identity(cfg.stage1_checkpoint);
    if (stage1_meta.dataset_fingerprint != ds.fingerprint()) {
        say(opts, "warning: stage-1 checkpoint was trained on a different dataset");
    }
    if (opts.resume && checkpoint_exists(dir)) {
        const auto meta = load_checkpoint(dir, *unet, {{"", &opt}}, "stage2", stage2_signature(cfg));
        require_stage1_match(meta, stage1_id, dir);
        scaler.scale = meta.extra.at("latent_scale").get<double>();
        res.start_step = meta.step;
        res.history = restore_history(dir / "loss.csv", res.start_step);
        say(opts, "resumed stage 2 at step " + std::to_string(res.start_step));
    } else {
        const auto calib = draw_indices(sampler, train_idx, std::max<int64_t>(64, tc.batch_size),
                                        derive_seed(cfg.seed, "stage2/calibration"));
        scaler = LatentScaler::calibrate(mu.index_select(0, index_tensor(calib)));
        say(opts, "latent scale " + fmt(scaler.scale));
    }

    const std::vector<std::string> columns{"loss", "lr"};
    auto save = [&](int64_t step) {
        CheckpointMeta meta{"stage2", step, stage2_signature(cfg), ds.fingerprint(), json::object()};
        meta.extra["latent_scale"] = scaler.scale;
        meta.extra["stage1_step"] = stage1_meta.step;
        meta.extra["stage1_model"] = stage1_id;
        meta.extra["run_config"] = recorded_config(cfg);
        save_checkpoint(dir, *unet, {{"", &opt}}, meta);
        write_loss_csv(dir / "loss.csv", columns, res.history);
    };

    const EpsModel eps = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) {
        return unet->forward(z, t, c);
    };
    const int64_t stop = opts.stop_after >= 0 ? std::min(tc.steps, opts.stop_after) : tc.steps;
    int64_t step = res.start_step;
    unet->train();
    while (step < stop) {
        const double lr = tc.lr_at(step);
        set_lr(opt, lr);
        const auto idx = index_tensor(
            draw_indices(sampler, train_idx, tc.batch_size, derive_seed(cfg.seed, "stage2/batch", {uint64_t(step)})));
        auto z0 = scaler.apply(mu.index_select(0, idx));
        auto c = conds.index_select(0, idx);
        auto gen = make_generator(derive_seed(cfg.seed, "stage2/noise", {uint64_t(step)}));
        auto loss = training_step(z0, c, eps, sched, gen);
        LossRecord rec{step, {{"loss", loss.item<double>()}, {"lr", lr}}};
        check_finite(step, rec.values);
        opt.zero_grad();
        loss.backward();
        opt.step();
        ++step;
        res.history.push_back(rec);
        if (step % tc.log_every == 0 || step == stop) {
            say(opts, "stage2 step " + std::to_string(step) + " " + components_line(rec.values));
        }
        if (at_boundary(step, tc.checkpoint_every, stop)) save(step);
    }
    if (step == res.start_step) save(step);
    res.end_step = step;
    return res;
}

// ---------------------------------------------------------------------------
// Attribute predictor
// ---------------------------------------------------------------------------

AttributePredictor load_predictor(const fs::path& dir) {
    const auto meta = read_checkpoint_meta(dir);
    if (meta.kind != "predictor") throw CheckpointError(dir.string() + " is not a predictor checkpoint");
    const auto net = net_config_from_json(meta.config.at("net"));
    AttributePredictor p(net);
    load_checkpoint(dir, *p, {}, "predictor", predictor_signature(net));
    p->eval();
    return p;
}

TrainResult train_predictor(const RunConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    const auto ds = load_training_data(cfg);
    const auto& tc = cfg.predictor;
    const auto [train_idx, val_idx] = train_validation_split(ds.size(), tc.validation_fraction);
    const auto conds = dataset_conditions(ds);
    const AgeBinnedSampler sampler(subset_ages(ds, train_idx));

    torch::manual_seed(derive_seed(cfg.seed, "predictor/init"));
    AttributePredictor model(cfg.net);
    torch::optim::Adam opt(model->parameters(), adam(tc.lr));
    const fs::path dir = predictor_dir(cfg);
    TrainResult res;
    res.checkpoint = dir;
    if (opts.resume && checkpoint_exists(dir)) {
        const auto meta = load_checkpoint(dir, *model, {{"", &opt}}, "predictor", predictor_signature(cfg.net));
        res.start_step = meta.step;
        res.history = restore_history(dir / "loss.csv", res.start_step);
    }

    auto evaluate = [&](std::map<std::string, double>& out) {
        torch::NoGradGuard guard;
        model->eval();
        double abs_err = 0, correct = 0;
        for (size_t s = 0; s < val_idx.size(); s += 100) {
            std::vector<int64_t> chunk(val_idx.begin() + static_cast<std::ptrdiff_t>(s),
                                       val_idx.begin() + static_cast<std::ptrdiff_t>(std::min(val_idx.size(), s + 100)));
            auto idx = index_tensor(chunk);
            auto pred = model->forward(ds.images.index_select(0, idx));
            auto c = conds.index_select(0, idx);
            abs_err += (pred.age - c.select(1, 0) * kAgeNormalizer).abs().sum().item<double>();
            correct += ((pred.sex_logit > 0).to(torch::kFloat) == c.select(1, 1)).sum().item<double>();
        }
        out["val_age_mae"] = abs_err / static_cast<double>(val_idx.size());
        out["val_sex_acc"] = correct / static_cast<double>(val_idx.size());
        model->train();
    };

    const std::vector<std::string> columns{"loss", "age_loss", "sex_loss", "lr", "val_age_mae", "val_sex_acc"};
    auto save = [&](int64_t step) {
        CheckpointMeta meta{"predictor", step, predictor_signature(cfg.net), ds.fingerprint(), json::object()};
        save_checkpoint(dir, *model, {{"", &opt}}, meta);
        write_loss_csv(dir / "loss.csv", columns, res.history);
    };

    const int64_t stop = opts.stop_after >= 0 ? std::min(tc.steps, opts.stop_after) : tc.steps;
    int64_t step = res.start_step;
    model->train();
    while (step < stop) {
        const double lr = tc.lr_at(step);
        set_lr(opt, lr);
        const auto idx = index_tensor(
            draw_indices(sampler, train_idx, tc.batch_size, derive_seed(cfg.seed, "predictor/batch", {uint64_t(step)})));
        auto x = ds.images.index_select(0, idx);
        auto c = conds.index_select(0, idx);
        auto pred = model->forward(x);
        auto age_loss = torch::mse_loss(pred.age / kAgeNormalizer, c.select(1, 0));
        auto sex_loss = torch::binary_cross_entropy_with_logits(pred.sex_logit, c.select(1, 1));
        auto loss = age_loss + sex_loss;
        LossRecord rec{step,
                       {{"loss", loss.item<double>()},
                        {"age_loss", age_loss.item<double>()},
                        {"sex_loss", sex_loss.item<double>()},
                        {"lr", lr}}};
        check_finite(step, rec.values);
        opt.zero_grad();
        loss.backward();
        opt.step();
        ++step;
        if (!val_idx.empty() && at_boundary(step, tc.log_every, tc.steps)) evaluate(rec.values);
        res.history.push_back(rec);
        if (step % tc.log_every == 0 || step == stop) {
            say(opts, "predictor step " + std::to_string(step) + " " + components_line(rec.values));
        }
        if (at_boundary(step, tc.checkpoint_every, stop)) save(step);
    }
    if (step == res.start_step) save(step);
    res.end_step = step;
    return res;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

void ConditionPlan::validate() const {
    if (n < 1) throw std::invalid_argument("sample count must be >= 1");
    if (!(age_min <= age_max)) throw std::invalid_argument("age range must satisfy min <= max");
    for (double a : {age_min, age_max}) morphldm::validate(Condition{a, 0});
    if (!(sex_balance >= 0 && sex_balance <= 1)) throw std::invalid_argument("sex balance must lie in [0, 1]");
}

std::vector<Condition> ConditionPlan::conditions() const {
    validate();
    std::vector<Condition> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        const double age = age_min + f * (age_max - age_min);
        const int sex = static_cast<int>(std::floor(static_cast<double>(i + 1) * sex_balance) -
                                         std::floor(static_cast<double>(i) * sex_balance));
        out[static_cast<size_t>(i)] = Condition{age, sex};
    }
    return out;
}

Dataset generate_samples(const RunConfig& cfg, const ConditionPlan& plan, uint64_t seed, int64_t chunk,
                         const std::function<void(const std::string&)>& log) {
    cfg.validate();
    const auto conds = plan.conditions();
    if (chunk < 1) throw std::invalid_argument("chunk must be >= 1");
    for (const auto& [p, what] : {std::pair{cfg.stage1_checkpoint, "stage-1"}, std::pair{cfg.stage2_checkpoint, "stage-2"}}) {
        if (p.empty() || !checkpoint_exists(p)) {
            throw CheckpointError(std::string(what) + " checkpoint not found at '" + p.string() + "'");
        }
    }
    auto stage1 = load_stage1(cfg, cfg.stage1_checkpoint);
    auto stage2 = load_stage2(cfg, cfg.stage2_checkpoint);
    require_stage1_match(read_checkpoint_meta(cfg.stage2_checkpoint), stage1_identity(cfg.stage1_checkpoint),
                         cfg.stage2_checkpoint);
    torch::NoGradGuard guard;
    const EpsModel eps = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) {
        return stage2.unet->forward(z, t, c);
    };

    const int64_t n = plan.n;
    const bool morph = is_morph(cfg.variant);
    const auto lat = cfg.net.latent_size();
    Dataset ds;
    ds.kind = "synthetic";
    std::vector<torch::Tensor> images, fields, templates, labels;
    std::vector<uint64_t> seeds(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        seeds[static_cast<size_t>(i)] = derive_seed(seed, "sample", {static_cast<uint64_t>(i)});
        char id[32];
        std::snprintf(id, sizeof id, "g%06lld", static_cast<long long>(i));
        ds.records.push_back({id, conds[static_cast<size_t>(i)].age, conds[static_cast<size_t>(i)].sex,
                              seeds[static_cast<size_t>(i)]});
    }
    for (int64_t s = 0; s < n; s += chunk) {
        const int64_t e = std::min(n, s + chunk);
        auto c = condition_tensor(std::span(conds).subspan(static_cast<size_t>(s), static_cast<size_t>(e - s)));
        std::vector<int64_t> shape{e - s, cfg.net.latent_channels};
        shape.insert(shape.end(), lat.begin(), lat.end());
        auto z = ddpm_sample(eps, c, stage2.schedule, shape,
                             std::span<const uint64_t>(seeds).subspan(static_cast<size_t>(s), static_cast<size_t>(e - s)));
        auto out = stage1->decode(stage2.scaler.invert(z), c);
        if (morph) {
            images.push_back(out.reconstruction.contiguous());
            fields.push_back(out.displacement.contiguous());
            templates.push_back(out.templ.contiguous());
            labels.push_back(warp_label_batch(segment_by_intensity(out.templ), out.displacement, kNumRegions));
        } else {
            images.push_back(out.reconstruction.clamp(0.0, 1.0).contiguous());
        }
        if (log) log("sampled " + std::to_string(e) + "/" + std::to_string(n));
    }
    ds.images = torch::cat(images, 0);
    if (morph) {
        ds.fields = torch::cat(fields, 0);
        ds.templates = torch::cat(templates, 0);
        ds.labels = torch::cat(labels, 0);
    }
    ds.metadata = {{"variant", to_string(cfg.variant)},
                   {"seed", seed},
                   {"plan", {{"n", plan.n}, {"age_min", plan.age_min}, {"age_max", plan.age_max},
                             {"sex_balance", plan.sex_balance}}},
                   {"stage1_step", read_checkpoint_meta(cfg.stage1_checkpoint).step},
                   {"stage2_step", read_checkpoint_meta(cfg.stage2_checkpoint).step},
                   {"labels", morph ? "warped template labels" : "none"}};
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Loss CSV
// ---------------------------------------------------------------------------

void write_loss_csv(const fs::path& file, const std::vector<std::string>& columns, const std::vector<LossRecord>& rows) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "step";
    for (const auto& c : columns) out << "," << c;
    out << "\n";
    for (const auto& r : rows) {
        out << r.step;
        for (const auto& c : columns) {
            out << ",";
            if (auto it = r.values.find(c); it != r.values.end()) out << fmt(it->second);
        }
        out << "\n";
    }
}

std::vector<LossRecord> read_loss_csv(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    std::vector<LossRecord> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        LossRecord r;
        for (size_t k = 0; std::getline(ss, cell, ','); ++k) {
            if (k == 0) {
                r.step = std::stoll(cell);
            } else if (!cell.empty() && k < header.size()) {
                r.values[header[k]] = std::stod(cell);
            }
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace morphldm
