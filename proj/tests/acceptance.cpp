// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero if any fail.
//
// Heavy phases (data, training, sampling, evaluation) cache their results under
// --workdir as <phase>.done.json keyed by their inputs, so an interrupted or
// repeated run picks up where it stopped. --fresh wipes the workdir first.

#include <CLI11.hpp>
#include <sys/wait.h>

#include "morphldm/config.hpp"
#include "morphldm/dataset.hpp"
#include "morphldm/diffusion.hpp"
#include "morphldm/eval.hpp"
#include "morphldm/fields.hpp"
#include "morphldm/losses.hpp"
#include "morphldm/phantoms.hpp"
#include "morphldm/pipelines.hpp"
#include "morphldm/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace morphldm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
};

fs::path g_work;
std::ofstream g_log;

void log(const std::string& msg) {
    std::cerr << msg << std::endl;
    if (g_log) g_log << msg << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

/// Runs `fn` unless <work>/<name>.done.json holds a result for the same key.
json cached(const std::string& name, const json& key, const std::function<json()>& fn) {
    const auto marker = g_work / (name + ".done.json");
    if (fs::exists(marker)) {
        try {
            auto j = json::parse(slurp(marker));
            if (j.at("key") == key) {
                log("[cache] " + name);
                return j.at("result");
            }
        } catch (const json::exception&) {
        }
    }
    log("[run] " + name);
    const auto t0 = std::chrono::steady_clock::now();
    json result = fn();
    result["seconds"] = seconds_since(t0);
    std::ofstream(marker) << json{{"key", key}, {"result", result}}.dump(2) << "\n";
    return result;
}

// ---------------------------------------------------------------------------
// Criteria 1-4: exact property suites
// ---------------------------------------------------------------------------

auto dbl() { return torch::TensorOptions().dtype(torch::kDouble); }

Result field_math() {
    const auto t0 = std::chrono::steady_clock::now();
    torch::manual_seed(1);
    double ident = 0;
    for (auto shape : {std::vector<int64_t>{2, 3, 64, 64}, std::vector<int64_t>{1, 2, 16, 20, 24}}) {
        auto x = torch::rand(shape);
        std::vector<int64_t> ushape{shape[0], int64_t(shape.size()) - 2};
        ushape.insert(ushape.end(), shape.begin() + 2, shape.end());
        ident = std::max(ident, (apply_deformation(x, torch::zeros(ushape)) - x).abs().max().item<double>());
    }

    bool conserved = true;
    PhantomSpec spec;
    for (uint64_t s = 0; s < 5; ++s) {
        auto p = generate_phantom(10.0 + 20.0 * double(s), int(s % 2), s, spec);
        auto w = warp_labels(p.labels, torch::zeros({2, 64, 64}));
        conserved = conserved && torch::equal(w.labels, p.labels.labels) &&
                    regional_volumes(w) == regional_volumes(p.labels);
    }

    auto a = torch::rand({2, 1, 64, 64}), b = torch::rand({2, 1, 64, 64});
    auto u = 3.0 * torch::randn({2, 2, 64, 64});
    const double lin =
        (apply_deformation(2.5 * a - 0.7 * b, u) - (2.5 * apply_deformation(a, u) - 0.7 * apply_deformation(b, u)))
            .abs()
            .max()
            .item<double>();

    auto grid = identity_grid({32, 32}, torch::kDouble);
    auto dil = 0.1 * (grid - 15.5).unsqueeze(0);
    const double jac = (jacobian_determinant_map(dil).slice(1, 1, 31).slice(2, 1, 31) - 1.21).abs().max().item<double>();

    const double secs = seconds_since(t0);
    const bool pass = ident <= 1e-6 && conserved && lin <= 1e-5 && jac <= 1e-3 && secs < 60;
    return {1, "field math", pass,
            "identity " + num(ident) + " (<=1e-6), label volumes " + (conserved ? "exact" : "changed") +
                ", linearity " + num(lin) + " (<=1e-5), |J-1.21| " + num(jac) + " (<=1e-3), " + num(secs, 3) +
                " s (<60)"};
}

Result gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    torch::manual_seed(2);
    const double h = 1e-4;
    Stage1Weights w;
    w.kl_weight = 0.01;
    double worst = 0;
    for (int trial = 0; trial < 3; ++trial) {
        auto x = torch::rand({1, 1, 6, 6}, dbl());
        auto tmpl0 = torch::rand({1, 1, 6, 6}, dbl());
        auto u0 = torch::randint(-1, 2, {1, 2, 6, 6}, dbl()) + 0.2 + 0.6 * torch::rand({1, 2, 6, 6}, dbl());
        Latent lat{torch::randn({1, 8, 2, 2}, dbl()), 0.5 * torch::randn({1, 8, 2, 2}, dbl())};
        auto fake = torch::randn({1, 1, 2, 2}, dbl());
        auto f = [&](const torch::Tensor& tm, const torch::Tensor& uu) {
            return stage1_objective(x, apply_deformation(tm, uu), uu, lat, w, fake).total;
        };
        auto tm = tmpl0.clone().requires_grad_(true);
        auto uu = u0.clone().requires_grad_(true);
        auto g = torch::autograd::grad({f(tm, uu)}, {tm, uu});
        for (int which = 0; which < 2; ++which) {
            const auto& base = which == 0 ? tmpl0 : u0;
            auto fd = torch::zeros_like(base);
            for (int64_t k = 0; k < base.numel(); ++k) {
                auto p = base.clone(), m = base.clone();
                p.view(-1)[k] += h;
                m.view(-1)[k] -= h;
                const double fp = which == 0 ? f(p, u0).item<double>() : f(tmpl0, p).item<double>();
                const double fm = which == 0 ? f(m, u0).item<double>() : f(tmpl0, m).item<double>();
                fd.view(-1)[k] = (fp - fm) / (2 * h);
            }
            worst = std::max(worst, ((g[size_t(which)] - fd).norm() / fd.norm()).item<double>());
        }
    }
    const double secs = seconds_since(t0);
    return {2, "gradient check", worst < 1e-4 && secs < 120,
            "max relative error " + num(worst) + " (<1e-4), " + num(secs, 3) + " s (<120)"};
}

Result diffusion_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    auto s = DiffusionSchedule::make(1000, ScheduleKind::Linear);
    bool mono = true;
    for (size_t t = 1; t < s.alpha_bars.size(); ++t) mono = mono && s.alpha_bars[t] < s.alpha_bars[t - 1];

    torch::manual_seed(3);
    double var_err = 0;
    auto z = torch::randn({100000}, dbl());
    for (int64_t t : {0, 250, 500, 999}) {
        const double v = q_sample(z, t, torch::randn({100000}, dbl()), s).var().item<double>();
        var_err = std::max(var_err, std::abs(v - 1.0));
    }

    auto short_s = DiffusionSchedule::make(50, ScheduleKind::Linear);
    auto z0 = torch::randn({3, 8, 4, 4}, dbl());
    EpsModel oracle = [&](const torch::Tensor& zt, const torch::Tensor& t, const torch::Tensor&) {
        auto out = torch::empty_like(zt);
        for (int64_t i = 0; i < zt.size(0); ++i) {
            const double ab = short_s.alpha_bars[size_t(t[i].item<int64_t>())];
            out[i] = (zt[i] - std::sqrt(ab) * z0[i]) / std::sqrt(1.0 - ab);
        }
        return out;
    };
    std::vector<uint64_t> seeds{1, 2, 3};
    auto cond = torch::zeros({3, 2}, dbl());
    const double rec =
        (ddpm_sample(oracle, cond, short_s, {3, 8, 4, 4}, seeds) - z0).abs().max().item<double>();
    EpsModel lin = [](const torch::Tensor& zt, const torch::Tensor&, const torch::Tensor&) { return 0.3 * zt; };
    const bool det = torch::equal(ddpm_sample(lin, cond, short_s, {3, 8, 4, 4}, seeds),
                                  ddpm_sample(lin, cond, short_s, {3, 8, 4, 4}, seeds));
    const double secs = seconds_since(t0);
    const bool pass = mono && var_err <= 0.05 && rec <= 1e-5 && det && secs < 120;
    return {3, "diffusion", pass,
            std::string("alpha-bar ") + (mono ? "monotone" : "NOT monotone") + ", variance error " + num(var_err) +
                " (<=0.05), x0 recovery " + num(rec) + " (<=1e-5), sampler " + (det ? "deterministic" : "varies") +
                ", " + num(secs, 3) + " s (<120)"};
}

Result closed_form() {
    const auto t0 = std::chrono::steady_clock::now();
    auto zero = torch::zeros({1, 8, 2, 2}, dbl());
    const double kl0 = kl_to_standard_normal({zero, zero}).item<double>();
    const double kl1 = kl_to_standard_normal({torch::ones_like(zero), zero}).item<double>();
    auto real = 1.0 + torch::rand({2, 1, 4, 4}, dbl()), fake = -1.0 - torch::rand({2, 1, 4, 4}, dbl());
    const auto hinge = adversarial_losses(real, fake);
    const double hinge_d = hinge.discriminator.item<double>();

    const double r = 1.0 / std::sqrt(2.0);
    std::vector<double> a{-r, r}, b{1 - r, 1 + r};
    const double d1 = cohens_d(a, b);
    torch::manual_seed(4);
    auto ta = torch::randn({50}, dbl()), tb = torch::randn({60}, dbl()) + 0.4;
    std::vector<double> va(ta.data_ptr<double>(), ta.data_ptr<double>() + 50);
    std::vector<double> vb(tb.data_ptr<double>(), tb.data_ptr<double>() + 60);
    std::vector<double> sa, sb;
    for (double v : va) sa.push_back(-3.5 * v + 12.0);
    for (double v : vb) sb.push_back(-3.5 * v + 12.0);
    const double scale_err = std::abs(cohens_d(va, vb) - cohens_d(sa, sb));

    auto feats = torch::randn({80, 6}, dbl());
    const double fd0 = std::abs(fd_phantom(feats, feats));
    const double secs = seconds_since(t0);
    const bool pass = kl0 == 0.0 && std::abs(kl1 - 0.5) <= 1e-12 && hinge_d == 0.0 && std::abs(d1 - 1.0) <= 1e-9 &&
                      scale_err <= 1e-9 && fd0 <= 1e-6 && secs < 60;
    return {4, "closed-form losses", pass,
            "KL(0,0) " + num(kl0) + ", KL(1,0) " + num(kl1, 12) + ", hinge " + num(hinge_d) + ", d " + num(d1, 12) +
                ", d scale error " + num(scale_err) + " (<=1e-9), FD self " + num(fd0) + " (<=1e-6), " +
                num(secs, 3) + " s (<60)"};
}

// ---------------------------------------------------------------------------
// Heavy phases
// ---------------------------------------------------------------------------

constexpr int64_t kTrainSize = 2000;
constexpr int64_t kEvalSize = 500;
constexpr int64_t kStage1MaxSteps = 20000;
constexpr int64_t kStage1Steps = 6000;
constexpr int64_t kStage2CheckStep = 2000;
constexpr int64_t kStage2Steps = 4000;
constexpr double kStage1Target = 0.05;
constexpr double kStage2Target = 0.9;

fs::path data_dir(const std::string& name) { return g_work / "data" / name; }

CohortPlan uniform_plan(int64_t n) {
    CohortPlan p;
    p.n = n;
    p.young_fraction = (p.young_cutoff - p.age_min) / (p.age_max - p.age_min);
    return p;
}

void ensure_data() {
    const PhantomSpec spec;
    CohortPlan train;
    train.n = kTrainSize;
    struct Job {
        std::string name;
        CohortPlan plan;
        uint64_t seed;
    };
    for (const auto& job : {Job{"train", train, 1}, Job{"real_a", uniform_plan(kEvalSize), 2},
                            Job{"real_b", uniform_plan(kEvalSize), 3}}) {
        const json key{{"spec", to_json(spec)}, {"n", job.plan.n}, {"young_fraction", job.plan.young_fraction},
                       {"seed", job.seed}};
        cached("data_" + job.name, key, [&] {
            auto ds = write_phantom_dataset(spec, job.plan, job.seed, data_dir(job.name));
            return json{{"fingerprint", ds.fingerprint()}};
        });
    }
}

RunConfig base_config(Variant v) {
    RunConfig c;
    c.variant = v;
    c.seed = 1;
    c.dataset = data_dir("train");
    c.output = g_work / "runs" / to_string(v);
    c.stage1.steps = kStage1Steps;
    c.stage1.batch_size = 8;
    c.stage1.adversarial = true;
    c.stage1.validate_every = 100;
    c.stage1.checkpoint_every = 500;
    c.stage1.log_every = 100;
    c.stage2.steps = kStage2Steps;
    c.stage2.batch_size = 8;
    c.stage2.checkpoint_every = 500;
    c.stage2.log_every = 100;
    c.predictor.steps = 3000;
    c.predictor.batch_size = 16;
    c.predictor.lr = 1e-3;
    c.predictor.warmup = 100;
    c.predictor.log_every = 250;
    c.predictor.checkpoint_every = 500;
    c.stage1_checkpoint = stage1_dir(c);
    c.stage2_checkpoint = stage2_dir(c);
    return c;
}

json config_key(const RunConfig& c) {
    auto j = to_json(c);
    j.erase("output");
    j.erase("dataset");
    j.erase("stage1_checkpoint");
    j.erase("stage2_checkpoint");
    return j;
}

TrainOptions resumable() {
    TrainOptions o;
    o.resume = true;
    o.log = log;
    return o;
}

json train_variant(Variant v) {
    const auto cfg = base_config(v);
    fs::create_directories(cfg.output);
    save_run_config(cfg, cfg.output.parent_path() / (to_string(v) + ".json"));
    const std::string name = to_string(v);
    auto s1 = cached("stage1_" + name, config_key(cfg), [&] {
        auto res = train_stage1(cfg, resumable());
        double val = NAN, first_val = NAN;
        int64_t first_step = -1;
        for (size_t s = 0; s < res.history.size(); ++s) {
            auto it = res.history[s].values.find("val_l1");
            if (it == res.history[s].values.end()) continue;
            val = it->second;
            if (first_step < 0 && val < kStage1Target) {
                first_step = int64_t(s) + 1;
                first_val = val;
            }
        }
        return json{{"end_step", res.end_step}, {"val_l1", val}, {"target_step", first_step}, {"target_val_l1", first_val}};
    });
    auto s2 = cached("stage2_" + name, json{{"config", config_key(cfg)}, {"stage1", s1}}, [&] {
        TrainResult res;
        try {
            res = train_stage2(cfg, resumable());
        } catch (const CheckpointError& e) {
            log(std::string("discarding stage-2 checkpoint: ") + e.what());
            fs::remove_all(stage2_dir(cfg));
            res = train_stage2(cfg, resumable());
        }
        double early = 0, late = 0;
        for (int64_t s = kStage2CheckStep - 100; s < kStage2CheckStep; ++s) early += res.history.at(size_t(s)).values.at("loss");
        for (size_t s = res.history.size() - 100; s < res.history.size(); ++s) late += res.history[s].values.at("loss");
        double first = 0;
        for (size_t s = 0; s < 100; ++s) first += res.history[s].values.at("loss");
        return json{{"end_step", res.end_step},
                    {"loss_first100", first / 100},
                    {"loss_at_check", early / 100},
                    {"loss_last100", late / 100}};
    });
    return {{"stage1", s1}, {"stage2", s2}};
}

json train_reference_predictor() {
    auto cfg = base_config(Variant::MorphLdmC);
    cfg.output = g_work / "runs" / "reference";
    return cached("predictor", config_key(cfg), [&] {
        auto res = train_predictor(cfg, resumable());
        json last = json::object();
        for (const auto& r : res.history) {
            if (r.values.count("val_age_mae")) last = {{"val_age_mae", r.values.at("val_age_mae")},
                                                       {"val_sex_acc", r.values.at("val_sex_acc")}};
        }
        return last;
    });
}

fs::path predictor_path() { return g_work / "runs" / "reference" / "predictor"; }

json sample_variant(Variant v, const json& trained) {
    const auto cfg = base_config(v);
    const std::string name = to_string(v);
    return cached("samples_" + name, json{{"config", config_key(cfg)}, {"trained", trained}}, [&] {
        ConditionPlan plan;
        plan.n = kEvalSize;
        auto ds = generate_samples(cfg, plan, 7, 50, log);
        write_dataset(ds, g_work / "samples" / name);
        return json{{"fingerprint", ds.fingerprint()}};
    });
}

json evaluate(const std::string& name, const fs::path& real_dir, const fs::path& synth_dir, const json& key) {
    return cached("eval_" + name, key, [&] {
        auto real = read_dataset(real_dir);
        auto synth = read_dataset(synth_dir);
        auto pred = load_predictor(predictor_path());
        EvalOptions opt;
        opt.ms_ssim_pairs = 1000;
        opt.seed = 11;
        auto rep = evaluate_cohorts(real, synth, pred, opt);
        write_report(rep, g_work / "reports" / name, real, synth);
        return rep.to_json();
    });
}

std::optional<double> region_d(const json& rep, const std::string& region) {
    for (const auto& r : rep.at("regions")) {
        if (r.at("region") == region && !r.at("cohens_d").is_null()) return r.at("cohens_d").get<double>();
    }
    return std::nullopt;
}

std::optional<double> decade_mae(const json& rep, int decade) {
    for (const auto& d : rep.at("decades")) {
        if (d.at("decade") == decade) return d.at("age_mae").get<double>();
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Criterion 10: CLI reproducibility
// ---------------------------------------------------------------------------

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MORPHLDM_CLI) + " " + args + " >> '" + (g_work / "cli.log").string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return out;
}

Result cli_reproducibility() {
    const auto dir = g_work / "cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    PhantomSpec spec;
    spec.image_size = {32, 32};
    spec.base_ventricle_radius = 1.5;
    spec.ventricle_growth_rate = 0.04;
    spec.cortex_thickness_by_sex = {1.5, 2.5};
    std::ofstream(dir / "spec.json") << to_json(spec).dump(2);

    RunConfig c;
    c.seed = 3;
    c.net.image_size = {32, 32};
    c.net.base_width = 8;
    c.net.unet_channels = {16, 24, 24};
    c.net.condition_embed_dim = 16;
    c.net.attention_heads = 2;
    c.net.norm_groups = 4;
    c.net.predictor_width = 8;
    c.net.discriminator_width = 8;
    c.diffusion.timesteps = 20;
    for (TrainConfig* t : {static_cast<TrainConfig*>(&c.stage1), &c.stage2, static_cast<TrainConfig*>(&c.predictor)}) {
        t->steps = 10;
        t->batch_size = 4;
        t->warmup = 2;
        t->log_every = 5;
        t->checkpoint_every = 5;
    }
    c.stage1.adversarial = true;
    c.stage1.validate_every = 5;

    std::vector<std::string> failures;
    for (int rep = 0; rep < 2; ++rep) {
        const auto r = dir / ("r" + std::to_string(rep));
        fs::create_directories(r);
        c.dataset = "data";
        c.output = "out";
        c.stage1_checkpoint = "out/stage1";
        c.stage2_checkpoint = "out/stage2";
        save_run_config(c, r / "run.json");
        const std::string cfg = "'" + (r / "run.json").string() + "'";
        const std::vector<std::pair<std::string, std::string>> cmds{
            {"gen-data", "gen-data --spec '" + (dir / "spec.json").string() + "' --n 60 --seed 4 --out '" +
                             (r / "data").string() + "'"},
            {"gen-data real", "gen-data --spec '" + (dir / "spec.json").string() +
                                  "' --n 40 --seed 5 --young-fraction 0.157894736842 --out '" + (r / "real").string() +
                                  "'"},
            {"train 1", "train --stage 1 --config " + cfg},
            {"train 2", "train --stage 2 --config " + cfg},
            {"train-predictor", "train-predictor --config " + cfg},
            {"sample", "sample --config " + cfg + " --n 12 --ages 5:100 --seed 6 --out '" + (r / "synth").string() +
                           "'"},
            {"eval", "eval --real '" + (r / "real").string() + "' --synth '" + (r / "synth").string() +
                         "' --predictor '" + (r / "out" / "predictor").string() + "' --pairs 30 --scales 2 --out '" +
                         (r / "report").string() + "'"},
        };
        for (const auto& [what, args] : cmds) {
            if (run_cli(args) != 0) failures.push_back(what + " exited non-zero (run " + std::to_string(rep) + ")");
        }
    }
    int files = 0;
    for (const auto& [k, v] : tree(dir / "r0")) {
        ++files;
        auto other = dir / "r1" / k;
        if (!fs::exists(other) || slurp(other) != v) failures.push_back(k + " differs");
    }
    if (tree(dir / "r1").size() != tree(dir / "r0").size()) failures.push_back("different file sets");
    std::string detail = std::to_string(files) + " files from gen-data, train 1/2, train-predictor, sample, eval";
    if (failures.empty()) {
        detail += " byte-identical across two runs";
    } else {
        detail += "; " + failures.front() + (failures.size() > 1 ? " (+" + std::to_string(failures.size() - 1) + " more)" : "");
    }
    return {10, "CLI reproducibility", failures.empty() && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MorphLDM acceptance run"};
    std::string workdir = "acceptance_work";
    bool fresh = false;
    app.add_option("--workdir", workdir, "Scratch directory (reused between runs)")->capture_default_str();
    app.add_flag("--fresh", fresh, "Delete the scratch directory first");
    CLI11_PARSE(app, argc, argv);

    g_work = fs::absolute(workdir);
    if (fresh) fs::remove_all(g_work);
    fs::create_directories(g_work);
    g_log.open(g_work / "acceptance.log", std::ios::app);

    std::vector<Result> results;
    std::vector<std::string> notes;
    results.push_back(field_math());
    results.push_back(gradients());
    results.push_back(diffusion_suite());
    results.push_back(closed_form());

    try {
        ensure_data();
        const auto morph = train_variant(Variant::MorphLdmC);
        const auto ldm = train_variant(Variant::Ldm);
        const auto pred = train_reference_predictor();
        log("reference predictor: " + pred.dump());

        {
            const auto& s1 = morph.at("stage1");
            const auto& s2 = morph.at("stage2");
            const double val = s1.at("target_val_l1").is_number() ? s1.at("target_val_l1").get<double>() : NAN;
            const int64_t steps = s1.at("target_step").get<int64_t>();
            const double loss2 = s2.at("loss_at_check").get<double>();
            const double hours =
                (s1.at("seconds").get<double>() +
                 s2.at("seconds").get<double>() * double(kStage2CheckStep) / double(s2.at("end_step").get<int64_t>())) /
                3600.0;
            const bool pass = steps > 0 && val < kStage1Target && steps <= kStage1MaxSteps && loss2 < kStage2Target && hours <= 6.0;
            results.push_back({5, "end-to-end smoke", pass,
                               "stage-1 held-out L1 " + num(val) + " at step " + std::to_string(steps) +
                                   " (<0.05 within 20000; final " + num(s1.at("val_l1").get<double>()) + " at " +
                                   std::to_string(s1.at("end_step").get<int64_t>()) + "), stage-2 loss " + num(loss2) + " over steps 1901-2000 (<0.9, from " +
                                   num(s2.at("loss_first100").get<double>()) + "), " + num(hours, 3) + " h CPU (<=6)"});
        }

        const auto morph_samples = sample_variant(Variant::MorphLdmC, morph);
        const auto ldm_samples = sample_variant(Variant::Ldm, ldm);
        {
            const auto s = read_dataset(g_work / "samples" / "morphldm_c");
            notes.push_back("MorphLDM-c sampled displacement mean |u| " +
                            num(s.fields.abs().mean().item<double>()) + " voxels, max " +
                            num(s.fields.abs().max().item<double>()) + "; mean |image - template| " +
                            num((s.images - s.templates).abs().mean().item<double>()));
        }
        const json pkey{{"predictor", pred}};
        const auto rm = evaluate("morphldm_c", data_dir("real_a"), g_work / "samples" / "morphldm_c",
                                 {{"samples", morph_samples}, {"p", pkey}});
        const auto rl =
            evaluate("ldm", data_dir("real_a"), g_work / "samples" / "ldm", {{"samples", ldm_samples}, {"p", pkey}});
        const auto rc = evaluate("control", data_dir("real_a"), data_dir("real_b"), pkey);

        {
            const double mm = rm.at("metrics").at("age_mae"), ml = rl.at("metrics").at("age_mae");
            const double sm = rm.at("metrics").at("sex_acc"), sl = rl.at("metrics").at("sex_acc");
            const bool pass = mm < ml && (ml - mm) >= 0.10 * ml && sm >= sl;
            results.push_back({6, "attribute ordering", pass,
                               "age MAE MorphLDM-c " + num(mm) + " vs LDM " + num(ml) + " (lower by >=10%: " +
                                   num(100 * (ml - mm) / ml, 3) + "%), sex acc " + num(sm) + " vs " + num(sl) +
                                   " (>=)"});
        }
        {
            auto vd = region_d(rm, "ventricle");
            int better = 0, total = 0;
            std::string per;
            for (const auto& r : rm.at("regions")) {
                const std::string reg = r.at("region");
                auto a = region_d(rm, reg), b = region_d(rl, reg);
                ++total;
                if (a && b && *a <= *b) ++better;
                per += (per.empty() ? "" : ", ") + reg + " " + (a ? num(*a, 3) : "n/a") + "/" + (b ? num(*b, 3) : "n/a");
            }
            double control = 0;
            bool control_ok = true;
            for (const auto& r : rc.at("regions")) {
                auto d = region_d(rc, r.at("region"));
                control_ok = control_ok && d.has_value();
                if (d) control = std::max(control, *d);
            }
            const bool pass = vd && *vd < 0.5 && 2 * better >= total && control_ok && control < 0.1;
            results.push_back({7, "morphometry", pass,
                               "ventricle d " + (vd ? num(*vd) : std::string("n/a")) + " (<0.5), MorphLDM-c <= LDM on " +
                                   std::to_string(better) + "/" + std::to_string(total) + " regions (d " + per +
                                   "), real-vs-real max d " + num(control) + " (<0.1)"});
        }
        {
            const double ss = rm.at("metrics").at("ms_ssim"), sr = rm.at("real").at("ms_ssim");
            const bool pass = std::abs(ss - sr) <= 0.10 && ss < 0.99;
            results.push_back({8, "diversity", pass,
                               "MS-SSIM synthetic " + num(ss) + " vs real " + num(sr) + " (|diff| " +
                                   num(std::abs(ss - sr)) + " <= 0.10), synthetic < 0.99; LDM " +
                                   num(rl.at("metrics").at("ms_ssim").get<double>())});
        }
        {
            const bool csv = fs::exists(g_work / "reports" / "morphldm_c" / "decade_mae.csv") &&
                             fs::exists(g_work / "reports" / "ldm" / "decade_mae.csv");
            auto a = decade_mae(rm, kLastDecade), b = decade_mae(rl, kLastDecade);
            const bool pass = csv && a && b && *a <= *b;
            results.push_back({9, "age-decade analysis", pass,
                               std::string("decade_mae.csv ") + (csv ? "written" : "missing") + ", ages 90+ MAE MorphLDM-c " +
                                   (a ? num(*a) : "n/a") + " vs LDM " + (b ? num(*b) : "n/a") + " (<=)"});
        }
    } catch (const std::exception& e) {
        log(std::string("heavy phase failed: ") + e.what());
        for (int id = 5; id <= 9; ++id) {
            bool have = false;
            for (const auto& r : results) have = have || r.id == id;
            if (!have) results.push_back({id, "pipeline", false, std::string("not reached: ") + e.what()});
        }
    }

    try {
        results.push_back(cli_reproducibility());
    } catch (const std::exception& e) {
        results.push_back({10, "CLI reproducibility", false, std::string("error: ") + e.what()});
    }

    int failed = 0;
    std::ostringstream summary;
    for (const auto& r : results) {
        summary << (r.pass ? "PASS" : "FAIL") << "  " << r.id << ". " << r.name << ": " << r.detail << "\n";
        failed += !r.pass;
    }
    summary << (failed == 0 ? "all criteria pass" : std::to_string(failed) + " of " + std::to_string(results.size()) +
                                                         " criteria fail")
            << "\n";
    for (const auto& n : notes) summary << "note: " << n << "\n";
    std::cout << summary.str();
    std::ofstream(g_work / "summary.txt") << summary.str();
    return failed == 0 ? 0 : 1;
}
