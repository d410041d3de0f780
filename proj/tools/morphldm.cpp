// morphldm command-line interface.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data / IO error,
// 3 training aborted on a non-finite loss.

#include <CLI11.hpp>

#include "morphldm/checkpoint.hpp"
#include "morphldm/config.hpp"
#include "morphldm/dataset.hpp"
#include "morphldm/eval.hpp"
#include "morphldm/phantoms.hpp"
#include "morphldm/pipelines.hpp"

#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace morphldm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kAbort = 3 };

struct CommandResult {
    int code = kOk;
    std::string summary;
    std::vector<fs::path> artifacts;
};

int report(const CommandResult& r) {
    (r.code == kOk ? std::cout : std::cerr) << r.summary << "\n";
    for (const auto& a : r.artifacts) std::cout << "  wrote " << a.string() << "\n";
    return r.code;
}

CommandResult fail(int code, const std::string& what) { return {code, "error: " + what, {}}; }

/// Runs a command body and maps exceptions onto exit codes.
CommandResult guarded(const std::function<CommandResult()>& body) {
    try {
        return body();
    } catch (const TrainingAbort& e) {
        std::string dump = "training aborted at step " + std::to_string(e.step()) + "; component losses:";
        for (const auto& [k, v] : e.components()) dump += "\n  " + k + " = " + std::to_string(v);
        return {kAbort, dump, {}};
    } catch (const DatasetError& e) {
        return fail(kData, e.what());
    } catch (const CheckpointError& e) {
        return fail(kData, e.what());
    } catch (const ConfigError& e) {
        return fail(kUsage, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(kUsage, e.what());
    } catch (const std::out_of_range& e) {
        return fail(kUsage, e.what());
    } catch (const std::exception& e) {
        return fail(kData, e.what());
    }
}

void progress(const std::string& msg) { std::cout << msg << std::endl; }

std::pair<double, double> parse_age_range(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("--ages must look like MIN:MAX, got '" + s + "'");
    size_t used_a = 0, used_b = 0;
    double a = 0, b = 0;
    try {
        a = std::stod(s.substr(0, colon), &used_a);
        b = std::stod(s.substr(colon + 1), &used_b);
    } catch (const std::exception&) {
        throw std::invalid_argument("--ages must look like MIN:MAX, got '" + s + "'");
    }
    if (used_a != colon || used_b != s.size() - colon - 1) {
        throw std::invalid_argument("--ages must look like MIN:MAX, got '" + s + "'");
    }
    return {a, b};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MorphLDM: latent diffusion over deformation fields applied to a learned template"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a phantom dataset directory");
    std::string spec_path, out_dir;
    int64_t n = 0;
    uint64_t seed = 0;
    CohortPlan plan;
    gen->add_option("--spec", spec_path, "Phantom spec JSON file (defaults when omitted)");
    gen->add_option("--n", n, "Number of samples (>= 1)")->required();
    gen->add_option("--out", out_dir, "Output dataset directory")->required();
    gen->add_option("--seed", seed, "Root seed")->capture_default_str();
    gen->add_option("--age-min", plan.age_min, "Youngest age")->capture_default_str();
    gen->add_option("--age-max", plan.age_max, "Oldest age")->capture_default_str();
    gen->add_option("--sex-balance", plan.sex_balance, "Probability of male")->capture_default_str();
    gen->add_option("--young-fraction", plan.young_fraction, "Share of samples drawn below --young-cutoff")
        ->capture_default_str();
    gen->add_option("--young-cutoff", plan.young_cutoff, "Upper age of the young stratum")->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "Train stage 1 (autoencoder) or stage 2 (latent diffusion)");
    int stage = 1;
    std::string config_path;
    bool resume = false;
    train->add_option("--stage", stage, "Stage to train")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--config", config_path, "Run config JSON")->required();
    train->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");

    // train-predictor
    auto* trainp = app.add_subcommand("train-predictor", "Train the age/sex predictor used by eval on real phantoms");
    trainp->add_option("--config", config_path, "Run config JSON")->required();
    trainp->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");

    // sample
    auto* sample = app.add_subcommand("sample", "Generate a synthetic cohort from trained checkpoints");
    ConditionPlan cplan;
    std::string ages = "5:100";
    int64_t chunk = 50;
    sample->add_option("--config", config_path, "Run config JSON (stage1_checkpoint, stage2_checkpoint)")->required();
    sample->add_option("--n", cplan.n, "Number of samples")->capture_default_str();
    sample->add_option("--ages", ages, "Age range MIN:MAX, linearly spaced")->capture_default_str();
    sample->add_option("--sex-balance", cplan.sex_balance, "Fraction male")->capture_default_str();
    sample->add_option("--seed", seed, "Root seed")->capture_default_str();
    sample->add_option("--out", out_dir, "Output dataset directory")->required();
    sample->add_option("--chunk", chunk, "Samples per sampler batch (same draws; float rounding may differ)")->capture_default_str();

    // eval
    auto* ev = app.add_subcommand("eval", "Compare a synthetic cohort against real phantoms");
    std::string real_dir, synth_dir, predictor_path;
    EvalOptions eopt;
    ev->add_option("--real", real_dir, "Real (phantom) dataset directory")->required();
    ev->add_option("--synth", synth_dir, "Synthetic dataset directory")->required();
    ev->add_option("--predictor", predictor_path, "Predictor checkpoint directory")->required();
    ev->add_option("--out", out_dir, "Report directory")->required();
    ev->add_option("--pairs", eopt.ms_ssim_pairs, "MS-SSIM pairs per cohort")->capture_default_str();
    ev->add_option("--seed", eopt.seed, "Root seed for pair sampling")->capture_default_str();
    ev->add_option("--scales", eopt.ms_ssim.scales, "MS-SSIM scales (coarsest scale must hold the 11-voxel window)")
        ->capture_default_str()
        ->check(CLI::Range(1, 5));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    if (gen->parsed()) {
        if (n < 1) {
            std::cerr << "error: --n must be >= 1\n" << gen->help();
            return kUsage;
        }
        return report(guarded([&] {
            PhantomSpec spec;
            if (!spec_path.empty()) {
                std::ifstream in(spec_path);
                if (!in) throw ConfigError("cannot open spec " + spec_path);
                nlohmann::json j;
                try {
                    in >> j;
                } catch (const nlohmann::json::parse_error& e) {
                    throw ConfigError("spec " + spec_path + " is not valid JSON: " + e.what());
                }
                spec = phantom_spec_from_json(j);
            }
            spec.validate();
            plan.n = n;
            auto ds = generate_phantom_dataset(spec, plan, seed);
            write_dataset(ds, out_dir);
            int64_t male = 0;
            for (const auto& r : ds.records) male += r.sex;
            return CommandResult{kOk,
                                 "gen-data: " + std::to_string(ds.size()) + " samples (" + std::to_string(male) +
                                     " male), spec " + spec_hash(spec) + ", fingerprint " + ds.fingerprint(),
                                 {fs::path(out_dir) / "manifest.json"}};
        }));
    }

    if (train->parsed()) {
        return report(guarded([&] {
            const auto cfg = load_run_config(config_path);
            TrainOptions opts;
            opts.resume = resume;
            opts.log = progress;
            const auto res = stage == 1 ? train_stage1(cfg, opts) : train_stage2(cfg, opts);
            return CommandResult{kOk,
                                 "train: stage " + std::to_string(stage) + " finished at step " +
                                     std::to_string(res.end_step),
                                 {res.checkpoint, res.checkpoint / "loss.csv"}};
        }));
    }

    if (trainp->parsed()) {
        return report(guarded([&] {
            const auto cfg = load_run_config(config_path);
            TrainOptions opts;
            opts.resume = resume;
            opts.log = progress;
            const auto res = train_predictor(cfg, opts);
            return CommandResult{kOk, "train-predictor: finished at step " + std::to_string(res.end_step),
                                 {res.checkpoint, res.checkpoint / "loss.csv"}};
        }));
    }

    if (sample->parsed()) {
        return report(guarded([&] {
            std::tie(cplan.age_min, cplan.age_max) = parse_age_range(ages);
            cplan.validate();
            const auto cfg = load_run_config(config_path);
            auto ds = generate_samples(cfg, cplan, seed, chunk, progress);
            write_dataset(ds, out_dir);
            return CommandResult{kOk,
                                 "sample: " + std::to_string(ds.size()) + " " + to_string(cfg.variant) +
                                     " samples, fingerprint " + ds.fingerprint(),
                                 {fs::path(out_dir) / "manifest.json"}};
        }));
    }

    if (ev->parsed()) {
        return report(guarded([&] {
            const auto real = read_dataset(real_dir);
            const auto synth = read_dataset(synth_dir);
            auto predictor = load_predictor(predictor_path);
            const auto rep = evaluate_cohorts(real, synth, predictor, eopt);
            const auto files = write_report(rep, out_dir, real, synth);
            const auto& m = rep.synthetic;
            char line[256];
            std::snprintf(line, sizeof line, "eval: sex_acc %.4f age_mae %.3f fd_phantom %s ms_ssim %.4f (real %.4f)",
                          m.sex_acc, m.age_mae, m.fd_phantom ? std::to_string(*m.fd_phantom).c_str() : "n/a",
                          m.ms_ssim, rep.real.ms_ssim);
            return CommandResult{kOk, line, files};
        }));
    }
    return kUsage;
}
