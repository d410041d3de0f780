#include "testing.hpp"

#include "morphldm/config.hpp"
#include "morphldm/dataset.hpp"
#include "morphldm/pipelines.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

using namespace morphldm;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(MORPHLDM_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    for (size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

const fs::path& root() {
    static const fs::path r = [] {
        auto d = fs::temp_directory_path() / "morphldm_test_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

/// Relative path -> contents for every regular file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return out;
}

const fs::path& spec_file() {
    static const fs::path f = [] {
        PhantomSpec spec;
        spec.image_size = {32, 32};
        spec.base_ventricle_radius = 1.5;
        spec.ventricle_growth_rate = 0.04;
        spec.cortex_thickness_by_sex = {1.5, 2.5};
        std::ofstream(root() / "spec.json") << to_json(spec).dump(2);
        return root() / "spec.json";
    }();
    return f;
}

const fs::path& train_data() {
    static const fs::path d = [] {
        auto r = cli("gen-data --spec " + q(spec_file()) + " --n 80 --seed 3 --out " + q(root() / "train"));
        REQUIRE(r.code == 0);
        return root() / "train";
    }();
    return d;
}

fs::path write_config(const std::string& name, const std::string& variant = "morphldm_c",
                      const std::string& stage1_ckpt = "", const std::string& stage2_ckpt = "") {
    RunConfig c;
    c.variant = variant_from_string(variant);
    c.seed = 5;
    c.dataset = fs::relative(train_data(), root());
    c.output = name;
    c.stage1_checkpoint = stage1_ckpt;
    c.stage2_checkpoint = stage2_ckpt;
    c.net.image_size = {32, 32};
    c.net.base_width = 8;
    c.net.unet_channels = {16, 24, 24};
    c.net.condition_embed_dim = 16;
    c.net.attention_heads = 2;
    c.net.norm_groups = 4;
    c.net.predictor_width = 8;
    c.net.discriminator_width = 8;
    c.diffusion.timesteps = 10;
    for (TrainConfig* t : {static_cast<TrainConfig*>(&c.stage1), &c.stage2, static_cast<TrainConfig*>(&c.predictor)}) {
        t->steps = 4;
        t->batch_size = 4;
        t->warmup = 2;
        t->log_every = 2;
        t->checkpoint_every = 2;
    }
    c.stage1.validate_every = 2;
    const auto file = root() / (name + ".json");
    save_run_config(c, file);
    return file;
}

/// Stage-1 and stage-2 checkpoints for one small run, trained once.
const fs::path& trained_config() {
    static const fs::path f = [] {
        auto c1 = write_config("run");
        REQUIRE(cli("train --stage 1 --config " + q(c1)).code == 0);
        auto c2 = write_config("run", "morphldm_c", "run/stage1", "run/stage2");
        REQUIRE(cli("train --stage 2 --config " + q(c2)).code == 0);
        return c2;
    }();
    return f;
}

}  // namespace

TEST_CASE("help for every command") {
    auto top = cli("--help");
    CHECK(top.code == 0);
    for (const char* sub : {"gen-data", "train", "train-predictor", "sample", "eval"}) CHECK(top.out.find(sub) != std::string::npos);

    const std::map<std::string, std::vector<std::string>> flags{
        {"gen-data", {"--spec", "--n", "--out", "--seed"}},
        {"train", {"--stage", "--config", "--resume"}},
        {"train-predictor", {"--config", "--resume"}},
        {"sample", {"--config", "--n", "--ages", "--sex-balance", "--seed", "--out"}},
        {"eval", {"--real", "--synth", "--predictor", "--out"}},
    };
    for (const auto& [sub, fl] : flags) {
        CAPTURE(sub);
        auto r = cli(sub + " --help");
        CHECK(r.code == 0);
        for (const auto& f : fl) {
            CAPTURE(f);
            CHECK(r.out.find(f) != std::string::npos);
        }
    }
    CHECK(cli("").code == 1);
    CHECK(cli("frobnicate").code == 1);
}

TEST_CASE("gen-data") {
    auto a = cli("gen-data --n 100 --seed 9 --out " + q(root() / "g1"));
    CHECK(a.code == 0);
    CHECK(a.out.find("100 samples") != std::string::npos);
    CHECK(read_dataset(root() / "g1").size() == 100);
    REQUIRE(cli("gen-data --n 100 --seed 9 --out " + q(root() / "g2")).code == 0);
    CHECK(tree(root() / "g1") == tree(root() / "g2"));
    REQUIRE(cli("gen-data --n 100 --seed 10 --out " + q(root() / "g3")).code == 0);
    CHECK(slurp(root() / "g1" / "manifest.json") != slurp(root() / "g3" / "manifest.json"));

    auto zero = cli("gen-data --n 0 --out " + q(root() / "g0"));
    CHECK(zero.code == 1);
    CHECK(zero.out.find("--n") != std::string::npos);
    CHECK(cli("gen-data --n 5").code == 1);

    std::ofstream(root() / "bad_spec.json") << R"({"image_size": [64, 64], "noise_sigma": -1})";
    CHECK(cli("gen-data --n 5 --spec " + q(root() / "bad_spec.json") + " --out " + q(root() / "gb")).code == 1);
    std::ofstream(root() / "broken_spec.json") << "{";
    CHECK(cli("gen-data --n 5 --spec " + q(root() / "broken_spec.json") + " --out " + q(root() / "gb")).code == 1);

    std::ofstream(root() / "a_file") << "x";
    CHECK(cli("gen-data --n 5 --out " + q(root() / "a_file" / "sub")).code == 2);
}

TEST_CASE("train") {
    const auto& cfg = trained_config();
    CHECK(fs::exists(root() / "run" / "stage1" / "loss.csv"));
    CHECK(fs::exists(root() / "run" / "stage2" / "loss.csv"));

    SUBCASE("reruns are byte-identical") {
        auto c = write_config("again");
        REQUIRE(cli("train --stage 1 --config " + q(c)).code == 0);
        const auto first = tree(root() / "again" / "stage1");
        REQUIRE(cli("train --stage 1 --config " + q(c)).code == 0);
        CHECK(tree(root() / "again" / "stage1") == first);
        // only the recorded output path differs from the original run
        CHECK(first.at("model.pt") == slurp(root() / "run" / "stage1" / "model.pt"));
        CHECK(first.at("loss.csv") == slurp(root() / "run" / "stage1" / "loss.csv"));
    }
    SUBCASE("resume reproduces the uninterrupted trajectory") {
        auto c = write_config("resumed");
        auto j = nlohmann::json::parse(slurp(c));
        j["stage1"]["steps"] = 2;
        std::ofstream(c) << j.dump(2);
        REQUIRE(cli("train --stage 1 --config " + q(c)).code == 0);
        j["stage1"]["steps"] = 4;
        std::ofstream(c) << j.dump(2);
        auto r = cli("train --stage 1 --resume --config " + q(c));
        CHECK(r.code == 0);
        CHECK(r.out.find("resumed stage 1 at step 2") != std::string::npos);
        CHECK(slurp(root() / "resumed" / "stage1" / "loss.csv") == slurp(root() / "run" / "stage1" / "loss.csv"));
        CHECK(slurp(root() / "resumed" / "stage1" / "model.pt") == slurp(root() / "run" / "stage1" / "model.pt"));
    }
    SUBCASE("stage 2 needs a stage-1 checkpoint") {
        CHECK(cli("train --stage 2 --config " + q(write_config("nock"))).code == 1);
        CHECK(cli("train --stage 2 --config " + q(write_config("nock", "morphldm_c", "missing/stage1"))).code == 1);
    }
    SUBCASE("usage errors") {
        CHECK(cli("train --stage 3 --config " + q(cfg)).code == 1);
        CHECK(cli("train --stage 1 --config " + q(root() / "missing.json")).code == 1);
        std::ofstream(root() / "typo.json") << R"({"varaint": "ldm"})";
        CHECK(cli("train --stage 1 --config " + q(root() / "typo.json")).code == 1);
    }
    SUBCASE("non-finite loss exits 3 with a component dump") {
        auto ds = read_dataset(train_data());
        ds.images.fill_(std::nan(""));
        write_dataset(ds, root() / "nan_data");
        auto c = write_config("nan");
        auto j = nlohmann::json::parse(slurp(c));
        j["dataset"] = "nan_data";
        std::ofstream(c) << j.dump(2);
        auto r = cli("train --stage 1 --config " + q(c));
        CHECK(r.code == 3);
        CHECK(r.out.find("l1 = ") != std::string::npos);
        CHECK(r.out.find("total = ") != std::string::npos);
    }
}

TEST_CASE("sample") {
    const auto& cfg = trained_config();
    auto a = cli("sample --config " + q(cfg) + " --n 20 --ages 5:100 --seed 2 --out " + q(root() / "s1"));
    REQUIRE(a.code == 0);
    auto ds = read_dataset(root() / "s1");
    REQUIRE(ds.size() == 20);
    int males = 0;
    for (int64_t i = 0; i < 20; ++i) {
        CHECK(ds.records[size_t(i)].age == doctest::Approx(5.0 + 95.0 * double(i) / 19.0));
        males += ds.records[size_t(i)].sex;
    }
    CHECK(males == 10);
    CHECK(ds.fields.defined());
    CHECK(ds.labels.defined());

    REQUIRE(cli("sample --config " + q(cfg) + " --n 20 --ages 5:100 --seed 2 --out " + q(root() / "s2")).code == 0);
    CHECK(tree(root() / "s1") == tree(root() / "s2"));

    CHECK(cli("sample --config " + q(cfg) + " --n 4 --ages 5:130 --out " + q(root() / "sx")).code == 1);
    CHECK(cli("sample --config " + q(cfg) + " --n 4 --ages 5-100 --out " + q(root() / "sx")).code == 1);
    CHECK(cli("sample --config " + q(cfg) + " --n 4 --sex-balance 2 --out " + q(root() / "sx")).code == 1);
    auto nock = write_config("nock_sample", "morphldm_c", "run/stage1", "run/nowhere");
    CHECK(cli("sample --config " + q(nock) + " --n 4 --out " + q(root() / "sx")).code == 2);
}

TEST_CASE("train-predictor and eval") {
    const auto& cfg = trained_config();
    REQUIRE(cli("train-predictor --config " + q(cfg)).code == 0);
    const auto pred = root() / "run" / "predictor";
    REQUIRE(fs::exists(pred / "meta.json"));

    const std::string uniform = " --spec " + q(spec_file()) + " --n 240 --young-fraction 0.157894736842 ";
    REQUIRE(cli("gen-data" + uniform + "--seed 21 --out " + q(root() / "real_a")).code == 0);
    REQUIRE(cli("gen-data" + uniform + "--seed 22 --out " + q(root() / "real_b")).code == 0);

    auto r = cli("eval --real " + q(root() / "real_a") + " --synth " + q(root() / "real_b") + " --predictor " + q(pred) +
                 " --pairs 50 --scales 2 --out " + q(root() / "self"));
    REQUIRE(r.code == 0);
    auto rep = nlohmann::json::parse(slurp(root() / "self" / "report.json"));
    std::set<std::string> keys;
    for (auto& [k, v] : rep.at("metrics").items()) keys.insert(k);
    CHECK(keys == std::set<std::string>{"sex_acc", "age_mae", "fd_phantom", "ms_ssim"});
    REQUIRE(rep.at("regions").size() == 3);
    for (const auto& row : rep.at("regions")) {
        CAPTURE(row.dump());
        CHECK(row.at("cohens_d").get<double>() < 0.1);
    }
    for (const char* f : {"regions.csv", "decade_mae.csv", "montage_synth.png", "montage_real.png"}) {
        CHECK(fs::exists(root() / "self" / f));
    }

    REQUIRE(cli("eval --real " + q(root() / "real_a") + " --synth " + q(root() / "real_b") + " --predictor " + q(pred) +
                " --pairs 50 --scales 2 --out " + q(root() / "self2"))
                .code == 0);
    CHECK(tree(root() / "self") == tree(root() / "self2"));

    REQUIRE(cli("sample --config " + q(cfg) + " --n 30 --seed 4 --out " + q(root() / "synth")).code == 0);
    auto s = cli("eval --real " + q(root() / "real_a") + " --synth " + q(root() / "synth") + " --predictor " + q(pred) +
                 " --pairs 20 --scales 2 --out " + q(root() / "synth_eval"));
    CHECK(s.code == 0);
    CHECK(s.out.find("ms_ssim") != std::string::npos);

    CHECK(cli("eval --real " + q(root() / "real_a") + " --synth " + q(root() / "real_b") + " --predictor " +
              q(root() / "nothing") + " --out " + q(root() / "e2"))
              .code == 2);
    CHECK(cli("eval --real " + q(root() / "nothing") + " --synth " + q(root() / "real_b") + " --predictor " + q(pred) +
              " --out " + q(root() / "e2"))
              .code == 2);
}
