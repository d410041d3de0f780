#include "morphldm/checkpoint.hpp"

#include <fstream>
#include <map>
#include <vector>

namespace morphldm {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string optimizer_file(const std::string& name) { return name.empty() ? "optim.pt" : "optim_" + name + ".pt"; }

// First differing key path, for error messages.
std::string first_difference(const json& a, const json& b, const std::string& path) {
    if (a.is_object() && b.is_object()) {
        for (const auto& [k, v] : a.items()) {
            if (!b.contains(k)) return path + "/" + k;
            auto d = first_difference(v, b[k], path + "/" + k);
            if (!d.empty()) return d;
        }
        for (const auto& [k, _] : b.items()) {
            if (!a.contains(k)) return path + "/" + k;
        }
        return {};
    }
    return a == b ? std::string{} : (path.empty() ? "/" : path);
}

// libtorch keys optimizer state by tensor address, which makes its own archives
// differ between identical runs. Adam state is written by parameter position instead.
void save_optimizer(torch::optim::Optimizer& opt, torch::serialize::OutputArchive& out) {
    auto* adam = dynamic_cast<torch::optim::Adam*>(&opt);
    if (adam == nullptr) {
        opt.save(out);
        return;
    }
    int64_t index = 0;
    for (const auto& group : adam->param_groups()) {
        for (const auto& p : group.params()) {
            const std::string key = "p" + std::to_string(index++);
            auto it = adam->state().find(p.unsafeGetTensorImpl());
            if (it == adam->state().end()) continue;
            const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
            out.write(key + ".step", torch::tensor(st.step(), torch::kLong));
            out.write(key + ".exp_avg", st.exp_avg());
            out.write(key + ".exp_avg_sq", st.exp_avg_sq());
            if (st.max_exp_avg_sq().defined()) out.write(key + ".max_exp_avg_sq", st.max_exp_avg_sq());
        }
    }
    out.write("num_params", torch::tensor(index, torch::kLong));
}

void load_optimizer(torch::optim::Optimizer& opt, torch::serialize::InputArchive& in) {
    auto* adam = dynamic_cast<torch::optim::Adam*>(&opt);
    if (adam == nullptr) {
        opt.load(in);
        return;
    }
    torch::Tensor count;
    in.read("num_params", count);
    int64_t index = 0;
    for (const auto& group : adam->param_groups()) index += static_cast<int64_t>(group.params().size());
    if (count.item<int64_t>() != index) throw CheckpointError("optimizer state holds a different parameter count");
    index = 0;
    adam->state().clear();
    for (const auto& group : adam->param_groups()) {
        for (const auto& p : group.params()) {
            const std::string key = "p" + std::to_string(index++);
            torch::Tensor step;
            if (!in.try_read(key + ".step", step)) continue;
            auto st = std::make_unique<torch::optim::AdamParamState>();
            st->step(step.item<int64_t>());
            // read() assigns in place into a defined tensor, so each slot gets a fresh one
            torch::Tensor avg, avg_sq, max_sq;
            in.read(key + ".exp_avg", avg);
            in.read(key + ".exp_avg_sq", avg_sq);
            if (avg.sizes() != p.sizes() || avg_sq.sizes() != p.sizes()) {
                throw CheckpointError("optimizer state shape mismatch for " + key);
            }
            st->exp_avg(avg);
            st->exp_avg_sq(avg_sq);
            if (in.try_read(key + ".max_exp_avg_sq", max_sq)) st->max_exp_avg_sq(max_sq);
            adam->state()[p.unsafeGetTensorImpl()] = std::move(st);
        }
    }
}

}  // namespace

json to_json(const CheckpointMeta& m) {
    return {{"format", "morphldm-checkpoint"},
            {"version", kCheckpointVersion},
            {"kind", m.kind},
            {"step", m.step},
            {"config", m.config},
            {"dataset_fingerprint", m.dataset_fingerprint},
            {"extra", m.extra}};
}

void save_checkpoint(const fs::path& dir, torch::nn::Module& model,
                     const std::map<std::string, torch::optim::Optimizer*>& optimizers, const CheckpointMeta& meta) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw CheckpointError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    fs::remove(dir / "meta.json", ec);
    try {
        torch::serialize::OutputArchive archive;
        model.save(archive);
        archive.save_to((dir / "model.pt").string());
        for (const auto& [name, opt] : optimizers) {
            torch::serialize::OutputArchive oa;
            save_optimizer(*opt, oa);
            oa.save_to((dir / optimizer_file(name)).string());
        }
    } catch (const c10::Error& e) {
        throw CheckpointError("failed to write checkpoint " + dir.string() + ": " + e.what_without_backtrace());
    }
    std::ofstream out(dir / "meta.json");
    out << to_json(meta).dump(2) << "\n";
    if (!out) throw CheckpointError("failed to write " + (dir / "meta.json").string());
}

bool checkpoint_exists(const fs::path& dir) { return fs::exists(dir / "meta.json") && fs::exists(dir / "model.pt"); }

CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
    if (!checkpoint_exists(dir)) throw CheckpointError("no checkpoint at " + dir.string());
    std::ifstream in(dir / "meta.json");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw CheckpointError("corrupt checkpoint metadata in " + dir.string() + ": " + e.what());
    }
    if (j.value("format", "") != "morphldm-checkpoint") throw CheckpointError(dir.string() + " is not a checkpoint");
    if (j.value("version", 0) != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version in " + dir.string());
    }
    CheckpointMeta m;
    try {
        m.kind = j.at("kind").get<std::string>();
        m.step = j.at("step").get<int64_t>();
        m.config = j.at("config");
        m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
        m.extra = j.value("extra", json::object());
    } catch (const json::exception& e) {
        throw CheckpointError("corrupt checkpoint metadata in " + dir.string() + ": " + e.what());
    }
    return m;
}

CheckpointMeta load_checkpoint(const fs::path& dir, torch::nn::Module& model,
                               const std::map<std::string, torch::optim::Optimizer*>& optimizers,
                               const std::string& expected_kind, const json& expected_config) {
    auto meta = read_checkpoint_meta(dir);
    if (meta.kind != expected_kind) {
        throw CheckpointError("checkpoint " + dir.string() + " holds '" + meta.kind + "', expected '" +
                              expected_kind + "'");
    }
    const auto diff = first_difference(meta.config, expected_config, "");
    if (!diff.empty()) {
        throw CheckpointError("checkpoint " + dir.string() + " was written with a different configuration (" + diff +
                              ")");
    }
    try {
        torch::serialize::InputArchive archive;
        archive.load_from((dir / "model.pt").string());
        std::map<std::string, std::vector<int64_t>> shapes;
        for (const auto& kv : model.named_parameters()) shapes[kv.key()] = kv.value().sizes().vec();
        for (const auto& kv : model.named_buffers()) shapes[kv.key()] = kv.value().sizes().vec();
        model.load(archive);
        for (const auto& kv : model.named_parameters()) {
            if (kv.value().sizes().vec() != shapes[kv.key()]) {
                throw CheckpointError("checkpoint " + dir.string() + " has a different shape for " + kv.key());
            }
        }
        for (const auto& kv : model.named_buffers()) {
            if (kv.value().sizes().vec() != shapes[kv.key()]) {
                throw CheckpointError("checkpoint " + dir.string() + " has a different shape for " + kv.key());
            }
        }
        for (const auto& [name, opt] : optimizers) {
            torch::serialize::InputArchive ia;
            ia.load_from((dir / optimizer_file(name)).string());
            load_optimizer(*opt, ia);
        }
    } catch (const c10::Error& e) {
        throw CheckpointError("failed to load checkpoint " + dir.string() + ": " + e.what_without_backtrace());
    }
    return meta;
}

}  // namespace morphldm
