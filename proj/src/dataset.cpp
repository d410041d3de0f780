#include "morphldm/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "morphldm/rng.hpp"

namespace morphldm {

static_assert(std::endian::native == std::endian::little, "dataset blobs are written as native little-endian");

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormatName = "morphldm-dataset";

struct BlobSpec {
    const char* key;    // manifest key per sample
    const char* group;  // key under "files"
    const char* file;   // blob file name
};
constexpr BlobSpec kImages{"image", "images", "images.f32"};
constexpr BlobSpec kLabels{"labels", "labels", "labels.u8"};
constexpr BlobSpec kFields{"field", "fields", "fields.f32"};
constexpr BlobSpec kTemplates{"template", "templates", "templates.f32"};

std::vector<int64_t> per_sample_shape(const torch::Tensor& t) { return {t.sizes().begin() + 1, t.sizes().end()}; }

int64_t per_sample_bytes(const torch::Tensor& t) {
    return t.numel() / std::max<int64_t>(t.size(0), 1) * static_cast<int64_t>(t.element_size());
}

const uint8_t* raw(const torch::Tensor& t) { return static_cast<const uint8_t*>(t.data_ptr()); }

// `t` must be contiguous.
nlohmann::json blob_entries(const torch::Tensor& t, int64_t i) {
    const int64_t bytes = per_sample_bytes(t);
    const uint8_t* base = raw(t) + i * bytes;
    return {{"offset", i * bytes}, {"bytes", bytes}, {"crc32", crc32_bytes(base, static_cast<size_t>(bytes))}};
}

nlohmann::json manifest_json(const Dataset& in) {
    Dataset ds = in;
    ds.images = in.images.contiguous();
    if (ds.labels.defined()) ds.labels = ds.labels.contiguous();
    if (ds.fields.defined()) ds.fields = ds.fields.contiguous();
    if (ds.templates.defined()) ds.templates = ds.templates.contiguous();
    nlohmann::json j;
    j["format"] = kFormatName;
    j["version"] = kDatasetFormatVersion;
    j["kind"] = ds.kind;
    if (ds.spec) {
        j["spec"] = to_json(*ds.spec);
        j["spec_hash"] = spec_hash(*ds.spec);
    }
    j["region_names"] = ds.regions;
    j["image_shape"] = per_sample_shape(ds.images);
    nlohmann::json files{{kImages.group, kImages.file}};
    if (ds.labels.defined()) {
        j["label_shape"] = per_sample_shape(ds.labels);
        files[kLabels.group] = kLabels.file;
    }
    if (ds.fields.defined()) {
        j["field_shape"] = per_sample_shape(ds.fields);
        files[kFields.group] = kFields.file;
    }
    if (ds.templates.defined()) {
        j["template_shape"] = per_sample_shape(ds.templates);
        files[kTemplates.group] = kTemplates.file;
    }
    j["files"] = files;
    j["metadata"] = ds.metadata;
    auto samples = nlohmann::json::array();
    for (int64_t i = 0; i < ds.size(); ++i) {
        const auto& r = ds.records[static_cast<size_t>(i)];
        nlohmann::json s{{"id", r.id}, {"age", r.age}, {"sex", r.sex}, {"seed", r.seed}};
        s[kImages.key] = blob_entries(ds.images, i);
        if (ds.labels.defined()) s[kLabels.key] = blob_entries(ds.labels, i);
        if (ds.fields.defined()) s[kFields.key] = blob_entries(ds.fields, i);
        if (ds.templates.defined()) s[kTemplates.key] = blob_entries(ds.templates, i);
        samples.push_back(std::move(s));
    }
    j["samples"] = std::move(samples);
    return j;
}

void write_file(const fs::path& p, const void* data, size_t n) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError(DatasetErrc::Io, "cannot open " + p.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw DatasetError(DatasetErrc::Io, "write failed: " + p.string());
}

std::vector<uint8_t> read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DatasetError(DatasetErrc::Io, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

torch::Tensor load_blobs(const fs::path& dir, const nlohmann::json& manifest, const BlobSpec& blob,
                         const char* shape_key, torch::ScalarType dtype) {
    const auto shape = manifest.at(shape_key).get<std::vector<int64_t>>();
    const auto& samples = manifest.at("samples");
    const int64_t n = static_cast<int64_t>(samples.size());
    std::vector<int64_t> full{n};
    full.insert(full.end(), shape.begin(), shape.end());
    auto out = torch::empty(full, dtype);
    const int64_t expect = per_sample_bytes(out);

    const auto bytes = read_file(dir / manifest.at("files").at(blob.group).get<std::string>());
    if (static_cast<int64_t>(bytes.size()) != n * expect) {
        throw DatasetError(DatasetErrc::SizeMismatch, std::string(blob.file) + ": expected " +
                                                          std::to_string(n * expect) + " bytes, found " +
                                                          std::to_string(bytes.size()));
    }
    auto* dst = static_cast<uint8_t*>(out.data_ptr());
    for (int64_t i = 0; i < n; ++i) {
        const auto& e = samples[static_cast<size_t>(i)].at(blob.key);
        const auto offset = e.at("offset").get<int64_t>();
        const auto size = e.at("bytes").get<int64_t>();
        if (size != expect || offset < 0 || offset + size > static_cast<int64_t>(bytes.size())) {
            throw DatasetError(DatasetErrc::SizeMismatch, std::string(blob.file) + ": bad extent for sample " +
                                                              std::to_string(i));
        }
        const uint32_t crc = crc32_bytes(bytes.data() + offset, static_cast<size_t>(size));
        if (crc != e.at("crc32").get<uint32_t>()) {
            throw DatasetError(DatasetErrc::ChecksumMismatch, std::string(blob.file) + ": checksum mismatch for sample " +
                                                                  samples[static_cast<size_t>(i)].at("id").get<std::string>());
        }
        std::memcpy(dst + i * expect, bytes.data() + offset, static_cast<size_t>(size));
    }
    return out;
}

}  // namespace

uint32_t crc32_bytes(const void* data, size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

std::vector<double> Dataset::ages() const {
    std::vector<double> a;
    a.reserve(records.size());
    for (const auto& r : records) a.push_back(r.age);
    return a;
}

std::vector<int64_t> Dataset::spatial() const { return {images.sizes().begin() + 2, images.sizes().end()}; }

std::string Dataset::fingerprint() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(manifest_json(*this).dump())));
    return buf;
}

void Dataset::validate() const {
    if (!images.defined() || images.dim() < 4) throw std::invalid_argument("dataset images must be [N, C, *S]");
    if (images.size(0) != size()) throw std::invalid_argument("dataset record count does not match images");
    if (images.scalar_type() != torch::kFloat) throw std::invalid_argument("dataset images must be float32");
    auto check = [&](const torch::Tensor& t, torch::ScalarType dt, const char* what) {
        if (!t.defined()) return;
        if (t.size(0) != size() || t.scalar_type() != dt) throw std::invalid_argument(std::string("dataset ") + what + " inconsistent");
    };
    check(labels, torch::kUInt8, "labels");
    check(fields, torch::kFloat, "fields");
    check(templates, torch::kFloat, "templates");
    std::vector<std::string> ids;
    for (const auto& r : records) ids.push_back(r.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw std::invalid_argument("dataset ids must be unique");
}

Dataset generate_phantom_dataset(const PhantomSpec& spec, const CohortPlan& plan, uint64_t seed) {
    spec.validate();
    if (plan.n < 1) throw std::invalid_argument("cohort size must be >= 1");
    if (!(plan.age_min >= 0 && plan.age_max <= 120 && plan.age_min <= plan.age_max)) {
        throw std::invalid_argument("cohort age range must lie within [0, 120]");
    }
    if (!(plan.sex_balance >= 0 && plan.sex_balance <= 1)) throw std::invalid_argument("sex balance must be in [0, 1]");

    Dataset ds;
    ds.kind = "phantom";
    ds.spec = spec;
    NormalStream rng(derive_seed(seed, "cohort"));
    const double cut = std::clamp(plan.young_cutoff, plan.age_min, plan.age_max);
    for (int64_t i = 0; i < plan.n; ++i) {
        SampleRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "s%06lld", static_cast<long long>(i));
        r.id = id;
        const double u = rng.uniform();
        const double v = rng.uniform();
        if (u < plan.young_fraction && cut > plan.age_min) {
            r.age = plan.age_min + v * (cut - plan.age_min);
        } else if (cut < plan.age_max) {
            r.age = cut + v * (plan.age_max - cut);
        } else {
            r.age = plan.age_min + v * (plan.age_max - plan.age_min);
        }
        r.sex = rng.uniform() < plan.sex_balance ? 1 : 0;
        r.seed = derive_seed(seed, "phantom", {static_cast<uint64_t>(i)});
        ds.records.push_back(r);
    }

    std::vector<int64_t> img_shape{plan.n, 1};
    img_shape.insert(img_shape.end(), spec.image_size.begin(), spec.image_size.end());
    std::vector<int64_t> lab_shape{plan.n};
    lab_shape.insert(lab_shape.end(), spec.image_size.begin(), spec.image_size.end());
    ds.images = torch::empty(img_shape, torch::kFloat);
    ds.labels = torch::empty(lab_shape, torch::kUInt8);

#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < plan.n; ++i) {
        const auto& r = ds.records[static_cast<size_t>(i)];
        auto p = generate_phantom(r.age, r.sex, r.seed, spec);
        ds.images[i].copy_(p.image);
        ds.labels[i].copy_(p.labels.labels);
    }
    return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
    ds.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DatasetError(DatasetErrc::Io, "cannot create " + dir.string() + ": " + ec.message());
    auto dump = [&](const torch::Tensor& t, const BlobSpec& b) {
        if (!t.defined()) return;
        auto c = t.contiguous();
        write_file(dir / b.file, c.data_ptr(), static_cast<size_t>(c.numel() * c.element_size()));
    };
    dump(ds.images, kImages);
    dump(ds.labels, kLabels);
    dump(ds.fields, kFields);
    dump(ds.templates, kTemplates);
    const std::string text = manifest_json(ds).dump(2) + "\n";
    write_file(dir / "manifest.json", text.data(), text.size());
}

Dataset read_dataset(const fs::path& dir) {
    const auto text = read_file(dir / "manifest.json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(DatasetErrc::CorruptManifest, "manifest.json is not valid JSON: " + std::string(e.what()));
    }
    try {
        if (!j.is_object() || j.value("format", "") != kFormatName) {
            throw DatasetError(DatasetErrc::CorruptManifest, "manifest.json is not a dataset manifest");
        }
        if (j.at("version").get<int>() != kDatasetFormatVersion) {
            throw DatasetError(DatasetErrc::UnknownVersion,
                               "unsupported dataset version " + j.at("version").dump());
        }
        Dataset ds;
        ds.kind = j.at("kind").get<std::string>();
        if (j.contains("spec")) ds.spec = phantom_spec_from_json(j.at("spec"));
        ds.regions = j.at("region_names").get<std::vector<std::string>>();
        ds.metadata = j.value("metadata", nlohmann::json::object());
        for (const auto& s : j.at("samples")) {
            SampleRecord r;
            r.id = s.at("id").get<std::string>();
            r.age = s.at("age").get<double>();
            r.sex = s.at("sex").get<int>();
            r.seed = s.at("seed").get<uint64_t>();
            ds.records.push_back(std::move(r));
        }
        ds.images = load_blobs(dir, j, kImages, "image_shape", torch::kFloat);
        if (j.contains("label_shape")) ds.labels = load_blobs(dir, j, kLabels, "label_shape", torch::kUInt8);
        if (j.contains("field_shape")) ds.fields = load_blobs(dir, j, kFields, "field_shape", torch::kFloat);
        if (j.contains("template_shape")) ds.templates = load_blobs(dir, j, kTemplates, "template_shape", torch::kFloat);
        ds.validate();
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(DatasetErrc::CorruptManifest, std::string("malformed manifest: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw DatasetError(DatasetErrc::CorruptManifest, std::string("inconsistent manifest: ") + e.what());
    }
}

Dataset write_phantom_dataset(const PhantomSpec& spec, const CohortPlan& plan, uint64_t seed, const fs::path& dir) {
    auto ds = generate_phantom_dataset(spec, plan, seed);
    write_dataset(ds, dir);
    return ds;
}

Dataset select(const Dataset& ds, const std::vector<int64_t>& indices) {
    Dataset out;
    out.kind = ds.kind;
    out.spec = ds.spec;
    out.regions = ds.regions;
    out.metadata = ds.metadata;
    for (int64_t i : indices) out.records.push_back(ds.records.at(static_cast<size_t>(i)));
    auto idx = torch::tensor(indices, torch::kLong);
    out.images = ds.images.index_select(0, idx);
    if (ds.labels.defined()) out.labels = ds.labels.index_select(0, idx);
    if (ds.fields.defined()) out.fields = ds.fields.index_select(0, idx);
    if (ds.templates.defined()) out.templates = ds.templates.index_select(0, idx);
    return out;
}

}  // namespace morphldm
