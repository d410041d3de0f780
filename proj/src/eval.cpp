#include "morphldm/eval.hpp"

#include "morphldm/fields.hpp"
#include "morphldm/image_io.hpp"
#include "morphldm/kernels.hpp"
#include "morphldm/phantoms.hpp"
#include "morphldm/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace morphldm {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<double> gaussian_taps(int n, double sigma) {
    std::vector<double> t(static_cast<size_t>(n));
    const double c = 0.5 * (n - 1);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        t[static_cast<size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += t[static_cast<size_t>(i)];
    }
    for (auto& v : t) v /= sum;
    return t;
}

kernels::GridShape valid_shape(const kernels::GridShape& g, int n) {
    auto v = g;
    for (int d = 0; d < g.dims; ++d) v.size[d] = g.size[d] - n + 1;
    return v;
}

// 2^D box average with odd trailing voxels dropped. x: [C, *S] double.
torch::Tensor downsample(const torch::Tensor& x) {
    const int64_t dims = x.dim() - 1;
    auto y = x;
    for (int64_t d = 1; d <= dims; ++d) {
        const int64_t n = y.size(d) / 2;
        y = y.narrow(d, 0, 2 * n);
        y = 0.5 * (y.slice(d, 0, 2 * n, 2) + y.slice(d, 1, 2 * n, 2));
    }
    return y.contiguous();
}

// Mean luminance and contrast-structure terms at one scale.
std::pair<double, double> ssim_terms(const torch::Tensor& a, const torch::Tensor& b, const std::vector<double>& taps,
                                     const MsSsimOptions& opt) {
    const double c1 = std::pow(opt.k1 * opt.data_range, 2);
    const double c2 = std::pow(opt.k2 * opt.data_range, 2);
    const auto g = grid_shape({a.sizes().begin() + 1, a.sizes().end()});
    const auto vg = valid_shape(g, opt.window);
    const int64_t nv = vg.voxels();
    const int64_t nvox = g.voxels();
    std::vector<double> mu1(nv), mu2(nv), s11(nv), s22(nv), s12(nv), prod(nvox);
    double l_sum = 0, cs_sum = 0;
    for (int64_t c = 0; c < a.size(0); ++c) {
        const double* x = a[c].data_ptr<double>();
        const double* y = b[c].data_ptr<double>();
        kernels::parallel::gaussian_filter_valid(x, mu1.data(), g, taps.data(), opt.window);
        kernels::parallel::gaussian_filter_valid(y, mu2.data(), g, taps.data(), opt.window);
        for (int64_t i = 0; i < nvox; ++i) prod[i] = x[i] * x[i];
        kernels::parallel::gaussian_filter_valid(prod.data(), s11.data(), g, taps.data(), opt.window);
        for (int64_t i = 0; i < nvox; ++i) prod[i] = y[i] * y[i];
        kernels::parallel::gaussian_filter_valid(prod.data(), s22.data(), g, taps.data(), opt.window);
        for (int64_t i = 0; i < nvox; ++i) prod[i] = x[i] * y[i];
        kernels::parallel::gaussian_filter_valid(prod.data(), s12.data(), g, taps.data(), opt.window);
        for (int64_t i = 0; i < nv; ++i) {
            const double m1 = mu1[i], m2 = mu2[i];
            const double v1 = s11[i] - m1 * m1, v2 = s22[i] - m2 * m2, cov = s12[i] - m1 * m2;
            l_sum += (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
            cs_sum += (2 * cov + c2) / (v1 + v2 + c2);
        }
    }
    const double n = static_cast<double>(nv * a.size(0));
    return {l_sum / n, cs_sum / n};
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Eigen::MatrixXd to_matrix(const torch::Tensor& t) {
    auto x = t.detach().to(torch::kDouble).contiguous();
    if (x.dim() != 2) throw std::invalid_argument("features must be [N, F]");
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        x.data_ptr<double>(), x.size(0), x.size(1));
}

// Eigenvalues below the floor are treated as zero; clearly negative ones mean the
// matrix was not PSD.
Eigen::VectorXd psd_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    Eigen::VectorXd out = ev;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-8 * scale) throw std::domain_error(std::string(what) + " is not positive semi-definite");
        if (ev[i] < 1e-10) out[i] = 0.0;
    }
    return out;
}

std::vector<Condition> record_conditions(const Dataset& ds) {
    std::vector<Condition> c;
    for (const auto& r : ds.records) c.push_back({r.age, r.sex});
    return c;
}

CohortMetrics metrics_from(const AttributeAdherence& a, double ms) {
    CohortMetrics m;
    m.sex_acc = a.sex_acc;
    m.age_mae = a.age_mae;
    m.ms_ssim = ms;
    return m;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

uint64_t parameter_hash(torch::nn::Module& m) {
    uint64_t h = 0;
    for (const auto& item : m.named_parameters()) {
        auto c = item.value().detach().contiguous();
        h = splitmix64(h ^ fnv1a64(item.key()) ^ crc32_bytes(c.data_ptr(), static_cast<size_t>(c.nbytes())));
    }
    return h;
}

std::vector<torch::Tensor> decade_tiles(const Dataset& ds) {
    std::vector<torch::Tensor> tiles;
    for (int sex = 0; sex < 2; ++sex) {
        for (int d = 0; d <= kLastDecade; ++d) {
            const double target = 10.0 * d + 5.0;
            int64_t best = -1;
            double best_gap = std::numeric_limits<double>::infinity();
            for (int64_t i = 0; i < ds.size(); ++i) {
                const auto& r = ds.records[static_cast<size_t>(i)];
                if (r.sex != sex || age_decade(r.age) != d) continue;
                const double gap = std::abs(r.age - target);
                if (gap < best_gap) {
                    best_gap = gap;
                    best = i;
                }
            }
            tiles.push_back(best >= 0 ? ds.images[best] : torch::Tensor());
        }
    }
    return tiles;
}

}  // namespace

std::vector<double> ms_ssim_weights(int scales) {
    static const std::array<double, 5> base{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    if (scales < 1 || scales > 5) throw std::invalid_argument("MS-SSIM supports 1 to 5 scales");
    std::vector<double> w(base.begin(), base.begin() + scales);
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= s;
    return w;
}

double ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const MsSsimOptions& opt) {
    if (!a.sizes().equals(b.sizes())) throw std::invalid_argument("ms_ssim: shape mismatch");
    if (a.dim() < 3 || a.dim() > 4) throw std::invalid_argument("ms_ssim expects [C, *S] with 2 or 3 spatial dims");
    for (int64_t d = 1; d < a.dim(); ++d) {
        if ((a.size(d) >> (opt.scales - 1)) < opt.window) {
            throw std::invalid_argument("ms_ssim: image too small for " + std::to_string(opt.scales) +
                                        " scales with window " + std::to_string(opt.window));
        }
    }
    const auto w = ms_ssim_weights(opt.scales);
    const auto taps = gaussian_taps(opt.window, opt.sigma);
    auto x = a.detach().to(torch::kDouble).contiguous();
    auto y = b.detach().to(torch::kDouble).contiguous();
    double result = 1.0;
    for (int s = 0; s < opt.scales; ++s) {
        const auto [l, cs] = ssim_terms(x, y, taps, opt);
        result *= std::pow(std::max(cs, 0.0), w[static_cast<size_t>(s)]);
        if (s == opt.scales - 1) {
            result *= std::pow(std::max(l, 0.0), w[static_cast<size_t>(s)]);
        } else {
            x = downsample(x);
            y = downsample(y);
        }
    }
    return result;
}

std::vector<std::pair<int64_t, int64_t>> distinct_pairs(int64_t n, int64_t n_pairs, uint64_t seed) {
    if (n < 2) throw std::invalid_argument("need at least two samples to form pairs");
    const int64_t total = n * (n - 1) / 2;
    std::vector<int64_t> chosen;
    if (n_pairs >= total) {
        chosen.resize(static_cast<size_t>(total));
        std::iota(chosen.begin(), chosen.end(), 0);
    } else {
        // Floyd's algorithm: k distinct values from [0, total).
        NormalStream rng(seed);
        std::unordered_set<int64_t> set;
        for (int64_t j = total - n_pairs; j < total; ++j) {
            const auto t = static_cast<int64_t>(rng.below(static_cast<uint64_t>(j + 1)));
            chosen.push_back(set.insert(t).second ? t : j);
            if (chosen.back() == j) set.insert(j);
        }
        std::sort(chosen.begin(), chosen.end());
    }
    std::vector<std::pair<int64_t, int64_t>> out;
    out.reserve(chosen.size());
    int64_t row = 0, row_start = 0;
    for (int64_t k : chosen) {
        while (k >= row_start + (n - 1 - row)) {
            row_start += n - 1 - row;
            ++row;
        }
        out.emplace_back(row, row + 1 + (k - row_start));
    }
    return out;
}

double ms_ssim_pairs(const torch::Tensor& images, int64_t n_pairs, uint64_t seed, const MsSsimOptions& opt) {
    if (n_pairs < 1) throw std::invalid_argument("n_pairs must be >= 1");
    const auto pairs = distinct_pairs(images.size(0), n_pairs, seed);
    auto x = images.detach().to(torch::kDouble).contiguous();
    std::vector<double> vals(pairs.size());
    std::vector<torch::Tensor> slices(static_cast<size_t>(x.size(0)));
    for (int64_t i = 0; i < x.size(0); ++i) slices[static_cast<size_t>(i)] = x[i].contiguous();
    for (size_t k = 0; k < pairs.size(); ++k) {
        vals[k] = ms_ssim(slices[static_cast<size_t>(pairs[k].first)], slices[static_cast<size_t>(pairs[k].second)], opt);
    }
    return mean_of(vals);
}

int age_decade(double age) { return std::clamp(static_cast<int>(std::floor(age / 10.0)), 0, kLastDecade); }

AttributeAdherence attribute_adherence(std::span<const double> age_pred, std::span<const double> sex_logit,
                                       std::span<const Condition> conditions) {
    if (age_pred.size() != conditions.size() || sex_logit.size() != conditions.size()) {
        throw std::invalid_argument("attribute_adherence: prediction and condition counts differ");
    }
    if (conditions.empty()) throw std::invalid_argument("attribute_adherence: empty cohort");
    std::array<double, kLastDecade + 1> err{}, hit{};
    std::array<int64_t, kLastDecade + 1> count{};
    AttributeAdherence out;
    for (size_t i = 0; i < conditions.size(); ++i) {
        const double e = std::abs(age_pred[i] - conditions[i].age);
        const double h = ((sex_logit[i] > 0) ? 1 : 0) == conditions[i].sex ? 1.0 : 0.0;
        out.age_mae += e;
        out.sex_acc += h;
        const int d = age_decade(conditions[i].age);
        err[d] += e;
        hit[d] += h;
        ++count[d];
    }
    const double n = static_cast<double>(conditions.size());
    out.age_mae /= n;
    out.sex_acc /= n;
    for (int d = 0; d <= kLastDecade; ++d) {
        if (count[d] == 0) continue;
        const double c = static_cast<double>(count[d]);
        out.decades.push_back({d, count[d], err[d] / c, hit[d] / c});
    }
    return out;
}

Predictions predict_attributes(AttributePredictor& predictor, const torch::Tensor& images, int64_t batch) {
    torch::NoGradGuard guard;
    predictor->eval();
    Predictions p;
    std::vector<torch::Tensor> feats;
    for (int64_t s = 0; s < images.size(0); s += batch) {
        auto out = predictor->forward(images.slice(0, s, std::min(images.size(0), s + batch)).to(torch::kFloat));
        auto age = out.age.to(torch::kDouble).contiguous();
        auto sex = out.sex_logit.to(torch::kDouble).contiguous();
        p.age.insert(p.age.end(), age.data_ptr<double>(), age.data_ptr<double>() + age.numel());
        p.sex_logit.insert(p.sex_logit.end(), sex.data_ptr<double>(), sex.data_ptr<double>() + sex.numel());
        feats.push_back(out.features.to(torch::kDouble));
    }
    p.features = torch::cat(feats, 0);
    return p;
}

torch::Tensor regional_volumes(const torch::Tensor& labels, int64_t num_regions) {
    if (labels.dim() < 2) throw std::invalid_argument("regional_volumes expects [N, *S]");
    auto flat = labels.reshape({labels.size(0), -1}).to(torch::kLong);
    if (flat.numel() > 0 && (flat.min().item<int64_t>() < 0 || flat.max().item<int64_t>() >= num_regions)) {
        throw std::out_of_range("label outside the region table");
    }
    auto counts = torch::zeros({labels.size(0), num_regions}, torch::kLong);
    counts.scatter_add_(1, flat, torch::ones_like(flat));
    return counts;
}

std::vector<int64_t> regional_volumes(const LabelMap& labels) {
    auto c = regional_volumes(labels.labels.unsqueeze(0), labels.num_regions()).squeeze(0).contiguous();
    return {c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel()};
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("cohens_d needs at least two samples per population");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double sa = sample_std(a), sb = sample_std(b);
    const double pooled = std::sqrt(((na - 1) * sa * sa + (nb - 1) * sb * sb) / (na + nb - 2));
    if (!(pooled > 0)) throw std::domain_error("cohens_d: zero pooled standard deviation");
    return std::abs(mean_of(a) - mean_of(b)) / pooled;
}

double fd_phantom(const torch::Tensor& real_features, const torch::Tensor& synth_features) {
    const Eigen::MatrixXd x1 = to_matrix(real_features);
    const Eigen::MatrixXd x2 = to_matrix(synth_features);
    if (x1.cols() != x2.cols()) throw std::invalid_argument("fd_phantom: feature dimensions differ");
    const auto dim = x1.cols();
    if (x1.rows() < dim + 1 || x2.rows() < dim + 1) {
        throw std::invalid_argument("fd_phantom needs at least dim + 1 samples per set");
    }
    const Eigen::RowVectorXd m1 = x1.colwise().mean(), m2 = x2.colwise().mean();
    const Eigen::MatrixXd c1 = x1.rowwise() - m1, c2 = x2.rowwise() - m2;
    const Eigen::MatrixXd s1 = c1.transpose() * c1 / static_cast<double>(x1.rows() - 1);
    const Eigen::MatrixXd s2 = c2.transpose() * c2 / static_cast<double>(x2.rows() - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
    const Eigen::VectorXd l1 = psd_eigenvalues(es1.eigenvalues(), "real feature covariance");
    const Eigen::MatrixXd root1 = es1.eigenvectors() * l1.cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();
    Eigen::MatrixXd mid = root1 * s2 * root1;
    mid = 0.5 * (mid + mid.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(mid, Eigen::EigenvaluesOnly);
    const Eigen::VectorXd l2 = psd_eigenvalues(es2.eigenvalues(), "covariance product");
    const double tr_sqrt = l2.cwiseSqrt().sum();
    const double fd = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    return std::max(fd, 0.0);
}

std::vector<int64_t> match_real(std::span<const SampleRecord> real, std::span<const SampleRecord> synth) {
    std::vector<bool> used(real.size(), false);
    std::array<int64_t, 2> available{0, 0};
    for (const auto& r : real) ++available[static_cast<size_t>(r.sex)];
    std::vector<int64_t> out;
    out.reserve(synth.size());
    for (const auto& s : synth) {
        const auto sex = static_cast<size_t>(s.sex);
        if (available[sex] == 0) {
            bool any = false;
            for (size_t i = 0; i < real.size(); ++i) {
                if (real[i].sex == s.sex) {
                    used[i] = false;
                    ++available[sex];
                    any = true;
                }
            }
            if (!any) throw std::invalid_argument("real cohort has no samples of sex " + std::to_string(s.sex));
        }
        int64_t best = -1;
        double gap = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < real.size(); ++i) {
            if (used[i] || real[i].sex != s.sex) continue;
            const double g = std::abs(real[i].age - s.age);
            if (g < gap) {
                gap = g;
                best = static_cast<int64_t>(i);
            }
        }
        used[static_cast<size_t>(best)] = true;
        --available[sex];
        out.push_back(best);
    }
    return out;
}

torch::Tensor cohort_labels(const Dataset& ds) {
    if (ds.labels.defined()) return ds.labels;
    return segment_by_intensity(ds.images);
}

json CohortReport::to_json() const {
    auto opt_num = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json regions_json = json::array();
    for (const auto& r : regions) {
        regions_json.push_back({{"region", r.name},
                                {"real_mean", r.real_mean},
                                {"real_std", r.real_std},
                                {"synthetic_mean", r.synth_mean},
                                {"synthetic_std", r.synth_std},
                                {"cohens_d", opt_num(r.cohens_d)}});
    }
    auto decades_json = [](const std::vector<DecadeError>& ds) {
        json a = json::array();
        for (const auto& d : ds) {
            a.push_back({{"decade", d.decade}, {"count", d.count}, {"age_mae", d.age_mae}, {"sex_acc", d.sex_acc}});
        }
        return a;
    };
    return {{"metrics",
             {{"sex_acc", synthetic.sex_acc},
              {"age_mae", synthetic.age_mae},
              {"fd_phantom", opt_num(synthetic.fd_phantom)},
              {"ms_ssim", synthetic.ms_ssim}}},
            {"real", {{"sex_acc", real.sex_acc}, {"age_mae", real.age_mae}, {"ms_ssim", real.ms_ssim}}},
            {"regions", regions_json},
            {"decades", decades_json(decades)},
            {"real_decades", decades_json(real_decades)},
            {"counts", {{"real", n_real}, {"synthetic", n_synth}, {"matched_unique", n_matched_unique}}},
            {"label_source", label_source},
            {"fingerprint", fingerprint}};
}

CohortReport evaluate_cohorts(const Dataset& real, const Dataset& synth, AttributePredictor& predictor,
                              const EvalOptions& opt) {
    if (real.size() < 2 || synth.size() < 2) throw std::invalid_argument("each cohort needs at least two samples");
    if (real.spatial() != synth.spatial() || real.images.size(1) != synth.images.size(1)) {
        throw std::invalid_argument("real and synthetic cohorts have different image shapes");
    }
    CohortReport rep;
    rep.n_real = real.size();
    rep.n_synth = synth.size();

    const auto match = match_real(real.records, synth.records);
    rep.n_matched_unique = static_cast<int64_t>(std::unordered_set<int64_t>(match.begin(), match.end()).size());
    const auto real_m = select(real, match);

    const auto synth_cond = record_conditions(synth);
    const auto real_cond = record_conditions(real_m);
    const auto ps = predict_attributes(predictor, synth.images, opt.batch);
    const auto pr = predict_attributes(predictor, real_m.images, opt.batch);
    const auto adh_s = attribute_adherence(ps.age, ps.sex_logit, synth_cond);
    const auto adh_r = attribute_adherence(pr.age, pr.sex_logit, real_cond);

    const double ms_s = ms_ssim_pairs(synth.images, opt.ms_ssim_pairs, derive_seed(opt.seed, "ms_ssim/synthetic"),
                                      opt.ms_ssim);
    const double ms_r = ms_ssim_pairs(real_m.images, opt.ms_ssim_pairs, derive_seed(opt.seed, "ms_ssim/real"),
                                      opt.ms_ssim);
    rep.synthetic = metrics_from(adh_s, ms_s);
    rep.real = metrics_from(adh_r, ms_r);
    rep.decades = adh_s.decades;
    rep.real_decades = adh_r.decades;
    const auto dim = ps.features.size(1);
    if (ps.features.size(0) > dim && pr.features.size(0) > dim) {
        rep.synthetic.fd_phantom = fd_phantom(pr.features, ps.features);
    }

    const auto& names = region_names();
    const auto vol_r = regional_volumes(cohort_labels(real_m), kNumRegions).to(torch::kDouble).contiguous();
    const auto vol_s = regional_volumes(cohort_labels(synth), kNumRegions).to(torch::kDouble).contiguous();
    for (int64_t r = 1; r < kNumRegions; ++r) {
        auto a = vol_r.select(1, r).contiguous();
        auto b = vol_s.select(1, r).contiguous();
        std::span<const double> va(a.data_ptr<double>(), static_cast<size_t>(a.numel()));
        std::span<const double> vb(b.data_ptr<double>(), static_cast<size_t>(b.numel()));
        RegionRow row{names[static_cast<size_t>(r)], mean_of(va), sample_std(va), mean_of(vb), sample_std(vb), {}};
        try {
            row.cohens_d = cohens_d(va, vb);
        } catch (const std::domain_error&) {
        }
        rep.regions.push_back(row);
    }
    rep.label_source = synth.labels.defined() ? "stored labels" : "intensity segmentation";
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(splitmix64(fnv1a64(real.fingerprint() + synth.fingerprint()) ^
                                                             parameter_hash(*predictor) ^ opt.seed)));
    rep.fingerprint = buf;
    return rep;
}

std::vector<fs::path> write_report(const CohortReport& report, const fs::path& dir, const Dataset& real,
                                   const Dataset& synth) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    std::vector<fs::path> written;

    {
        std::ofstream out(dir / "report.json");
        out << report.to_json().dump(2) << "\n";
        if (!out) throw std::runtime_error("failed to write report.json");
        written.push_back(dir / "report.json");
    }
    {
        std::ofstream out(dir / "regions.csv");
        out << "region,real_mean,real_std,synthetic_mean,synthetic_std,cohens_d\n";
        for (const auto& r : report.regions) {
            out << r.name << "," << fmt(r.real_mean) << "," << fmt(r.real_std) << "," << fmt(r.synth_mean) << ","
                << fmt(r.synth_std) << "," << (r.cohens_d ? fmt(*r.cohens_d) : "") << "\n";
        }
        written.push_back(dir / "regions.csv");
    }
    {
        std::ofstream out(dir / "decade_mae.csv");
        out << "decade,age_min,age_max,synthetic_count,synthetic_age_mae,synthetic_sex_acc,real_count,real_age_mae,"
               "real_sex_acc\n";
        for (int d = 0; d <= kLastDecade; ++d) {
            auto find = [d](const std::vector<DecadeError>& v) -> const DecadeError* {
                for (const auto& e : v) {
                    if (e.decade == d) return &e;
                }
                return nullptr;
            };
            const auto* s = find(report.decades);
            const auto* r = find(report.real_decades);
            if (!s && !r) continue;
            out << d << "," << 10 * d << "," << (d == kLastDecade ? 120 : 10 * d + 10) << ",";
            out << (s ? std::to_string(s->count) : "0") << "," << (s ? fmt(s->age_mae) : "") << ","
                << (s ? fmt(s->sex_acc) : "") << ",";
            out << (r ? std::to_string(r->count) : "0") << "," << (r ? fmt(r->age_mae) : "") << ","
                << (r ? fmt(r->sex_acc) : "") << "\n";
        }
        written.push_back(dir / "decade_mae.csv");
    }
    write_png(dir / "montage_synth.png", montage(decade_tiles(synth), 2, kLastDecade + 1));
    written.push_back(dir / "montage_synth.png");
    write_png(dir / "montage_real.png", montage(decade_tiles(real), 2, kLastDecade + 1));
    written.push_back(dir / "montage_real.png");
    return written;
}

}  // namespace morphldm
