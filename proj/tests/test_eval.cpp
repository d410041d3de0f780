#include "testing.hpp"

#include "morphldm/dataset.hpp"
#include "morphldm/eval.hpp"
#include "morphldm/fields.hpp"
#include "morphldm/phantoms.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

using namespace morphldm;
namespace fs = std::filesystem;

namespace {

auto dbl() { return torch::TensorOptions().dtype(torch::kDouble); }

// Direct 2D SSIM terms: Gaussian window over the valid region, luminance and
// contrast-structure averaged separately.
std::pair<double, double> ssim_oracle(const torch::Tensor& x, const torch::Tensor& y, int win, double sigma) {
    const int64_t H = x.size(0), W = x.size(1);
    std::vector<double> g(static_cast<size_t>(win));
    double gs = 0;
    for (int i = 0; i < win; ++i) {
        const double d = i - (win - 1) / 2.0;
        g[size_t(i)] = std::exp(-d * d / (2 * sigma * sigma));
        gs += g[size_t(i)];
    }
    for (auto& v : g) v /= gs;
    auto a = x.accessor<double, 2>(), b = y.accessor<double, 2>();
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double l = 0, cs = 0;
    int64_t n = 0;
    for (int64_t i = 0; i + win <= H; ++i) {
        for (int64_t j = 0; j + win <= W; ++j) {
            double m1 = 0, m2 = 0, s11 = 0, s22 = 0, s12 = 0;
            for (int p = 0; p < win; ++p) {
                for (int q = 0; q < win; ++q) {
                    const double w = g[size_t(p)] * g[size_t(q)];
                    const double u = a[i + p][j + q], v = b[i + p][j + q];
                    m1 += w * u;
                    m2 += w * v;
                    s11 += w * u * u;
                    s22 += w * v * v;
                    s12 += w * u * v;
                }
            }
            const double v1 = s11 - m1 * m1, v2 = s22 - m2 * m2, cov = s12 - m1 * m2;
            l += (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
            cs += (2 * cov + c2) / (v1 + v2 + c2);
            ++n;
        }
    }
    return {l / double(n), cs / double(n)};
}

torch::Tensor half(const torch::Tensor& x) {
    return x.view({x.size(0) / 2, 2, x.size(1) / 2, 2}).mean({1, 3});
}

double ms_ssim_oracle(torch::Tensor x, torch::Tensor y, int scales) {
    const double base[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double wsum = 0;
    for (int s = 0; s < scales; ++s) wsum += base[s];
    double out = 1;
    for (int s = 0; s < scales; ++s) {
        const auto [l, cs] = ssim_oracle(x, y, 11, 1.5);
        out *= std::pow(std::max(cs, 0.0), base[s] / wsum);
        if (s == scales - 1) out *= std::pow(std::max(l, 0.0), base[s] / wsum);
        x = half(x);
        y = half(y);
    }
    return out;
}

// Frechet distance through the general (non-symmetric) eigenvalues of S1 S2.
double fd_oracle(const torch::Tensor& a, const torch::Tensor& b) {
    auto to_eigen = [](const torch::Tensor& t) {
        Eigen::MatrixXd m(t.size(0), t.size(1));
        auto acc = t.accessor<double, 2>();
        for (int64_t i = 0; i < t.size(0); ++i)
            for (int64_t j = 0; j < t.size(1); ++j) m(i, j) = acc[i][j];
        return m;
    };
    const Eigen::MatrixXd x = to_eigen(a), y = to_eigen(b);
    const Eigen::RowVectorXd mx = x.colwise().mean(), my = y.colwise().mean();
    const Eigen::MatrixXd cx = x.rowwise() - mx, cy = y.rowwise() - my;
    const Eigen::MatrixXd sx = cx.transpose() * cx / double(x.rows() - 1);
    const Eigen::MatrixXd sy = cy.transpose() * cy / double(y.rows() - 1);
    Eigen::EigenSolver<Eigen::MatrixXd> es(sx * sy);
    double tr = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(es.eigenvalues()[i].real(), 0.0));
    return (mx - my).squaredNorm() + sx.trace() + sy.trace() - 2 * tr;
}

std::vector<SampleRecord> records(std::vector<std::pair<double, int>> as) {
    std::vector<SampleRecord> out;
    for (size_t i = 0; i < as.size(); ++i) out.push_back({"r" + std::to_string(i), as[i].first, as[i].second, i});
    return out;
}

NetConfig predictor_config() {
    NetConfig c;
    c.predictor_width = 8;
    c.norm_groups = 4;
    return c;
}

}  // namespace

TEST_CASE("ms-ssim weights") {
    auto w = ms_ssim_weights(3);
    REQUIRE(w.size() == 3);
    CHECK(w[0] + w[1] + w[2] == doctest::Approx(1.0));
    CHECK(w[1] / w[0] == doctest::Approx(0.2856 / 0.0448));
    CHECK(ms_ssim_weights(5)[4] == doctest::Approx(0.1333));
    CHECK_THROWS(ms_ssim_weights(0));
    CHECK_THROWS(ms_ssim_weights(6));
}

TEST_CASE("ms-ssim matches a direct oracle") {
    torch::manual_seed(1);
    auto a = torch::rand({64, 64}, dbl());
    auto b = (0.6 * a + 0.4 * torch::rand({64, 64}, dbl())).contiguous();
    for (int scales : {1, 2, 3}) {
        MsSsimOptions o;
        o.scales = scales;
        CHECK(ms_ssim(a.unsqueeze(0), b.unsqueeze(0), o) == doctest::Approx(ms_ssim_oracle(a, b, scales)).epsilon(1e-9));
    }
}

TEST_CASE("ms-ssim properties") {
    torch::manual_seed(2);
    auto x = torch::rand({1, 64, 64}, dbl());
    CHECK(std::abs(ms_ssim(x, x) - 1.0) <= 1e-6);
    for (int k = 0; k < 10; ++k) {
        auto a = torch::rand({1, 64, 64}, dbl()) * (0.2 + 0.08 * k);
        auto b = torch::rand({1, 64, 64}, dbl());
        const double ab = ms_ssim(a, b), ba = ms_ssim(b, a);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
    auto vol = torch::rand({1, 48, 48, 48}, dbl());
    MsSsimOptions o;
    o.scales = 2;
    CHECK(std::abs(ms_ssim(vol, vol, o) - 1.0) <= 1e-6);

    CHECK_THROWS_AS(ms_ssim(torch::rand({1, 40, 40}), torch::rand({1, 40, 40})), std::invalid_argument);
    CHECK_THROWS_AS(ms_ssim(torch::rand({1, 64, 64}), torch::rand({1, 64, 32})), std::invalid_argument);
}

TEST_CASE("distinct pairs") {
    auto p = distinct_pairs(50, 300, 4);
    CHECK(p.size() == 300);
    std::set<std::pair<int64_t, int64_t>> uniq(p.begin(), p.end());
    CHECK(uniq.size() == 300);
    for (auto [i, j] : p) {
        CHECK(i >= 0);
        CHECK(i < j);
        CHECK(j < 50);
    }
    CHECK(distinct_pairs(50, 300, 4) == p);
    CHECK(distinct_pairs(50, 300, 5) != p);
    auto all = distinct_pairs(5, 100, 1);
    CHECK(all.size() == 10);
    CHECK(std::set<std::pair<int64_t, int64_t>>(all.begin(), all.end()).size() == 10);
    CHECK_THROWS(distinct_pairs(1, 5, 1));
}

TEST_CASE("ms-ssim over cohorts") {
    torch::manual_seed(3);
    auto one = torch::rand({1, 1, 64, 64});
    CHECK(ms_ssim_pairs(one.expand({8, 1, 64, 64}), 20, 1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(ms_ssim_pairs(torch::rand({20, 1, 64, 64}), 100, 1) < 0.5);
}

TEST_CASE("age decades and attribute adherence") {
    CHECK(age_decade(0.0) == 0);
    CHECK(age_decade(9.99) == 0);
    CHECK(age_decade(10.0) == 1);
    CHECK(age_decade(99.5) == 9);
    CHECK(age_decade(100.0) == 9);
    CHECK(age_decade(120.0) == 9);

    std::vector<Condition> c{{7, 0}, {15, 1}, {18, 0}, {95, 1}, {100, 0}};
    std::vector<double> exact_age, exact_sex;
    for (auto& x : c) {
        exact_age.push_back(x.age);
        exact_sex.push_back(x.sex ? 3.0 : -3.0);
    }
    auto perfect = attribute_adherence(exact_age, exact_sex, c);
    CHECK(perfect.age_mae == 0.0);
    CHECK(perfect.sex_acc == 1.0);

    std::vector<double> age{9, 12, 18, 85, 100}, logit{0.5, 1.0, -1.0, -2.0, 0.0};
    auto a = attribute_adherence(age, logit, c);
    CHECK(a.age_mae == doctest::Approx((2 + 3 + 0 + 10 + 0) / 5.0));
    // logit 0 counts as female
    CHECK(a.sex_acc == doctest::Approx(3.0 / 5.0));
    REQUIRE(a.decades.size() == 3);
    CHECK(a.decades[0].decade == 0);
    CHECK(a.decades[0].count == 1);
    CHECK(a.decades[0].sex_acc == 0.0);
    CHECK(a.decades[1].decade == 1);
    CHECK(a.decades[1].age_mae == doctest::Approx(1.5));
    CHECK(a.decades[1].sex_acc == 1.0);
    CHECK(a.decades[2].decade == 9);
    CHECK(a.decades[2].count == 2);
    CHECK(a.decades[2].age_mae == doctest::Approx(5.0));
    CHECK(a.decades[2].sex_acc == 0.5);

    std::vector<double> short_age{1, 2};
    CHECK_THROWS_AS(attribute_adherence(short_age, logit, c), std::invalid_argument);
}

TEST_CASE("regional volumes") {
    auto bg = torch::zeros({2, 6, 6}, torch::kUInt8);
    auto v = regional_volumes(bg, 4);
    CHECK(v.sizes() == torch::IntArrayRef({2, 4}));
    CHECK(v.slice(1, 1).sum().item<int64_t>() == 0);
    CHECK(v[0][0].item<int64_t>() == 36);

    auto lab = torch::zeros({4, 4}, torch::kUInt8);
    lab[1][1] = 3;
    lab[1][2] = 3;
    lab[2][1] = 3;
    lab[0].fill_(1);
    lab[3][3] = 2;
    auto counts = regional_volumes(LabelMap{lab, region_names()});
    CHECK(counts == std::vector<int64_t>{8, 4, 1, 3});

    PhantomSpec spec;
    auto p = generate_phantom(50, 1, 3, spec);
    auto vols = regional_volumes(p.labels);
    CHECK(std::accumulate(vols.begin(), vols.end(), int64_t{0}) == 64 * 64);
    auto warped = warp_labels(p.labels, torch::zeros({2, 64, 64}));
    CHECK(regional_volumes(warped) == vols);

    auto bad = lab.clone();
    bad[0][0] = 7;
    CHECK_THROWS_AS(regional_volumes(bad.unsqueeze(0), 4), std::out_of_range);
}

TEST_CASE("cohen's d") {
    std::vector<double> a{1, 2, 3, 4, 5};
    CHECK(cohens_d(a, a) == 0.0);
    const double s = 1.0 / std::sqrt(2.0);
    std::vector<double> z{-s, s}, o{1 - s, 1 + s};
    CHECK(cohens_d(z, o) == doctest::Approx(1.0).epsilon(1e-12));

    torch::manual_seed(5);
    auto ta = torch::randn({40}, dbl()), tb = torch::randn({55}, dbl()) + 0.7;
    std::vector<double> va(ta.data_ptr<double>(), ta.data_ptr<double>() + 40);
    std::vector<double> vb(tb.data_ptr<double>(), tb.data_ptr<double>() + 55);
    const double d = cohens_d(va, vb);
    CHECK(cohens_d(vb, va) == doctest::Approx(d).epsilon(1e-15));
    for (auto [k, m] : {std::pair{2.5, -3.0}, std::pair{0.01, 100.0}, std::pair{7.0, 0.0}}) {
        std::vector<double> xa, xb;
        for (double v : va) xa.push_back(k * v + m);
        for (double v : vb) xb.push_back(k * v + m);
        CHECK(std::abs(cohens_d(xa, xb) - d) <= 1e-9);
    }
    std::vector<double> one{1.0}, flat{2.0, 2.0};
    CHECK_THROWS_AS(cohens_d(one, a), std::invalid_argument);
    CHECK_THROWS_AS(cohens_d(flat, flat), std::domain_error);
}

TEST_CASE("fd-phantom") {
    torch::manual_seed(6);
    auto x = torch::randn({60, 5}, dbl()) * torch::tensor({1.0, 2.0, 0.5, 1.5, 3.0}, dbl());
    CHECK(std::abs(fd_phantom(x, x)) <= 1e-6);

    auto m = torch::tensor({0.5, -1.0, 2.0, 0.0, 1.0}, dbl());
    CHECK(fd_phantom(x, x + m) == doctest::Approx(m.pow(2).sum().item<double>()).epsilon(1e-6));

    for (int k = 0; k < 5; ++k) {
        auto a = torch::randn({30, 4}, dbl()) * (1 + k);
        auto mix = torch::randn({4, 4}, dbl());
        auto b = torch::randn({25, 4}, dbl()).mm(mix) + 0.3 * k;
        const double fd = fd_phantom(a, b);
        CHECK(std::abs(fd - fd_oracle(a, b)) <= 1e-5);
        CHECK(fd >= 0.0);
    }
    // rank-deficient features still give a finite non-negative distance
    auto low = torch::randn({40, 2}, dbl()).mm(torch::randn({2, 4}, dbl()));
    const double fl = fd_phantom(low, torch::randn({40, 4}, dbl()));
    CHECK(std::isfinite(fl));
    CHECK(fl >= 0.0);

    CHECK_THROWS_AS(fd_phantom(torch::randn({4, 5}, dbl()), x), std::invalid_argument);
    CHECK_THROWS_AS(fd_phantom(x, torch::randn({60, 4}, dbl())), std::invalid_argument);
}

TEST_CASE("real-cohort matching") {
    auto real = records({{10, 0}, {12, 0}, {30, 1}, {31, 1}, {50, 0}});
    SUBCASE("nearest age of the same sex without replacement") {
        auto synth = records({{11, 0}, {11, 0}, {29, 1}, {45, 0}});
        CHECK(match_real(real, synth) == std::vector<int64_t>{0, 1, 2, 4});
    }
    SUBCASE("ties resolve to the lower index") {
        auto synth = records({{11, 0}});
        CHECK(match_real(real, synth) == std::vector<int64_t>{0});
    }
    SUBCASE("an exhausted pool is reused") {
        auto synth = records({{30, 1}, {30, 1}, {30, 1}});
        CHECK(match_real(real, synth) == std::vector<int64_t>{2, 3, 2});
    }
    SUBCASE("missing sex is an error") {
        auto women = records({{10, 0}, {20, 0}});
        auto synth = records({{15, 1}});
        CHECK_THROWS_AS(match_real(women, synth), std::invalid_argument);
    }
}

TEST_CASE("cohort labels") {
    PhantomSpec spec;
    CohortPlan plan;
    plan.n = 3;
    auto ds = generate_phantom_dataset(spec, plan, 2);
    CHECK(torch::equal(cohort_labels(ds), ds.labels));
    auto bare = ds;
    bare.labels = torch::Tensor();
    auto seg = cohort_labels(bare);
    CHECK(seg.sizes() == ds.labels.sizes());
    CHECK(seg.eq(ds.labels).to(torch::kDouble).mean().item<double>() > 0.99);
}

TEST_CASE("cohort evaluation and report") {
    PhantomSpec spec;
    CohortPlan plan;
    plan.n = 240;
    plan.young_fraction = 15.0 / 95.0;  // uniform over 5..100
    auto real = generate_phantom_dataset(spec, plan, 100);
    auto other = generate_phantom_dataset(spec, plan, 200);
    other.kind = "synthetic";
    other.spec.reset();

    torch::manual_seed(7);
    AttributePredictor pred(predictor_config());
    EvalOptions opt;
    opt.ms_ssim_pairs = 50;
    opt.seed = 3;
    auto rep = evaluate_cohorts(real, other, pred, opt);
    CHECK(rep.n_real == 240);
    CHECK(rep.n_synth == 240);
    // sex counts differ between the cohorts, so a few real samples are reused
    CHECK(rep.n_matched_unique <= 240);
    CHECK(rep.n_matched_unique > 220);
    CHECK(rep.label_source == "stored labels");
    REQUIRE(rep.regions.size() == 3);
    CHECK(rep.regions[0].name == "cortex");
    CHECK(rep.regions[2].name == "ventricle");
    for (const auto& r : rep.regions) {
        REQUIRE(r.cohens_d.has_value());
        CAPTURE(r.name);
        CHECK(*r.cohens_d >= 0.0);
        // independent cohorts from the same generator, matched on age and sex
        CHECK(*r.cohens_d < 0.1);
    }
    CHECK(rep.synthetic.sex_acc >= 0.0);
    CHECK(rep.synthetic.sex_acc <= 1.0);
    REQUIRE(rep.synthetic.fd_phantom.has_value());
    CHECK(*rep.synthetic.fd_phantom >= 0.0);
    CHECK(rep.synthetic.ms_ssim > 0.0);
    CHECK(rep.synthetic.ms_ssim < 1.0);
    CHECK(rep.decades.size() == 10);

    auto again = evaluate_cohorts(real, other, pred, opt);
    CHECK(again.to_json() == rep.to_json());

    auto j = rep.to_json();
    std::set<std::string> keys;
    for (auto& [k, v] : j.at("metrics").items()) keys.insert(k);
    CHECK(keys == std::set<std::string>{"sex_acc", "age_mae", "fd_phantom", "ms_ssim"});

    auto dir = fs::temp_directory_path() / "morphldm_test_report";
    fs::remove_all(dir);
    auto files = write_report(rep, dir, real, other);
    CHECK(files.size() == 5);
    for (const auto& f : files) {
        CHECK(fs::exists(f));
        CHECK(fs::file_size(f) > 0);
    }
    std::ifstream png(dir / "montage_synth.png", std::ios::binary);
    char magic[8];
    png.read(magic, 8);
    CHECK(std::string(magic + 1, 3) == "PNG");
    std::ifstream csv(dir / "regions.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.find("cohens_d") != std::string::npos);
    int rows = 0;
    for (std::string line; std::getline(csv, line);) rows += !line.empty();
    CHECK(rows == 3);
    fs::remove_all(dir);

    auto unlabeled = other;
    unlabeled.labels = torch::Tensor();
    CHECK(evaluate_cohorts(real, unlabeled, pred, opt).label_source == "intensity segmentation");
}
