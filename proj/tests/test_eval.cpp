#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sfg/eval.hpp"

using namespace sfg;

namespace {

LabeledPointSet points_of(const Mat& m) {
    LabeledPointSet s;
    s.points = m;
    s.labels.assign(m.rows(), 0);
    return s;
}

} // namespace

TEST_CASE("Frechet distance closed forms") {
    Vec m1(2), m2(2);
    m1 << 0, 0;
    m2 << 3, 4;
    const Mat i2 = Mat::Identity(2, 2);
    CHECK(gaussian_frechet(m1, i2, m2, i2) == doctest::Approx(25.0));
    // 1-D: (m1-m2)^2 + (s1 - s2)^2
    Vec a(1), b(1);
    a << 1.0;
    b << -1.0;
    Mat ca(1, 1), cb(1, 1);
    ca << 4.0;
    cb << 9.0;
    CHECK(gaussian_frechet(a, ca, b, cb) == doctest::Approx(4.0 + 1.0).epsilon(1e-6));
    // commuting diagonals: sum (sqrt a_i - sqrt b_i)^2
    Mat da = Vec::Constant(3, 1.0).asDiagonal(), db = Vec::LinSpaced(3, 1.0, 9.0).asDiagonal();
    const double expected = 0.0 + std::pow(std::sqrt(5.0) - 1.0, 2) + std::pow(3.0 - 1.0, 2);
    CHECK(gaussian_frechet(Vec::Zero(3), da, Vec::Zero(3), db) == doctest::Approx(expected).epsilon(1e-6));
    Rng rng(1);
    const Mat c = test::random_spd(rng, 4);
    CHECK(std::abs(gaussian_frechet(Vec::Zero(4), c, Vec::Zero(4), c)) < 1e-6);
}

TEST_CASE("Frechet distance of point sets") {
    Rng rng(2);
    const Mat a = Mat::NullaryExpr(4000, 2, [&]() { return std::normal_distribution<double>()(rng); });
    Mat b = Mat::NullaryExpr(4000, 2, [&]() { return std::normal_distribution<double>()(rng); });
    CHECK(gaussian_frechet(a, a) < 1e-6);
    CHECK(gaussian_frechet(a, b) < 0.01);
    b.col(0).array() += 2.0;
    CHECK(gaussian_frechet(a, b) == doctest::Approx(4.0).epsilon(0.03));
    CHECK(gaussian_frechet(a, b) == doctest::Approx(gaussian_frechet(b, a)).epsilon(1e-9));
    CHECK_THROWS(gaussian_frechet(Mat(a.topRows(2)), b));
}

TEST_CASE("coverage entropy bounds") {
    Mat modes(4, 2);
    modes << 0, 0, 10, 0, 0, 10, 10, 10;
    Mat even(8, 2);
    even << modes, modes;
    CHECK(coverage_entropy(points_of(even), modes) == doctest::Approx(std::log(4.0)));
    Mat single = Mat::Zero(5, 2);
    CHECK(coverage_entropy(points_of(single), modes) == 0.0);
    Rng rng(3);
    const Mat random = Mat::NullaryExpr(50, 2, [&]() { return std::uniform_real_distribution<double>(-5, 15)(rng); });
    const double h = coverage_entropy(points_of(random), modes);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(4.0) + 1e-12);
    const Fractal f(FractalSpec{});
    const auto pts = f.sample(3000, 4);
    const double hf = coverage_entropy(pts, f.segments());
    CHECK(hf > 0.0);
    CHECK(hf <= std::log(static_cast<double>(f.segments().size())));
}

TEST_CASE("outlier rate") {
    const Fractal f(FractalSpec{});
    const LabeledPointSet far = points_of(Mat::Constant(10, 2, -50.0));
    CHECK(outlier_rate(far, f, 1.0) == 1.0);
    const auto on = f.sample(2000, 5);
    const double r = outlier_rate(on, f, 3 * 0.005);
    CHECK(r < 0.01);  // about 0.3% of jitter lies beyond 3 sigma
    double prev = 1.0;
    for (double t : {0.001, 0.003, 0.01, 0.03}) {
        const double cur = outlier_rate(on, f, t);
        CHECK(cur <= prev);
        prev = cur;
    }
    const GmmSpec g = make_two_gaussian(4.0, 1.0, 2);
    Mat pts(3, 2);
    pts << 2.0, 0.0, 0.0, 0.0, 0.0, 10.0;
    CHECK(outlier_rate(points_of(pts), g, 2.5) == doctest::Approx(1.0 / 3.0));
    CHECK(outlier_rate(points_of(pts), g, 1.0) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS(outlier_rate(points_of(pts), g, 0.0));
}

TEST_CASE("oracle ESM is exactly zero for every region") {
    const GmmSpec s = make_simplex_gmm(4, 8, 0.2);
    const OracleModel oracle(s);
    const auto rows = esm_by_region(oracle, simplex_regions(s), log_grid(0.05, 2.0, 4), 50, 1);
    CHECK(rows.size() == 12u);
    for (const auto& r : rows) CHECK(r.loss == 0.0);
}

TEST_CASE("zero model ESM matches the closed form") {
    // zero eps on N(0, I) data: sigma^2 ||x / (1 + sigma^2)||^2 averages sigma^2 n / (1 + sigma^2)
    const int n = 4;
    GmmSpec g;
    g.components.push_back({1.0, Vec::Zero(n), Covariance::isotropic(1.0), 0});
    Architecture a;
    a.data_dim = n;
    a.hidden = {4};
    a.skip = false;
    ScoreModel zero(a, 1);
    zero.parameters().setZero();
    RegionSpecs rs{g, g, g};
    const auto rows = esm_by_region(zero, rs, {1.0}, 20000, 3);
    for (const auto& r : rows) CHECK(r.loss == doctest::Approx(n / 2.0).epsilon(0.03));
}

TEST_CASE("log grid") {
    const auto g = log_grid(0.02, 10.0, 9);
    CHECK(g.front() == 0.02);
    CHECK(g.back() == 10.0);
    for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] / g[i - 1] == doctest::Approx(g[1] / g[0]));
    CHECK_THROWS(log_grid(0.0, 1.0, 3));
}

TEST_CASE("sweep runs a baseline and tags every point") {
    GuidanceSpec base;
    base.kind = GuidanceKind::sfg;
    std::vector<double> seen;
    const auto pts = sweep(base, {0.0, 1.0, 2.0}, {{"a", 1.0, std::nullopt}, {"b", 4.0, std::nullopt}},
                           [&](const GuidanceSpec& s) {
                               seen.push_back(s.weight);
                               return std::map<std::string, double>{{"m", s.weight * s.sfg.alpha0}};
                           });
    REQUIRE(pts.size() == 7u);
    CHECK(pts[0].curve == "baseline");
    CHECK(pts[0].weight == 0.0);
    CHECK(pts[4].curve == "b");
    CHECK(pts[6].metrics.at("m") == 8.0);
    CHECK_THROWS_AS(sweep(base, {1.0}, {}, [](const GuidanceSpec&) { return std::map<std::string, double>{}; }),
                    ConfigError);
    try {
        sweep(base, {1.0, 2.0}, {}, [](const GuidanceSpec& s) -> std::map<std::string, double> {
            if (s.weight == 2.0) throw std::runtime_error("boom");
            return {};
        });
        FAIL("expected failure");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("w=2") != std::string::npos);
    }
    const auto dir = test::scratch_dir("sweep");
    write_sweep_csv((dir / "s.csv").string(), pts);
    const auto back = read_sweep_csv((dir / "s.csv").string());
    REQUIRE(back.size() == pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(back[i].curve == pts[i].curve);
        CHECK(back[i].weight == pts[i].weight);
        CHECK(back[i].metrics == pts[i].metrics);
    }
}

TEST_CASE("curvature field of two Gaussians") {
    const GmmSpec g = make_two_gaussian(4.0, 1.0, 2);
    FieldGrid grid;
    grid.nx = grid.ny = 3;
    grid.x_min = grid.y_min = -1.0;
    grid.x_max = grid.y_max = 1.0;
    // merged regime at sigma^2 = 4, saddle at sigma^2 = 0.5
    const auto merged = curvature_field(smooth(g, 2.0), grid);
    const auto split = curvature_field(smooth(g, std::sqrt(0.5)), grid);
    const FieldPoint& mid = split[4];
    CHECK(mid.x.norm() == 0.0);
    // lambda at the midpoint: -1/v + (mu/v)^2 with v = 1.5, mu = 2
    CHECK(mid.lambda == doctest::Approx(-1.0 / 1.5 + 4.0 / 2.25).epsilon(1e-9));
    CHECK(std::abs(mid.eigvec[0]) > 0.99);
    CHECK(mid.gate);
    CHECK(merged[4].lambda == doctest::Approx(-1.0 / 5.0 + 4.0 / 25.0).epsilon(1e-9));
    CHECK_FALSE(merged[4].gate);
    REQUIRE(mid.class_grads.size() == 2u);
    CHECK((mid.class_grads[0] + mid.class_grads[1]).norm() < 1e-12);
    const auto dir = test::scratch_dir("field");
    write_field_csv((dir / "f.csv").string(), split);
    const auto back = read_field_csv((dir / "f.csv").string());
    REQUIRE(back.size() == split.size());
    CHECK(back[4].gate);
    CHECK(back[4].lambda == doctest::Approx(mid.lambda));
    CHECK_THROWS(curvature_field(smooth(make_two_gaussian(4.0, 1.0, 3), 1.0), grid));
}

TEST_CASE("sfg stats and report validation") {
    SampleSet s;
    s.trajectories.resize(2);
    s.trajectories[0].sfg_trace = {{-1.0, false, 1.0}, {0.5, true, 1.0}};
    s.trajectories[1].sfg_trace = {{0.25, true, 1.0}, {-0.5, false, 1.0}};
    const SfgStats st = sfg_stats(s);
    CHECK(st.n == 4);
    CHECK(st.gate_on_fraction == 0.5);
    CHECK(st.lambda_min == -1.0);
    CHECK(st.lambda_max == 0.5);
    CHECK(st.lambda_mean == doctest::Approx(-0.1875));
    EvalReport r;
    r.outlier_rate = 1.5;
    CHECK_THROWS_AS(r.validate(), NumericError);
    r.outlier_rate = 0.5;
    r.frechet = std::nan("");
    CHECK_THROWS_AS(r.validate(), NumericError);
    r.frechet = 1.0;
    CHECK_NOTHROW(r.validate());
    CHECK(r.to_json().at("outlier_rate") == 0.5);
}
