#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sfg/guidance.hpp"
#include "sfg/oracle.hpp"

using namespace sfg;

namespace {

/// eps of a Gaussian-like density whose score is H x: eps = -sigma H x.
EpsFn linear_eps(const Mat& h, double sigma, int* calls) {
    return [h, sigma, calls](const Vec& x) -> Vec {
        ++*calls;
        return -sigma * (h * x);
    };
}

Mat symmetric_with(const Vec& eigenvalues, std::uint64_t seed) {
    Rng rng(seed);
    const int n = static_cast<int>(eigenvalues.size());
    const Mat a = Mat::NullaryExpr(n, n, [&]() { return std::normal_distribution<double>()(rng); });
    const Eigen::HouseholderQR<Mat> qr(a);
    const Mat q = qr.householderQ();
    return q * eigenvalues.asDiagonal() * q.transpose();
}

} // namespace

TEST_CASE("sfg_step calls eps exactly twice") {
    int calls = 0;
    const Mat h = Mat::Identity(3, 3);
    const SfgState s = sfg_init(3, 1, 1.0, 0.1, 2.0);
    sfg_step(linear_eps(h, 0.5, &calls), Vec::Ones(3), 0.5, s);
    CHECK(calls == 2);
}

TEST_CASE("sfg_init draws a unit vector deterministically") {
    const SfgState a = sfg_init(5, 9, 1.0, 0.1, 0.0), b = sfg_init(5, 9, 1.0, 0.1, 0.0);
    CHECK(a.v == b.v);
    CHECK(a.v.norm() == doctest::Approx(1.0));
    CHECK_THROWS_AS(sfg_init(5, 9, 1.0, 0.0, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(sfg_init(5, 9, -1.0, 0.1, 0.0), std::invalid_argument);
}

TEST_CASE("warm-started power iteration finds the top curvature") {
    Vec ev(4);
    ev << 1.5, 0.3, -0.8, -2.0;
    const Mat h = symmetric_with(ev, 3);
    const double sigma = 0.7;
    int calls = 0;
    const EpsFn eps = linear_eps(h, sigma, &calls);
    SfgState s = sfg_init(4, 2, 1.0, 0.1, 0.0);
    double alpha_prev = s.alpha;
    for (int it = 0; it < 80; ++it) {
        const auto r = sfg_step(eps, Vec::Zero(4), sigma, s);
        CHECK(r.state.alpha >= alpha_prev);
        alpha_prev = r.state.alpha;
        s = r.state;
    }
    const auto top = top_eigenpair(h);
    CHECK(s.last_lambda == doctest::Approx(sigma * sigma * top.value).epsilon(1e-6));
    CHECK(std::abs(s.v.dot(top.vector)) > 1 - 1e-8);
}

TEST_CASE("the shift keeps iteration on the most positive eigenvalue") {
    // Largest magnitude is negative; without the shift plain power iteration would lock onto -3.
    Vec ev(3);
    ev << 0.5, -1.0, -3.0;
    const Mat h = symmetric_with(ev, 4);
    const double sigma = 1.0;
    int calls = 0;
    SfgState s = sfg_init(3, 5, 1.0, 0.1, 0.0);
    for (int it = 0; it < 200; ++it) s = sfg_step(linear_eps(h, sigma, &calls), Vec::Zero(3), sigma, s).state;
    CHECK(s.last_lambda == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(s.alpha >= 1.0);
}

TEST_CASE("gate and guidance") {
    const double sigma = 0.5;
    int calls = 0;
    SUBCASE("negative definite curvature never opens the gate") {
        const Mat h = -Mat::Identity(3, 3);
        SfgState s = sfg_init(3, 1, 1.0, 0.1, 3.0);
        for (int it = 0; it < 30; ++it) {
            const Vec x = Vec::Constant(3, 0.1 * it);
            const auto r = sfg_step(linear_eps(h, sigma, &calls), x, sigma, s);
            CHECK_FALSE(r.update.gate);
            const Vec plain = linear_eps(h, sigma, &calls)(x);
            CHECK(r.eps_hat == plain);  // bitwise
            s = r.state;
        }
    }
    SUBCASE("positive curvature subtracts w u") {
        const Mat h = Mat::Identity(2, 2);
        const SfgState s = sfg_init(2, 1, 1.0, 0.1, 2.0);
        const Vec x = Vec::Ones(2);
        const auto r = sfg_step(linear_eps(h, sigma, &calls), x, sigma, s);
        REQUIRE(r.update.gate);
        CHECK(r.update.lambda == doctest::Approx(sigma * sigma));
        const Vec expected = linear_eps(h, sigma, &calls)(x) - 2.0 * r.update.u;
        CHECK((r.eps_hat - expected).norm() < 1e-14);
    }
    SUBCASE("zero weight is bitwise identity") {
        const Mat h = Mat::Identity(2, 2);
        const SfgState s = sfg_init(2, 1, 1.0, 0.1, 0.0);
        const Vec x = Vec::Ones(2);
        const auto r = sfg_step(linear_eps(h, sigma, &calls), x, sigma, s);
        CHECK(r.update.gate);
        CHECK(r.eps_hat == linear_eps(h, sigma, &calls)(x));
    }
}

TEST_CASE("H(0) = 0 and degenerate directions keep v") {
    SfgState s = sfg_init(2, 1, 0.0, 0.1, 1.0);
    const Vec v0 = s.v;
    const auto up = sfg_update(Vec::Ones(2), Vec::Ones(2), 1.0, s);  // u = 0, shift = 0
    CHECK(up.lambda == 0.0);
    CHECK_FALSE(up.gate);
    CHECK(up.degenerate);
    CHECK(s.v == v0);
}

TEST_CASE("alpha only grows") {
    SfgState s = sfg_init(2, 3, 1.0, 0.1, 0.0);
    const Mat h = -5.0 * Mat::Identity(2, 2);
    int calls = 0;
    s = sfg_step(linear_eps(h, 1.0, &calls), Vec::Zero(2), 1.0, s).state;
    CHECK(s.alpha == doctest::Approx(5.0));
    const Mat h2 = -0.1 * Mat::Identity(2, 2);
    s = sfg_step(linear_eps(h2, 1.0, &calls), Vec::Zero(2), 1.0, s).state;
    CHECK(s.alpha == doctest::Approx(5.0));
}

TEST_CASE("score-space form matches the noise-space form") {
    const SmoothedGmm g = smooth(make_two_gaussian(4.0, 1.0, 2), 0.5);
    const SfgState s = sfg_init(2, 7, 1.0, 0.1, 1.5);
    Vec x(2);
    x << 0.2, 0.1;
    const auto rs = sfg_on_score([&](const Vec& y) { return score(g, y); }, x, 0.5, s);
    const auto re = sfg_step([&](const Vec& y) -> Vec { return -0.5 * score(g, y); }, x, 0.5, s);
    CHECK((rs.score - (-re.eps_hat / 0.5)).norm() < 1e-12);
    CHECK(rs.update.gate == re.update.gate);
}

TEST_CASE("reference-model guidance at identity weights is bitwise") {
    Rng rng(8);
    const Vec c = test::random_vec(rng, 4), u = test::random_vec(rng, 4);
    CHECK(cfg(c, u, 1.0) == c);
    CHECK((cfg(c, u, 3.0) - (c + 2.0 * (c - u))).norm() < 1e-14);
    CHECK(autoguidance(c, u, 1.0) == c);
    CHECK(classifier_guidance(c, u, 0.0) == c);
    CHECK((classifier_guidance(c, u, 2.0) - (c + 2.0 * u)).norm() < 1e-14);
    const Interval iv{0.2, 0.6};
    CHECK(interval_cfg(c, u, 3.0, 0.1, iv) == c);
    CHECK(interval_cfg(c, u, 3.0, 0.4, iv) == cfg(c, u, 3.0));
    CHECK_THROWS(interval_cfg(c, u, 3.0, 0.4, Interval{0.6, 0.2}));
    CHECK_THROWS(cfg(c, Vec(Vec::Zero(3)), 2.0));
}

TEST_CASE("guidance spec validation") {
    GuidanceSpec s;
    s.kind = GuidanceKind::cfg;
    s.weight = 0.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.weight = 2.0;
    CHECK_NOTHROW(s.validate());
    CHECK(s.needs_companion());
    CHECK_FALSE(s.base_is_identity());
    s.kind = GuidanceKind::interval_cfg;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.interval = Interval{0.1, 0.5};
    CHECK_NOTHROW(s.validate());
    s = GuidanceSpec{};
    s.kind = GuidanceKind::sfg;
    s.weight = 0.0;
    CHECK_FALSE(s.uses_sfg());
    s.weight = 2.0;
    CHECK(s.uses_sfg());
    s.sfg_stack_weight = 1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = GuidanceSpec{};
    s.kind = GuidanceKind::classifier;
    s.weight = 1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK(guidance_kind_from_string("autoguidance") == GuidanceKind::autoguidance);
    CHECK_THROWS(guidance_kind_from_string("pag"));
}
