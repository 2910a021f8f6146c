#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sfg/oracle.hpp"

using namespace sfg;
using sfg::test::random_gmm;
using sfg::test::random_vec;

namespace {

Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    Vec g(x.size());
    for (int i = 0; i < x.size(); ++i) {
        Vec a = x, b = x;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(a) - f(b)) / (2 * h);
    }
    return g;
}

Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
    Mat j(x.size(), x.size());
    for (int i = 0; i < x.size(); ++i) {
        Vec a = x, b = x;
        a[i] += h;
        b[i] -= h;
        j.col(i) = (f(a) - f(b)) / (2 * h);
    }
    return j;
}

} // namespace

TEST_CASE("score and Hessian agree with finite differences") {
    Rng rng(1);
    for (int trial = 0; trial < 60; ++trial) {
        const int dim = 1 + trial % 4;
        const GmmSpec spec = random_gmm(rng, dim);
        const double sigma = std::exp(std::uniform_real_distribution<double>(-2.0, 1.0)(rng));
        const SmoothedGmm g = smooth(spec, sigma);
        const Vec x = random_vec(rng, dim, 1.5);
        const Vec s = score(g, x);
        const Vec fd = fd_gradient([&](const Vec& y) { return log_density(g, y); }, x, 1e-5);
        CHECK((s - fd).cwiseAbs().maxCoeff() < 1e-5 * (1.0 + s.cwiseAbs().maxCoeff()));
        const Mat h = hessian(g, x);
        const Mat fj = fd_jacobian([&](const Vec& y) { return score(g, y); }, x, 1e-5);
        CHECK((h - fj).cwiseAbs().maxCoeff() < 1e-4 * (1.0 + h.cwiseAbs().maxCoeff()));
        CHECK((h - h.transpose()).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + h.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("score_batch matches column-wise score") {
    Rng rng(2);
    const GmmSpec spec = random_gmm(rng, 3);
    const SmoothedGmm g = smooth(spec, 0.3);
    const Mat x = Mat::NullaryExpr(3, 7, [&]() { return std::normal_distribution<double>()(rng); });
    const Mat s = score_batch(g, x);
    for (int j = 0; j < 7; ++j) CHECK((s.col(j) - score(g, x.col(j))).norm() < 1e-12);
}

TEST_CASE("responsibilities stay finite far from every component") {
    const GmmSpec spec = make_two_gaussian(4.0, 1.0, 2);
    const SmoothedGmm g = smooth(spec, 0.01);
    const Vec far = Vec::Constant(2, 1e4);
    const Vec r = responsibilities(g, far);
    CHECK(r.allFinite());
    CHECK(r.sum() == doctest::Approx(1.0));
    CHECK(r[1] == doctest::Approx(1.0));
    CHECK(score(g, far).allFinite());
    CHECK(std::isfinite(log_density(g, far)));
}

TEST_CASE("isotropic and dense covariance paths agree") {
    GmmSpec a = make_two_gaussian(3.0, 0.7, 3);
    GmmSpec b = a;
    for (auto& c : b.components) c.cov = Covariance::full(0.7 * Mat::Identity(3, 3));
    const SmoothedGmm ga = smooth(a, 0.4), gb = smooth(b, 0.4);
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        const Vec x = random_vec(rng, 3, 2.0);
        CHECK(log_density(ga, x) == doctest::Approx(log_density(gb, x)).epsilon(1e-12));
        CHECK((score(ga, x) - score(gb, x)).norm() < 1e-12);
        CHECK((hessian(ga, x) - hessian(gb, x)).norm() < 1e-12);
    }
}

TEST_CASE("smoothed curvature is bounded below by -1 / sigma^2") {
    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        const int dim = 1 + trial % 5;
        const double sigma = std::exp(std::uniform_real_distribution<double>(-3.0, 2.0)(rng));
        const SmoothedGmm g = smooth(random_gmm(rng, dim), sigma);
        const Vec x = random_vec(rng, dim, 2.0);
        const auto spec = full_spectrum(sigma * sigma * hessian(g, x));
        CHECK(spec.back().value >= -1.0 - 1e-9);
    }
}

TEST_CASE("full_spectrum is descending and reconstructs the matrix") {
    Rng rng(5);
    const Mat a = test::random_spd(rng, 5) - 2.0 * Mat::Identity(5, 5);
    const auto sp = full_spectrum(a);
    Mat rec = Mat::Zero(5, 5);
    for (std::size_t i = 0; i < sp.size(); ++i) {
        if (i > 0) CHECK(sp[i - 1].value >= sp[i].value);
        CHECK(sp[i].vector.norm() == doctest::Approx(1.0));
        rec += sp[i].value * sp[i].vector * sp[i].vector.transpose();
    }
    CHECK((rec - a).norm() < 1e-10);
    CHECK(top_eigenpair(a).value == sp.front().value);
}

TEST_CASE("classifier gradient is the gradient of the log posterior") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const int dim = 2 + trial % 2;
        GmmSpec spec = random_gmm(rng, dim, 4);
        if (spec.size() < 2) {
            GmmComponent other = spec.components.front();
            other.label = 1;
            other.mean *= -1.0;
            spec.components.front().weight = other.weight = 0.5;
            spec.components.push_back(other);
        }
        const SmoothedGmm g = smooth(spec, 0.5);
        const Vec x = random_vec(rng, dim);
        const auto log_post = [&](const Vec& y) {
            const Vec t = g.component_log_terms(y);
            const double m = t.maxCoeff();
            double num = 0.0, den = 0.0;
            for (int i = 0; i < t.size(); ++i) {
                den += std::exp(t[i] - m);
                if (spec.components[i].label == 1) num += std::exp(t[i] - m);
            }
            return std::log(num) - std::log(den);
        };
        const Vec cg = classifier_grad(g, x, 1);
        const Vec fd = fd_gradient(log_post, x, 1e-6);
        CHECK((cg - fd).cwiseAbs().maxCoeff() < 1e-5 * (1.0 + cg.cwiseAbs().maxCoeff()));
    }
    const SmoothedGmm g = smooth(make_two_gaussian(4.0, 1.0, 2), 0.5);
    CHECK_THROWS(classifier_grad(g, Vec::Zero(2), 5));
}

TEST_CASE("region classification of the two-Gaussian task") {
    const SmoothedGmm g = smooth(make_two_gaussian(4.0, 1.0, 2), 0.1);
    // The midpoint is a critical point with positive curvature along the axis.
    CHECK(classify_region(g, Vec::Zero(2), default_grad_tol(2)) == RegionClass::saddle_region);
    // Near a mean the density is locally concave but the gradient is not zero.
    Vec near_mode(2);
    near_mode << 2.0, 0.0;
    CHECK(classify_region(g, near_mode, 1e-2) == RegionClass::mode);
    Vec off(2);
    off << 1.0, 0.3;
    CHECK(classify_region(g, off, default_grad_tol(2)) == RegionClass::other);
}

TEST_CASE("dimension mismatch is rejected") {
    const SmoothedGmm g = smooth(make_two_gaussian(4.0, 1.0, 2), 0.5);
    CHECK_THROWS(score(g, Vec::Zero(3)));
    CHECK_THROWS(SmoothedGmm(make_two_gaussian(4.0, 1.0, 2), -1.0));
}
