#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sfg/sampler.hpp"

using namespace sfg;

namespace {

GmmSpec single_gaussian(int n, double variance) {
    GmmSpec g;
    g.components.push_back({1.0, Vec::Zero(n), Covariance::isotropic(variance), 0});
    return g;
}

GuidanceSpec sfg_spec(double w) {
    GuidanceSpec s;
    s.kind = GuidanceKind::sfg;
    s.weight = w;
    return s;
}

} // namespace

TEST_CASE("sigma schedule") {
    const Schedule s = sigma_schedule(10, 0.002, 80.0, 7.0);
    REQUIRE(s.steps.size() == 11u);
    CHECK(s.steps.front() == 80.0);
    CHECK(s.steps[9] == 0.002);
    CHECK(s.steps.back() == 0.0);
    CHECK(s.n_steps() == 10);
    CHECK_NOTHROW(s.validate());
    CHECK_THROWS(sigma_schedule(1, 0.1, 1.0));
    CHECK_THROWS(sigma_schedule(5, 1.0, 0.1));
    Schedule bad = s;
    std::swap(bad.steps[2], bad.steps[3]);
    CHECK_THROWS(bad.validate());
}

TEST_CASE("flow schedule") {
    const Schedule s = flow_schedule(4, 0.2);
    REQUIRE(s.steps.size() == 5u);
    CHECK(s.steps.front() == 0.2);
    CHECK(s.steps[2] == doctest::Approx(0.6));
    CHECK(s.steps.back() == 1.0);
    CHECK_THROWS(flow_schedule(4, 1.0));
    CHECK(sigma_to_flow_time(1.0) == 0.5);
}

TEST_CASE("Heun converges at second order on a Gaussian") {
    const double v = 0.5, smax = 5.0, smin = 0.05;
    const OracleModel oracle(single_gaussian(2, v));
    const GuidedModel gm(Models{&oracle, nullptr, {}}, GuidanceSpec{});
    std::vector<double> errors;
    for (int n : {8, 16, 32, 64}) {
        SampleOptions o;
        o.keep_every = 1;
        const SampleSet s = heun_sample(gm.provider(), sigma_schedule(n, smin, smax, 1.0), 4, 3, o);
        double err = 0.0;
        for (const auto& t : s.trajectories) {
            const Vec x0 = t.states.front();
            const Vec exact = x0 * std::sqrt((v + smin * smin) / (v + smax * smax));
            err = std::max(err, (t.states[n - 1] - exact).norm());
        }
        errors.push_back(err);
    }
    for (std::size_t i = 1; i < errors.size(); ++i) {
        const double order = std::log2(errors[i - 1] / errors[i]);
        MESSAGE("Heun observed order " << order);
        CHECK(order > 1.8);
        CHECK(order < 2.3);
    }
}

TEST_CASE("Euler flow follows straight lines exactly") {
    Provider p;
    p.dim = 3;
    Vec c(3);
    c << 1.0, -2.0, 0.5;
    p.eval = [c](const Mat& x, double, BatchState& st, Slope) -> Mat {
        ++st.eps_fn_calls;
        return c.replicate(1, x.cols());
    };
    SampleOptions o;
    o.keep_every = 1;
    const SampleSet s = euler_flow_sample(p, flow_schedule(7, 0.3), 5, 1, o);
    for (const auto& t : s.trajectories) CHECK((t.final - (t.states.front() + 0.7 * c)).norm() < 1e-12);
    CHECK_THROWS(euler_flow_sample(p, sigma_schedule(5, 0.1, 1.0), 2, 1));
    CHECK_THROWS(heun_sample(p, flow_schedule(5), 2, 1));
}

TEST_CASE("identity guidance is bitwise identical to no guidance") {
    const OracleModel oracle(make_two_gaussian(4.0, 1.0, 2));
    const Schedule sch = sigma_schedule(20, 0.01, 10.0);
    SampleOptions o;
    o.labels.assign(30, 0);
    for (int j = 0; j < 30; j += 2) o.labels[j] = 1;
    const auto base = heun_sample(GuidedModel(Models{&oracle, nullptr, {}}, GuidanceSpec{}).provider(), sch, 30, 5, o);
    GuidanceSpec c;
    c.kind = GuidanceKind::cfg;
    c.weight = 1.0;
    const auto cfg1 = heun_sample(GuidedModel(Models{&oracle, &oracle, {}}, c).provider(), sch, 30, 5, o);
    const auto sfg0 = heun_sample(GuidedModel(Models{&oracle, nullptr, {}}, sfg_spec(0.0)).provider(), sch, 30, 5, o);
    for (int j = 0; j < 30; ++j) {
        CHECK(cfg1.trajectories[j].final == base.trajectories[j].final);
        CHECK(sfg0.trajectories[j].final == base.trajectories[j].final);
    }
}

TEST_CASE("output does not depend on the thread count") {
    const OracleModel oracle(make_simplex_gmm(4, 6, 0.3));
    const GuidedModel gm(Models{&oracle, nullptr, {}}, sfg_spec(2.0));
    const Schedule sch = sigma_schedule(12, 0.01, 10.0);
    SampleOptions o1, o4;
    o1.chunk = o4.chunk = 5;
    o4.threads = 4;
    const auto a = heun_sample(gm.provider(), sch, 37, 9, o1);
    const auto b = heun_sample(gm.provider(), sch, 37, 9, o4);
    CHECK(a.eps_fn_calls == b.eps_fn_calls);
    for (int j = 0; j < 37; ++j) {
        CHECK(a.trajectories[j].final == b.trajectories[j].final);
        REQUIRE(a.trajectories[j].sfg_trace.size() == 12u);
        CHECK(a.trajectories[j].sfg_trace.back().lambda == b.trajectories[j].sfg_trace.back().lambda);
    }
}

TEST_CASE("SFG costs two eps evaluations per slope") {
    const OracleModel oracle(make_two_gaussian(4.0, 1.0, 2));
    const Schedule sch = sigma_schedule(10, 0.01, 10.0);
    SampleOptions o;
    o.chunk = 64;
    const auto plain = heun_sample(GuidedModel(Models{&oracle, nullptr, {}}, GuidanceSpec{}).provider(), sch, 64, 1, o);
    const auto guided = heun_sample(GuidedModel(Models{&oracle, nullptr, {}}, sfg_spec(1.0)).provider(), sch, 64, 1, o);
    // 10 predictor slopes and 9 corrector slopes (the final step into 0 is Euler)
    CHECK(plain.eps_fn_calls == 19);
    CHECK(guided.eps_fn_calls == 2 * 19);
    GuidanceSpec c;
    c.kind = GuidanceKind::cfg;
    c.weight = 2.0;
    const auto cfg = heun_sample(GuidedModel(Models{&oracle, &oracle, {}}, c).provider(), sch, 64, 1, o);
    CHECK(cfg.model_evals == guided.model_evals);
}

TEST_CASE("non-finite trajectories are dropped and counted") {
    Provider p;
    p.dim = 2;
    p.eval = [](const Mat& x, double, BatchState&, Slope) -> Mat {
        Mat d = Mat::Zero(x.rows(), x.cols());
        d(0, 1) = std::numeric_limits<double>::quiet_NaN();
        return d;
    };
    const auto s = heun_sample(p, sigma_schedule(4, 0.1, 1.0), 3, 1);
    CHECK(s.n_failed == 1);
    CHECK(s.trajectories[1].failed);
    CHECK(s.finals().size() == 2);
}

TEST_CASE("argument checks") {
    const OracleModel oracle(make_two_gaussian(4.0, 1.0, 2));
    GuidanceSpec c;
    c.kind = GuidanceKind::autoguidance;
    c.weight = 2.0;
    CHECK_THROWS_AS(GuidedModel(Models{&oracle, nullptr, {}}, c), ConfigError);
    GuidanceSpec k;
    k.kind = GuidanceKind::classifier;
    k.classifier_class = 0;
    CHECK_THROWS_AS(GuidedModel(Models{&oracle, nullptr, {}}, k), ConfigError);
    const GuidedModel gm(Models{&oracle, nullptr, {}}, GuidanceSpec{});
    SampleOptions o;
    o.labels = {0, 1};
    CHECK_THROWS(heun_sample(gm.provider(), sigma_schedule(4, 0.1, 1.0), 3, 1, o));
}

TEST_CASE("classifier guidance pulls samples to the requested class") {
    const GmmSpec g = make_two_gaussian(4.0, 1.0, 2);
    const OracleModel oracle(g);
    GuidanceSpec k;
    k.kind = GuidanceKind::classifier;
    k.weight = 4.0;
    k.classifier_class = 1;
    Models ms{&oracle, nullptr, [g](const Vec& x, double s, int c) { return classifier_grad(smooth(g, s), x, c); }};
    const auto s = heun_sample(GuidedModel(ms, k).provider(), sigma_schedule(30, 0.01, 10.0), 200, 4);
    int right = 0;
    for (const auto& t : s.trajectories) right += t.final[0] > 0.0 ? 1 : 0;
    CHECK(right > 190);
}

TEST_CASE("flow model sampling") {
    Architecture a;
    a.data_dim = 2;
    a.hidden = {16};
    a.objective = Objective::flow_matching;
    const ScoreModel m(a, 1);
    const auto plain = euler_flow_sample(flow_provider(m, nullptr, GuidanceSpec{}), flow_schedule(10), 20, 2);
    const auto zero = euler_flow_sample(flow_provider(m, nullptr, sfg_spec(0.0)), flow_schedule(10), 20, 2);
    const auto guided = euler_flow_sample(flow_provider(m, nullptr, sfg_spec(1.0)), flow_schedule(10), 20, 2);
    for (int j = 0; j < 20; ++j) CHECK(plain.trajectories[j].final == zero.trajectories[j].final);
    CHECK(plain.eps_fn_calls == 10);
    // tau = 0 evaluates the raw velocity once; every later step costs two calls
    CHECK(guided.eps_fn_calls == 1 + 2 * 9);
}
