#include "sfg/guidance.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace sfg {

SfgState sfg_init(int n, std::uint64_t seed, double alpha0, double h, double w) {
    if (n < 1) throw std::invalid_argument("sfg_init requires n >= 1");
    if (!(alpha0 >= 0.0)) throw std::invalid_argument("sfg alpha0 must be >= 0");
    if (!(h > 0.0)) throw std::invalid_argument("sfg finite-difference step h must be positive");
    if (!(w >= 0.0)) throw std::invalid_argument("sfg weight must be >= 0");
    Rng rng(seed);
    SfgState s;
    do {
        s.v = standard_normal(rng, n);
    } while (s.v.norm() == 0.0);
    s.v.normalize();
    s.alpha = alpha0;
    s.h = h;
    s.w = w;
    return s;
}

SfgUpdate sfg_update(const Vec& eps, const Vec& eps_perturbed, double sigma, SfgState& state) {
    SfgUpdate up;
    up.u = (eps - eps_perturbed) / state.h;
    up.lambda = up.u.dot(state.v);
    state.alpha = std::max(state.alpha, -up.lambda);
    state.last_lambda = up.lambda;
    up.gate = up.lambda > 0.0;

    const double shift = state.sigma_scaled_shift ? state.alpha * sigma : state.alpha;
    up.u_shifted = up.u + shift * state.v;
    const Vec& shifted = up.u_shifted;
    const double norm = shifted.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        std::cerr << "sfg: degenerate power-iteration vector (|u| = " << norm << "), keeping previous v\n";
        up.degenerate = true;
        up.gate = false;
        return up;
    }
    state.v = shifted / norm;
    return up;
}

Vec sfg_guide(const Vec& eps, const SfgUpdate& update, double w) {
    if (!update.gate || w == 0.0) return eps;
    return eps - w * update.u;
}

SfgStepResult sfg_step(const EpsFn& eps_fn, const Vec& x, double sigma, const SfgState& state) {
    if (!(sigma > 0.0)) throw std::invalid_argument("sfg_step requires sigma > 0");
    if (!(state.h > 0.0)) throw std::invalid_argument("sfg_step requires h > 0");
    SfgStepResult r;
    r.state = state;
    const Vec eps = eps_fn(x);
    const Vec eps_perturbed = eps_fn(x + state.h * sigma * state.v);
    r.update = sfg_update(eps, eps_perturbed, sigma, r.state);
    r.eps_hat = sfg_guide(eps, r.update, state.w);
    return r;
}

SfgScoreResult sfg_on_score(const ScoreFn& score_fn, const Vec& x, double sigma, const SfgState& state) {
    if (!(sigma > 0.0)) throw std::invalid_argument("sfg_on_score requires sigma > 0");
    const EpsFn eps_fn = [&](const Vec& p) -> Vec { return -sigma * score_fn(p); };
    SfgStepResult step = sfg_step(eps_fn, x, sigma, state);
    SfgScoreResult r;
    r.state = std::move(step.state);
    r.update = std::move(step.update);
    r.score = -step.eps_hat / sigma;
    return r;
}

std::string to_string(GuidanceKind k) {
    switch (k) {
    case GuidanceKind::none: return "none";
    case GuidanceKind::classifier: return "classifier";
    case GuidanceKind::cfg: return "cfg";
    case GuidanceKind::interval_cfg: return "interval_cfg";
    case GuidanceKind::autoguidance: return "autoguidance";
    case GuidanceKind::sfg: return "sfg";
    }
    return "none";
}

GuidanceKind guidance_kind_from_string(const std::string& s) {
    if (s == "none") return GuidanceKind::none;
    if (s == "classifier") return GuidanceKind::classifier;
    if (s == "cfg") return GuidanceKind::cfg;
    if (s == "interval_cfg") return GuidanceKind::interval_cfg;
    if (s == "autoguidance") return GuidanceKind::autoguidance;
    if (s == "sfg") return GuidanceKind::sfg;
    throw ConfigError("unknown guidance kind '" + s + "'");
}

bool GuidanceSpec::needs_companion() const {
    return kind == GuidanceKind::cfg || kind == GuidanceKind::interval_cfg || kind == GuidanceKind::autoguidance;
}

bool GuidanceSpec::base_is_identity() const {
    switch (kind) {
    case GuidanceKind::none:
    case GuidanceKind::sfg: return true;
    case GuidanceKind::classifier: return weight == 0.0;
    case GuidanceKind::cfg:
    case GuidanceKind::interval_cfg:
    case GuidanceKind::autoguidance: return weight == 1.0;
    }
    return true;
}

void GuidanceSpec::validate() const {
    if (!std::isfinite(weight)) throw ConfigError("guidance weight must be finite");
    if ((kind == GuidanceKind::interval_cfg) != interval.has_value())
        throw ConfigError("guidance interval is required exactly when kind = interval_cfg");
    if (interval && !(interval->lo < interval->hi)) throw ConfigError("guidance interval must satisfy lo < hi");
    if ((kind == GuidanceKind::cfg || kind == GuidanceKind::interval_cfg || kind == GuidanceKind::autoguidance) &&
        weight < 1.0)
        throw ConfigError(to_string(kind) + " weight must be >= 1");
    if ((kind == GuidanceKind::sfg || kind == GuidanceKind::classifier) && weight < 0.0)
        throw ConfigError(to_string(kind) + " weight must be >= 0");
    if (kind == GuidanceKind::classifier && !classifier_class)
        throw ConfigError("classifier guidance needs a target class");
    if (sfg_stack_weight < 0.0) throw ConfigError("sfg stack weight must be >= 0");
    if (kind == GuidanceKind::sfg && sfg_stack_weight != 0.0)
        throw ConfigError("sfg stack weight applies only to reference-model guidance");
    if (!(sfg.h > 0.0)) throw ConfigError("sfg.h must be positive");
    if (!(sfg.alpha0 >= 0.0)) throw ConfigError("sfg.alpha must be >= 0");
}

} // namespace sfg
