#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "sfg/common.hpp"

namespace sfg {

/// Per-trajectory carry of saddle-free guidance.
struct SfgState {
    Vec v;                     // unit power-iteration vector
    double alpha = 1.0;        // shift, non-decreasing along a trajectory
    double last_lambda = 0.0;  // lambda_+ from the most recent step
    double h = 0.1;            // finite-difference step
    double w = 0.0;            // guidance weight
    // Shift added for the next iteration: alpha*sigma*v, or alpha*v when false.
    bool sigma_scaled_shift = true;
};

SfgState sfg_init(int n, std::uint64_t seed, double alpha0, double h, double w);

/// Outcome of the curvature update for one point.
struct SfgUpdate {
    Vec u;               // (eps(x) - eps(x + h sigma v)) / h, before the shift
    Vec u_shifted;       // u + shift * v; the next v is its normalization
    double lambda = 0.0;
    bool gate = false;   // H(lambda), with H(0) = 0
    bool degenerate = false;
};

/// Curvature update given eps(x) and eps(x + h sigma v). Updates the state
/// in place (alpha, last_lambda, v) and returns u, lambda and the gate.
/// A zero shifted u keeps the previous v and reports `degenerate`.
SfgUpdate sfg_update(const Vec& eps, const Vec& eps_perturbed, double sigma, SfgState& state);

/// eps - gate * w * u, returned bit-identical to eps when the gate is closed or w = 0.
Vec sfg_guide(const Vec& eps, const SfgUpdate& update, double w);

struct SfgStepResult {
    Vec eps_hat;
    SfgState state;
    SfgUpdate update;
};

using EpsFn = std::function<Vec(const Vec&)>;

/// One step of warm-started shifted power iteration with guidance;
/// exactly two calls of eps_fn.
SfgStepResult sfg_step(const EpsFn& eps_fn, const Vec& x, double sigma, const SfgState& state);

struct SfgScoreResult {
    Vec score;
    SfgState state;
    SfgUpdate update;
};

using ScoreFn = std::function<Vec(const Vec&)>;

/// Score-space form: wraps score_fn as eps = -sigma * s and converts back.
SfgScoreResult sfg_on_score(const ScoreFn& score_fn, const Vec& x, double sigma, const SfgState& state);

// Reference-model guidance. Each returns the conditional/main estimate
// unchanged (bitwise) at its identity weight.
template <class Derived>
typename Derived::PlainObject cfg(const Eigen::MatrixBase<Derived>& eps_cond,
                                  const Eigen::MatrixBase<Derived>& eps_uncond, double w) {
    if (eps_cond.rows() != eps_uncond.rows() || eps_cond.cols() != eps_uncond.cols())
        throw std::invalid_argument("cfg operands differ in shape");
    if (w == 1.0) return eps_cond;
    return eps_cond + (w - 1.0) * (eps_cond - eps_uncond);
}

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};

inline bool in_interval(double t, const Interval& iv) { return t >= iv.lo && t <= iv.hi; }

template <class Derived>
typename Derived::PlainObject interval_cfg(const Eigen::MatrixBase<Derived>& eps_cond,
                                           const Eigen::MatrixBase<Derived>& eps_uncond, double w, double t,
                                           const Interval& iv) {
    if (!(iv.lo < iv.hi)) throw std::invalid_argument("guidance interval must satisfy lo < hi");
    return cfg(eps_cond, eps_uncond, in_interval(t, iv) ? w : 1.0);
}

template <class Derived>
typename Derived::PlainObject autoguidance(const Eigen::MatrixBase<Derived>& eps_main,
                                           const Eigen::MatrixBase<Derived>& eps_bad, double w) {
    return cfg(eps_main, eps_bad, w);
}

template <class Derived>
typename Derived::PlainObject classifier_guidance(const Eigen::MatrixBase<Derived>& score,
                                                  const Eigen::MatrixBase<Derived>& classifier_grad, double w) {
    if (score.rows() != classifier_grad.rows() || score.cols() != classifier_grad.cols())
        throw std::invalid_argument("classifier guidance operands differ in shape");
    if (w == 0.0) return score;
    return score + w * classifier_grad;
}

enum class GuidanceKind { none, classifier, cfg, interval_cfg, autoguidance, sfg };

std::string to_string(GuidanceKind k);
GuidanceKind guidance_kind_from_string(const std::string& s);

struct SfgParams {
    double alpha0 = 1.0;
    double h = 0.1;
    bool sigma_scaled_shift = true;
    // Heun: run a second power-iteration update at the corrector point.
    bool corrector_update = false;
};

/// Selects one guidance strategy. For kind == sfg `weight` is w_SFG; for the
/// reference-model kinds, `sfg_stack_weight > 0` feeds their output into SFG.
struct GuidanceSpec {
    GuidanceKind kind = GuidanceKind::none;
    double weight = 1.0;
    std::optional<Interval> interval;
    std::optional<int> classifier_class;
    double sfg_stack_weight = 0.0;
    SfgParams sfg;

    double sfg_weight() const { return kind == GuidanceKind::sfg ? weight : sfg_stack_weight; }
    bool uses_sfg() const { return sfg_weight() != 0.0; }
    bool needs_companion() const;
    /// Identity weight for the reference term (no-op guidance).
    bool base_is_identity() const;
    void validate() const;
};

} // namespace sfg
