#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "sfg/datasets.hpp"
#include "sfg/guidance.hpp"
#include "sfg/model.hpp"

namespace sfg {

enum class ScheduleKind { sigma, flow_time };

/// Integration grid. sigma kind: strictly decreasing noise levels ending in
/// a terminal 0. flow_time kind: strictly increasing sampling times
/// tau in [0,1) (tau = 0 pure noise) ending in a terminal 1.
struct Schedule {
    ScheduleKind kind = ScheduleKind::sigma;
    std::vector<double> steps;

    int n_steps() const { return static_cast<int>(steps.size()) - 1; }
    void validate() const;
};

Schedule sigma_schedule(int n_steps, double sigma_min, double sigma_max, double rho = 7.0);
Schedule flow_schedule(int n_steps, double tau_start = 0.0);

/// Default map from a noise level to the rectified-flow time used for
/// interval guidance: t = sigma / (1 + sigma).
double sigma_to_flow_time(double sigma);

struct SfgTraceEntry {
    double lambda = 0.0;
    bool gate = false;
    double alpha = 0.0;
};

enum class Slope { predictor, corrector };

/// Mutable per-batch state threaded through a sampling run. Column b belongs to one trajectory.
struct BatchState {
    std::vector<int> labels;     // empty: unconditional
    std::vector<SfgState> sfg;   // one per column when SFG is active
    Mat last_u;                  // predictor guidance direction per column
    std::vector<SfgTraceEntry> trace;  // filled by the predictor evaluation
    std::vector<Vec> v_in;       // v before the step, when record_vectors
    std::vector<Vec> u_shifted;  // u + shift after the step, when record_vectors
    bool record_vectors = false;
    std::int64_t eps_fn_calls = 0;  // evaluations of the (possibly reference-guided) noise estimate
    std::int64_t model_evals = 0;   // network forward passes over the batch
};

struct SfgInit {
    double alpha0 = 1.0;
    double h = 0.1;
    double w = 0.0;
    bool sigma_scaled_shift = true;
};

/// What an integrator consumes: level is sigma (Heun) or tau (Euler flow).
struct Provider {
    int dim = 0;
    std::function<Mat(const Mat& x, double level, BatchState& state, Slope slope)> eval;
    std::optional<SfgInit> sfg;
};

struct Models {
    const NoisePredictor* main = nullptr;
    // CFG: unconditional branch (may be `main` itself when conditional);
    // autoguidance: the degraded model.
    const NoisePredictor* companion = nullptr;
    // Classifier guidance gradient grad log p(y | x) at noise level sigma.
    std::function<Vec(const Vec& x, double sigma, int class_id)> classifier_grad;
};

/// A noise predictor with guidance attached; evaluates guided eps for a batch.
class GuidedModel {
public:
    GuidedModel(Models models, GuidanceSpec spec, std::function<double(double)> interval_time = sigma_to_flow_time);

    const GuidanceSpec& spec() const { return spec_; }
    int dim() const { return models_.main->dim(); }
    bool identity() const { return spec_.base_is_identity() && !spec_.uses_sfg(); }

    Mat eval(const Mat& x, double sigma, BatchState& state, Slope slope) const;
    Provider provider() const;

private:
    Mat base_eps(const Mat& x, double sigma, BatchState& state) const;

    Models models_;
    GuidanceSpec spec_;
    std::function<double(double)> interval_time_;
};

GuidedModel attach_guidance(Models models, const GuidanceSpec& spec);

/// Noise estimate of a flow model as a function of x_t at model time t:
/// eps = (1 - t) v + x. `predict_eps(x, t, labels)` takes t in place of sigma.
class FlowEpsAdapter final : public NoisePredictor {
public:
    explicit FlowEpsAdapter(const ScoreModel& model) : model_(&model) {}
    int dim() const override { return model_->dim(); }
    bool conditional() const override { return model_->conditional(); }
    Mat predict_eps(const Mat& x, double t, std::span<const int> labels) const override;

private:
    const ScoreModel* model_;
};

/// Flow provider (returns dx/dtau) for a flow model with optional guidance
/// applied in noise space at t = 1 - tau with sigma_SFG = t.
Provider flow_provider(const ScoreModel& main, const ScoreModel* companion, const GuidanceSpec& spec);

struct SampleOptions {
    int threads = 1;
    int chunk = 64;           // trajectories per batch; output is independent of thread count
    std::vector<int> labels;  // per-trajectory class ids; empty = unconditional
    int keep_every = 0;       // keep every k-th intermediate state (0: final only)
    bool record_vectors = false;
};

struct Trajectory {
    std::vector<Vec> states;
    Vec final;
    int label = kNullClass;
    std::vector<SfgTraceEntry> sfg_trace;
    std::vector<Vec> v_in;
    std::vector<Vec> u_shifted;
    bool failed = false;
};

struct SampleSet {
    std::vector<Trajectory> trajectories;
    int n_failed = 0;
    std::int64_t eps_fn_calls = 0;
    std::int64_t model_evals = 0;
    int n_steps = 0;

    /// Finals of non-failed trajectories, in trajectory order.
    LabeledPointSet finals() const;
};

/// Deterministic 2nd-order Heun on dx/dsigma = eps_hat(x, sigma); the step
/// into sigma = 0 is plain Euler. x_0 = sigma_max * z per trajectory.
SampleSet heun_sample(const Provider& provider, const Schedule& schedule, int n_samples, std::uint64_t seed,
                      const SampleOptions& opts = {});

/// Explicit Euler on dx/dtau = v(x, tau) from tau_0 to 1, x_0 = z.
SampleSet euler_flow_sample(const Provider& provider, const Schedule& schedule, int n_samples, std::uint64_t seed,
                            const SampleOptions& opts = {});

} // namespace sfg
