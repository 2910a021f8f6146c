#include "sfg/sampler.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace sfg {

void Schedule::validate() const {
    if (steps.size() < 2) throw std::invalid_argument("schedule needs at least one step");
    for (double s : steps)
        if (!std::isfinite(s)) throw std::invalid_argument("schedule values must be finite");
    for (std::size_t i = 1; i < steps.size(); ++i) {
        const bool ok = kind == ScheduleKind::sigma ? steps[i] < steps[i - 1] : steps[i] > steps[i - 1];
        if (!ok) throw std::invalid_argument("schedule is not strictly monotone");
    }
    if (kind == ScheduleKind::sigma && steps.back() != 0.0) throw std::invalid_argument("sigma schedule must end at 0");
    if (kind == ScheduleKind::flow_time) {
        if (steps.front() < 0.0 || steps.back() != 1.0)
            throw std::invalid_argument("flow schedule must start in [0,1) and end at 1");
    }
}

Schedule sigma_schedule(int n_steps, double sigma_min, double sigma_max, double rho) {
    if (n_steps < 2) throw std::invalid_argument("sigma schedule needs n_steps >= 2");
    if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw std::invalid_argument("sigma schedule needs 0 < sigma_min < sigma_max");
    if (!(rho > 0.0)) throw std::invalid_argument("sigma schedule needs rho > 0");
    Schedule s;
    s.kind = ScheduleKind::sigma;
    const double hi = std::pow(sigma_max, 1.0 / rho), lo = std::pow(sigma_min, 1.0 / rho);
    for (int i = 0; i < n_steps; ++i) {
        const double frac = static_cast<double>(i) / (n_steps - 1);
        s.steps.push_back(std::pow(hi + frac * (lo - hi), rho));
    }
    s.steps.front() = sigma_max;
    s.steps[n_steps - 1] = sigma_min;
    s.steps.push_back(0.0);
    return s;
}

Schedule flow_schedule(int n_steps, double tau_start) {
    if (n_steps < 1) throw std::invalid_argument("flow schedule needs n_steps >= 1");
    if (!(tau_start >= 0.0 && tau_start < 1.0)) throw std::invalid_argument("flow schedule start must lie in [0,1)");
    Schedule s;
    s.kind = ScheduleKind::flow_time;
    for (int i = 0; i < n_steps; ++i) s.steps.push_back(tau_start + (1.0 - tau_start) * i / n_steps);
    s.steps.push_back(1.0);
    return s;
}

double sigma_to_flow_time(double sigma) { return sigma / (1.0 + sigma); }

namespace {

std::span<const int> labels_for(const NoisePredictor& m, const std::vector<int>& labels) {
    if (!m.conditional()) return {};
    return labels;
}

} // namespace

GuidedModel::GuidedModel(Models models, GuidanceSpec spec, std::function<double(double)> interval_time)
    : models_(std::move(models)), spec_(std::move(spec)), interval_time_(std::move(interval_time)) {
    spec_.validate();
    if (!models_.main) throw std::invalid_argument("guided model needs a main model");
    if (spec_.needs_companion() && !models_.companion)
        throw ConfigError(to_string(spec_.kind) + " guidance needs a companion model");
    if (spec_.kind == GuidanceKind::classifier && !models_.classifier_grad)
        throw ConfigError("classifier guidance needs a classifier");
    if (models_.companion && models_.companion->dim() != models_.main->dim())
        throw ConfigError("companion model dimension differs from the main model");
}

GuidedModel attach_guidance(Models models, const GuidanceSpec& spec) { return GuidedModel(std::move(models), spec); }

Mat GuidedModel::base_eps(const Mat& x, double sigma, BatchState& state) const {
    ++state.eps_fn_calls;
    ++state.model_evals;
    const Mat main = models_.main->predict_eps(x, sigma, labels_for(*models_.main, state.labels));
    if (spec_.base_is_identity()) return main;

    switch (spec_.kind) {
    case GuidanceKind::classifier: {
        Mat out(main.rows(), main.cols());
        for (Eigen::Index b = 0; b < x.cols(); ++b) {
            int cls = spec_.classifier_class.value_or(kNullClass);
            if (!state.labels.empty() && state.labels[b] != kNullClass) cls = state.labels[b];
            const Vec grad = models_.classifier_grad(x.col(b), sigma, cls);
            const Vec s = eps_to_score(Vec(main.col(b)), sigma);
            out.col(b) = score_to_eps(classifier_guidance(s, grad, spec_.weight), sigma);
        }
        return out;
    }
    case GuidanceKind::interval_cfg:
        if (!in_interval(interval_time_(sigma), *spec_.interval)) return main;
        [[fallthrough]];
    case GuidanceKind::cfg: {
        ++state.model_evals;
        Mat uncond;
        if (models_.companion->conditional()) {
            const std::vector<int> null_labels(x.cols(), kNullClass);
            uncond = models_.companion->predict_eps(x, sigma, null_labels);
        } else {
            uncond = models_.companion->predict_eps(x, sigma, {});
        }
        return cfg(main, uncond, spec_.weight);
    }
    case GuidanceKind::autoguidance: {
        ++state.model_evals;
        const Mat bad = models_.companion->predict_eps(x, sigma, labels_for(*models_.companion, state.labels));
        return autoguidance(main, bad, spec_.weight);
    }
    case GuidanceKind::none:
    case GuidanceKind::sfg: break;
    }
    return main;
}

Mat GuidedModel::eval(const Mat& x, double sigma, BatchState& state, Slope slope) const {
    Mat base = base_eps(x, sigma, state);
    if (!spec_.uses_sfg()) return base;

    const double w = spec_.sfg_weight();
    const double h = spec_.sfg.h;
    const Eigen::Index batch = x.cols();
    if (static_cast<Eigen::Index>(state.sfg.size()) != batch)
        throw std::logic_error("SFG batch state does not match the batch");
    Mat v(x.rows(), batch);
    for (Eigen::Index b = 0; b < batch; ++b) v.col(b) = state.sfg[b].v;
    const Mat perturbed = base_eps(x + (h * sigma) * v, sigma, state);

    Mat out = base;
    if (slope == Slope::predictor || spec_.sfg.corrector_update) {
        state.last_u.resize(x.rows(), batch);
        if (slope == Slope::predictor) state.trace.assign(batch, {});
        if (state.record_vectors) {
            state.v_in.assign(batch, Vec());
            state.u_shifted.assign(batch, Vec());
        }
        for (Eigen::Index b = 0; b < batch; ++b) {
            if (state.record_vectors) state.v_in[b] = state.sfg[b].v;
            const SfgUpdate up = sfg_update(base.col(b), perturbed.col(b), sigma, state.sfg[b]);
            state.last_u.col(b) = up.u;
            if (up.gate && w != 0.0) out.col(b) = sfg_guide(base.col(b), up, w);
            if (slope == Slope::predictor) state.trace[b] = {up.lambda, up.gate, state.sfg[b].alpha};
            if (state.record_vectors) state.u_shifted[b] = up.u_shifted;
        }
        return out;
    }
    // Corrector: gate from the local curvature along the carried v, guidance
    // direction reused from the predictor.
    for (Eigen::Index b = 0; b < batch; ++b) {
        const Vec u = (base.col(b) - perturbed.col(b)) / h;
        const bool gate = u.dot(state.sfg[b].v) > 0.0;
        if (gate && w != 0.0) out.col(b) = base.col(b) - w * state.last_u.col(b);
    }
    return out;
}

Provider GuidedModel::provider() const {
    Provider p;
    p.dim = dim();
    auto self = std::make_shared<GuidedModel>(*this);
    p.eval = [self](const Mat& x, double sigma, BatchState& st, Slope slope) { return self->eval(x, sigma, st, slope); };
    if (spec_.uses_sfg())
        p.sfg = SfgInit{spec_.sfg.alpha0, spec_.sfg.h, spec_.sfg_weight(), spec_.sfg.sigma_scaled_shift};
    return p;
}

Mat FlowEpsAdapter::predict_eps(const Mat& x, double t, std::span<const int> labels) const {
    return flow_to_eps(model_->predict_flow(x, t, labels), x, t);
}

Provider flow_provider(const ScoreModel& main, const ScoreModel* companion, const GuidanceSpec& spec) {
    auto main_eps = std::make_shared<FlowEpsAdapter>(main);
    std::shared_ptr<FlowEpsAdapter> comp_eps;
    if (companion) comp_eps = std::make_shared<FlowEpsAdapter>(*companion);
    auto guided = std::make_shared<GuidedModel>(Models{main_eps.get(), comp_eps.get(), {}}, spec,
                                                [](double t) { return t; });
    Provider p;
    p.dim = main.dim();
    const ScoreModel* m = &main;
    p.eval = [m, main_eps, comp_eps, guided](const Mat& x, double tau, BatchState& st, Slope slope) -> Mat {
        const double t = 1.0 - tau;
        // At tau = 0 every noise estimate equals x and carries no guidance signal.
        if (guided->identity() || t >= 1.0) {
            ++st.eps_fn_calls;
            ++st.model_evals;
            return -m->predict_flow(x, t, labels_for(*m, st.labels));
        }
        const Mat eps = guided->eval(x, t, st, slope);
        return -eps_to_flow(eps, x, t);
    };
    if (spec.uses_sfg()) p.sfg = SfgInit{spec.sfg.alpha0, spec.sfg.h, spec.sfg_weight(), spec.sfg.sigma_scaled_shift};
    return p;
}

LabeledPointSet SampleSet::finals() const {
    LabeledPointSet out;
    int rows = 0;
    for (const auto& t : trajectories) rows += t.failed ? 0 : 1;
    const int dim = trajectories.empty() ? 0 : static_cast<int>(trajectories.front().final.size());
    out.points.resize(rows, dim);
    int r = 0;
    for (const auto& t : trajectories) {
        if (t.failed) continue;
        out.points.row(r++) = t.final.transpose();
        out.labels.push_back(t.label);
    }
    return out;
}

namespace {

enum class Integrator { heun, euler_flow };

struct ChunkCounters {
    std::int64_t eps_fn_calls = 0;
    std::int64_t model_evals = 0;
};

void run_chunk(const Provider& provider, const Schedule& schedule, Integrator integrator, std::uint64_t seed,
               const SampleOptions& opts, int first, int count, std::vector<Trajectory>& out, ChunkCounters& counters) {
    const int dim = provider.dim;
    const double init_scale = integrator == Integrator::heun ? schedule.steps.front() : 1.0;
    Mat x(dim, count);
    BatchState st;
    st.record_vectors = opts.record_vectors;
    if (!opts.labels.empty()) st.labels.assign(opts.labels.begin() + first, opts.labels.begin() + first + count);
    for (int j = 0; j < count; ++j) {
        const std::uint64_t traj_seed = derive_seed(seed, static_cast<std::uint64_t>(first + j));
        Rng rng(traj_seed);
        x.col(j) = init_scale * standard_normal(rng, dim);
        if (provider.sfg) {
            SfgState s = sfg_init(dim, derive_seed(traj_seed, 0x5f6), provider.sfg->alpha0, provider.sfg->h,
                                  std::abs(provider.sfg->w));
            s.w = provider.sfg->w;
            s.sigma_scaled_shift = provider.sfg->sigma_scaled_shift;
            st.sfg.push_back(std::move(s));
        }
        Trajectory& t = out[first + j];
        t.label = st.labels.empty() ? kNullClass : st.labels[j];
        if (opts.keep_every > 0) t.states.push_back(x.col(j));
    }

    std::vector<bool> failed(count, false);
    const auto& lv = schedule.steps;
    for (int i = 0; i + 1 < static_cast<int>(lv.size()); ++i) {
        const double cur = lv[i], next = lv[i + 1], delta = next - cur;
        st.trace.clear();
        const Mat d = provider.eval(x, cur, st, Slope::predictor);
        if (!st.trace.empty())
            for (int j = 0; j < count; ++j) out[first + j].sfg_trace.push_back(st.trace[j]);
        if (opts.record_vectors && !st.v_in.empty()) {
            for (int j = 0; j < count; ++j) {
                out[first + j].v_in.push_back(st.v_in[j]);
                out[first + j].u_shifted.push_back(st.u_shifted[j]);
            }
        }
        Mat next_x = x + delta * d;
        if (integrator == Integrator::heun && next > 0.0) {
            const Mat d2 = provider.eval(next_x, next, st, Slope::corrector);
            next_x = x + (0.5 * delta) * (d + d2);
        }
        x = std::move(next_x);
        for (int j = 0; j < count; ++j) {
            if (failed[j] || x.col(j).allFinite()) continue;
            failed[j] = true;
            x.col(j).setZero();
            if (!st.sfg.empty()) st.sfg[j].v = Vec::Unit(dim, 0);
        }
        if (opts.keep_every > 0 && (i + 1) % opts.keep_every == 0)
            for (int j = 0; j < count; ++j) out[first + j].states.push_back(x.col(j));
    }
    for (int j = 0; j < count; ++j) {
        out[first + j].final = x.col(j);
        out[first + j].failed = failed[j];
    }
    counters.eps_fn_calls = st.eps_fn_calls;
    counters.model_evals = st.model_evals;
}

SampleSet run(const Provider& provider, const Schedule& schedule, Integrator integrator, int n_samples,
              std::uint64_t seed, const SampleOptions& opts) {
    schedule.validate();
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    if (!opts.labels.empty() && static_cast<int>(opts.labels.size()) != n_samples)
        throw std::invalid_argument("per-trajectory labels must match n_samples");
    if (opts.chunk < 1) throw std::invalid_argument("chunk must be >= 1");
    SampleSet result;
    result.trajectories.resize(n_samples);
    result.n_steps = schedule.n_steps();
    const int n_chunks = (n_samples + opts.chunk - 1) / opts.chunk;
    std::vector<ChunkCounters> counters(n_chunks);
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (int c = next++; c < n_chunks; c = next++) {
            try {
                const int first = c * opts.chunk;
                run_chunk(provider, schedule, integrator, seed, opts, first, std::min(opts.chunk, n_samples - first),
                          result.trajectories, counters[c]);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    const int threads = std::max(1, std::min(opts.threads, n_chunks));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    for (const auto& c : counters) {
        result.eps_fn_calls += c.eps_fn_calls;
        result.model_evals += c.model_evals;
    }
    for (const auto& t : result.trajectories) result.n_failed += t.failed ? 1 : 0;
    return result;
}

} // namespace

SampleSet heun_sample(const Provider& provider, const Schedule& schedule, int n_samples, std::uint64_t seed,
                      const SampleOptions& opts) {
    if (schedule.kind != ScheduleKind::sigma) throw std::invalid_argument("heun_sample needs a sigma schedule");
    return run(provider, schedule, Integrator::heun, n_samples, seed, opts);
}

SampleSet euler_flow_sample(const Provider& provider, const Schedule& schedule, int n_samples, std::uint64_t seed,
                            const SampleOptions& opts) {
    if (schedule.kind != ScheduleKind::flow_time)
        throw std::invalid_argument("euler_flow_sample needs a flow-time schedule");
    return run(provider, schedule, Integrator::euler_flow, n_samples, seed, opts);
}

} // namespace sfg
