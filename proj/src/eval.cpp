#include "sfg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sfg {

namespace {

void check_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericError(what + " is not finite");
}

void check_probability(double v, const std::string& what) {
    check_finite(v, what);
    if (v < 0.0 || v > 1.0) throw NumericError(what + " is outside [0,1]");
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double quantile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double parse_double(const std::string& s) {
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("malformed number '" + s + "'");
    return v;
}

std::ifstream open_input(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot open " + path);
    return is;
}

std::ofstream open_output(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    return os;
}

} // namespace

void EvalReport::validate() const {
    for (const auto& r : esm) check_finite(r.loss, "ESM loss");
    if (outlier_rate) check_probability(*outlier_rate, "outlier_rate");
    if (coverage_entropy) {
        check_finite(*coverage_entropy, "coverage_entropy");
        if (*coverage_entropy < 0.0) throw NumericError("coverage_entropy is negative");
    }
    if (frechet) {
        check_finite(*frechet, "frechet");
        if (*frechet < 0.0) throw NumericError("frechet is negative");
    }
    for (const auto& p : sweep_points)
        for (const auto& [k, v] : p.metrics) check_finite(v, "sweep metric " + k);
    if (sfg_stats) check_probability(sfg_stats->gate_on_fraction, "gate_on_fraction");
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    if (!esm.empty()) {
        auto& arr = j["esm"] = nlohmann::json::array();
        for (const auto& r : esm)
            arr.push_back({{"region", to_string(r.region)}, {"sigma", r.sigma}, {"t", r.t}, {"loss", r.loss}});
    }
    if (outlier_rate) j["outlier_rate"] = *outlier_rate;
    if (coverage_entropy) j["coverage_entropy"] = *coverage_entropy;
    if (frechet) j["frechet"] = *frechet;
    if (!sweep_points.empty()) {
        auto& arr = j["sweep"] = nlohmann::json::array();
        for (const auto& p : sweep_points) arr.push_back({{"curve", p.curve}, {"weight", p.weight}, {"metrics", p.metrics}});
    }
    if (sfg_stats) {
        const auto& s = *sfg_stats;
        j["sfg_stats"] = {{"n", s.n},
                          {"gate_on_fraction", s.gate_on_fraction},
                          {"lambda", {{"min", s.lambda_min},
                                      {"q25", s.lambda_q25},
                                      {"median", s.lambda_median},
                                      {"q75", s.lambda_q75},
                                      {"max", s.lambda_max},
                                      {"mean", s.lambda_mean}}}};
    }
    j["n_failed"] = n_failed;
    return j;
}

RegionSpecs simplex_regions(const GmmSpec& simplex) {
    return {simplex, make_saddle_gmm(simplex), make_outlier_gmm(simplex)};
}

std::vector<double> log_grid(double lo, double hi, int n) {
    if (!(lo > 0.0 && lo < hi) || n < 2) throw std::invalid_argument("log_grid needs 0 < lo < hi and n >= 2");
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i)
        out[i] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1));
    out.front() = lo;
    out.back() = hi;
    return out;
}

std::vector<RegionLoss> esm_by_region(const NoisePredictor& model, const RegionSpecs& specs,
                                      const std::vector<double>& sigmas, int n_per_region, std::uint64_t seed) {
    const int dim = specs.mode.dim();
    if (specs.saddle.dim() != dim || specs.outlier.dim() != dim)
        throw std::invalid_argument("region specs differ in dimension");
    if (model.dim() != dim) throw std::invalid_argument("model dimension differs from the region specs");
    if (n_per_region < 1) throw std::invalid_argument("n_per_region must be >= 1");
    const std::pair<Region, const GmmSpec*> regions[] = {
        {Region::mode, &specs.mode}, {Region::saddle, &specs.saddle}, {Region::outlier, &specs.outlier}};
    std::vector<RegionLoss> out;
    for (std::size_t si = 0; si < sigmas.size(); ++si) {
        const double sigma = sigmas[si];
        const SmoothedGmm truth = smooth(specs.mode, sigma);
        for (std::size_t ri = 0; ri < 3; ++ri) {
            const auto [region, spec] = regions[ri];
            const std::uint64_t stream = derive_seed(seed, ri);
            LabeledPointSet pts = sample_gmm(*spec, n_per_region, stream);
            Rng rng(derive_seed(stream, si + 1));
            for (int i = 0; i < pts.size(); ++i) pts.points.row(i) += sigma * standard_normal(rng, dim).transpose();
            out.push_back({region, sigma, sigma_to_flow_time(sigma), esm_loss(model, truth, pts, sigma)});
        }
    }
    return out;
}

double outlier_rate(const LabeledPointSet& samples, const Fractal& manifold, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("outlier threshold must be positive");
    if (samples.size() == 0) return 0.0;
    if (samples.dim() != 2) throw std::invalid_argument("fractal outlier rate needs 2-D samples");
    int count = 0;
    for (int i = 0; i < samples.size(); ++i)
        if (manifold.distance(samples.points.row(i).transpose()) > threshold) ++count;
    return static_cast<double>(count) / samples.size();
}

double outlier_rate(const LabeledPointSet& samples, const GmmSpec& manifold, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("outlier threshold must be positive");
    if (samples.size() == 0) return 0.0;
    if (samples.dim() != manifold.dim()) throw std::invalid_argument("sample dimension differs from the mixture");
    const SmoothedGmm g(manifold, 0.0);
    int count = 0;
    for (int i = 0; i < samples.size(); ++i) {
        const Vec x = samples.points.row(i).transpose();
        bool outside = true;
        for (int c = 0; c < g.size() && outside; ++c) {
            const Vec d = x - manifold.components[c].mean;
            if (std::sqrt(d.dot(g.apply_precision(c, d))) <= threshold) outside = false;
        }
        count += outside ? 1 : 0;
    }
    return static_cast<double>(count) / samples.size();
}

namespace {

double entropy_of(const std::vector<int>& counts, int total) {
    if (total == 0) return 0.0;
    double h = 0.0;
    for (int c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return std::max(h, 0.0);
}

} // namespace

double coverage_entropy(const LabeledPointSet& samples, const Mat& modes) {
    if (modes.rows() < 1) throw std::invalid_argument("coverage_entropy needs at least one reference mode");
    if (samples.size() > 0 && samples.dim() != modes.cols())
        throw std::invalid_argument("sample dimension differs from the reference modes");
    std::vector<int> counts(modes.rows(), 0);
    for (int i = 0; i < samples.size(); ++i) {
        Eigen::Index best = 0;
        (modes.rowwise() - samples.points.row(i)).rowwise().squaredNorm().minCoeff(&best);
        ++counts[best];
    }
    return entropy_of(counts, samples.size());
}

double coverage_entropy(const LabeledPointSet& samples, const std::vector<Segment>& segments) {
    if (segments.empty()) throw std::invalid_argument("coverage_entropy needs at least one reference segment");
    if (samples.size() > 0 && samples.dim() != 2) throw std::invalid_argument("segment coverage needs 2-D samples");
    std::vector<int> counts(segments.size(), 0);
    for (int i = 0; i < samples.size(); ++i) {
        const Eigen::Vector2d p = samples.points.row(i).transpose();
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const double d = point_segment_distance(p, segments[s]);
            if (d < best_d) {
                best_d = d;
                best = s;
            }
        }
        ++counts[best];
    }
    return entropy_of(counts, samples.size());
}

double gaussian_frechet(const Vec& mean_a, const Mat& cov_a, const Vec& mean_b, const Mat& cov_b) {
    const Eigen::Index n = mean_a.size();
    if (mean_b.size() != n || cov_a.rows() != n || cov_a.cols() != n || cov_b.rows() != n || cov_b.cols() != n)
        throw std::invalid_argument("gaussian_frechet operands differ in dimension");
    const Mat eye = Mat::Identity(n, n);
    const Mat ca = 0.5 * (cov_a + cov_a.transpose()) + 1e-8 * eye;
    const Mat cb = 0.5 * (cov_b + cov_b.transpose()) + 1e-8 * eye;
    Eigen::SelfAdjointEigenSolver<Mat> ea(ca);
    Eigen::SelfAdjointEigenSolver<Mat> eb(cb);
    if (ea.info() != Eigen::Success || eb.info() != Eigen::Success) throw NumericError("covariance eigensolve failed");
    if (ea.eigenvalues().minCoeff() < 0.0 || eb.eigenvalues().minCoeff() < 0.0)
        throw NumericError("covariance is not positive semi-definite after regularization");
    const Mat sqrt_a = ea.eigenvectors() * ea.eigenvalues().cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
    const Mat m = sqrt_a * cb * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Mat> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    if (em.info() != Eigen::Success) throw NumericError("covariance product eigensolve failed");
    const double scale = std::max(1.0, em.eigenvalues().cwiseAbs().maxCoeff());
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double lam = em.eigenvalues()(i);
        if (lam < -1e-10 * scale) throw NumericError("covariance product is not positive semi-definite");
        tr_sqrt += std::sqrt(std::max(lam, 0.0));
    }
    const double d = (mean_a - mean_b).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

double gaussian_frechet(const Mat& a, const Mat& b) {
    if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("gaussian_frechet needs nonempty sets");
    if (a.cols() != b.cols()) throw std::invalid_argument("gaussian_frechet sets differ in dimension");
    if (a.rows() <= a.cols() || b.rows() <= b.cols())
        throw std::invalid_argument("gaussian_frechet needs more samples than dimensions");
    auto moments = [](const Mat& s) {
        const Vec mean = s.colwise().mean().transpose();
        const Mat centered = s.rowwise() - mean.transpose();
        const Mat cov = centered.transpose() * centered / static_cast<double>(s.rows() - 1);
        return std::pair{mean, cov};
    };
    const auto [ma, ca] = moments(a);
    const auto [mb, cb] = moments(b);
    return gaussian_frechet(ma, ca, mb, cb);
}

SfgStats sfg_stats(const SampleSet& samples) {
    SfgStats s;
    std::vector<double> lambdas;
    std::int64_t on = 0;
    for (const auto& t : samples.trajectories) {
        if (t.failed) continue;
        for (const auto& e : t.sfg_trace) {
            lambdas.push_back(e.lambda);
            on += e.gate ? 1 : 0;
        }
    }
    s.n = static_cast<std::int64_t>(lambdas.size());
    if (lambdas.empty()) return s;
    s.gate_on_fraction = static_cast<double>(on) / static_cast<double>(s.n);
    double sum = 0.0;
    for (double l : lambdas) sum += l;
    s.lambda_mean = sum / static_cast<double>(s.n);
    std::sort(lambdas.begin(), lambdas.end());
    s.lambda_min = lambdas.front();
    s.lambda_max = lambdas.back();
    s.lambda_q25 = quantile(lambdas, 0.25);
    s.lambda_median = quantile(lambdas, 0.5);
    s.lambda_q75 = quantile(lambdas, 0.75);
    return s;
}

double identity_weight(GuidanceKind kind) {
    switch (kind) {
    case GuidanceKind::cfg:
    case GuidanceKind::interval_cfg:
    case GuidanceKind::autoguidance: return 1.0;
    case GuidanceKind::none:
    case GuidanceKind::classifier:
    case GuidanceKind::sfg: return 0.0;
    }
    return 0.0;
}

namespace {

std::map<std::string, double> run_tagged(const SweepRun& run, const GuidanceSpec& spec, const std::string& id) {
    try {
        return run(spec);
    } catch (const ConfigError& e) {
        throw ConfigError("sweep run " + id + ": " + e.what());
    } catch (const MissingArtifact& e) {
        throw MissingArtifact("sweep run " + id + ": " + e.what());
    } catch (const std::exception& e) {
        throw NumericError("sweep run " + id + ": " + e.what());
    }
}

} // namespace

std::vector<SweepPoint> sweep(const GuidanceSpec& base, const std::vector<double>& weights,
                              const std::vector<SweepCurve>& curves, const SweepRun& run) {
    if (weights.size() < 2) throw ConfigError("sweep needs at least 2 weights");
    if (base.kind == GuidanceKind::none) throw ConfigError("sweep needs a guidance kind");
    const bool stacked = base.kind != GuidanceKind::sfg && base.sfg_stack_weight > 0.0;
    std::vector<SweepCurve> all = curves;
    if (all.empty()) all.push_back({to_string(base.kind), std::nullopt, std::nullopt});

    std::vector<SweepPoint> out;
    GuidanceSpec baseline = base;
    baseline.weight = identity_weight(base.kind);
    baseline.sfg_stack_weight = 0.0;
    out.push_back({"baseline", stacked ? 0.0 : baseline.weight, run_tagged(run, baseline, "baseline")});

    for (const auto& curve : all) {
        for (double w : weights) {
            GuidanceSpec spec = base;
            if (stacked)
                spec.sfg_stack_weight = w;
            else
                spec.weight = w;
            if (curve.alpha0) spec.sfg.alpha0 = *curve.alpha0;
            if (curve.h) spec.sfg.h = *curve.h;
            const std::string id = curve.name + "/w=" + fmt(w);
            try {
                spec.validate();
            } catch (const ConfigError& e) {
                throw ConfigError("sweep run " + id + ": " + e.what());
            }
            out.push_back({curve.name, w, run_tagged(run, spec, id)});
        }
    }
    return out;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepPoint>& points) {
    std::set<std::string> names;
    for (const auto& p : points)
        for (const auto& [k, v] : p.metrics) names.insert(k);
    os << "curve,weight";
    for (const auto& n : names) os << ',' << n;
    os << '\n';
    for (const auto& p : points) {
        if (p.curve.find(',') != std::string::npos) throw std::invalid_argument("curve names may not contain commas");
        os << p.curve << ',' << fmt(p.weight);
        for (const auto& n : names) {
            os << ',';
            if (auto it = p.metrics.find(n); it != p.metrics.end()) os << fmt(it->second);
        }
        os << '\n';
    }
}

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points) {
    auto os = open_output(path);
    write_sweep_csv(os, points);
}

std::vector<SweepPoint> read_sweep_csv(const std::string& path) {
    auto is = open_input(path);
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument(path + ": empty sweep table");
    const auto header = split(line, ',');
    if (header.size() < 2 || header[0] != "curve" || header[1] != "weight")
        throw std::invalid_argument(path + ": not a sweep table");
    std::vector<SweepPoint> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != header.size()) throw std::invalid_argument(path + ": ragged sweep row");
        SweepPoint p{cells[0], parse_double(cells[1]), {}};
        for (std::size_t i = 2; i < cells.size(); ++i)
            if (!cells[i].empty()) p.metrics[header[i]] = parse_double(cells[i]);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<FieldPoint> curvature_field(const SmoothedGmm& g, const FieldGrid& grid) {
    if (g.dim() != 2) throw std::invalid_argument("curvature_field needs a 2-D mixture");
    if (grid.nx < 1 || grid.ny < 1 || !(grid.x_min <= grid.x_max) || !(grid.y_min <= grid.y_max))
        throw std::invalid_argument("invalid field grid");
    const std::vector<int> classes = g.base().class_ids();
    std::vector<FieldPoint> out;
    out.reserve(static_cast<std::size_t>(grid.nx) * grid.ny);
    auto coord = [](double lo, double hi, int n, int i) { return n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1); };
    for (int iy = 0; iy < grid.ny; ++iy) {
        for (int ix = 0; ix < grid.nx; ++ix) {
            FieldPoint p;
            p.x = Vec(2);
            p.x << coord(grid.x_min, grid.x_max, grid.nx, ix), coord(grid.y_min, grid.y_max, grid.ny, iy);
            p.score = score(g, p.x);
            for (int c : classes) p.class_grads.push_back(classifier_grad(g, p.x, c));
            const EigPair top = top_eigenpair(hessian(g, p.x));
            p.lambda = top.value;
            p.eigvec = top.vector;
            p.gate = top.value > 0.0;
            out.push_back(std::move(p));
        }
    }
    return out;
}

void write_field_csv(std::ostream& os, const std::vector<FieldPoint>& field) {
    const std::size_t n_classes = field.empty() ? 0 : field.front().class_grads.size();
    os << "x0,x1,s0,s1";
    for (std::size_t c = 0; c < n_classes; ++c) os << ",g" << c << "_0,g" << c << "_1";
    os << ",lambda,e0,e1,gate\n";
    for (const auto& p : field) {
        if (p.class_grads.size() != n_classes) throw std::invalid_argument("field rows differ in class count");
        os << fmt(p.x(0)) << ',' << fmt(p.x(1)) << ',' << fmt(p.score(0)) << ',' << fmt(p.score(1));
        for (const auto& gr : p.class_grads) os << ',' << fmt(gr(0)) << ',' << fmt(gr(1));
        os << ',' << fmt(p.lambda) << ',' << fmt(p.eigvec(0)) << ',' << fmt(p.eigvec(1)) << ',' << (p.gate ? 1 : 0)
           << '\n';
    }
}

void write_field_csv(const std::string& path, const std::vector<FieldPoint>& field) {
    auto os = open_output(path);
    write_field_csv(os, field);
}

std::vector<FieldPoint> read_field_csv(const std::string& path) {
    auto is = open_input(path);
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument(path + ": empty field table");
    const auto header = split(line, ',');
    if (header.size() < 8 || header[0] != "x0" || (header.size() - 8) % 2 != 0)
        throw std::invalid_argument(path + ": not a field table");
    const std::size_t n_classes = (header.size() - 8) / 2;
    std::vector<FieldPoint> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c = split(line, ',');
        if (c.size() != header.size()) throw std::invalid_argument(path + ": ragged field row");
        std::vector<double> v;
        for (const auto& s : c) v.push_back(parse_double(s));
        FieldPoint p;
        p.x = Vec(2);
        p.x << v[0], v[1];
        p.score = Vec(2);
        p.score << v[2], v[3];
        for (std::size_t k = 0; k < n_classes; ++k) {
            Vec gr(2);
            gr << v[4 + 2 * k], v[5 + 2 * k];
            p.class_grads.push_back(gr);
        }
        const std::size_t o = 4 + 2 * n_classes;
        p.lambda = v[o];
        p.eigvec = Vec(2);
        p.eigvec << v[o + 1], v[o + 2];
        p.gate = v[o + 3] != 0.0;
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace sfg
