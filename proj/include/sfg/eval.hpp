#pragma once

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfg/datasets.hpp"
#include "sfg/guidance.hpp"
#include "sfg/model.hpp"
#include "sfg/oracle.hpp"
#include "sfg/sampler.hpp"

namespace sfg {

struct RegionLoss {
    Region region = Region::mode;
    double sigma = 0.0;
    double t = 0.0;  // sigma / (1 + sigma)
    double loss = 0.0;
};

struct SweepPoint {
    std::string curve;
    double weight = 0.0;
    std::map<std::string, double> metrics;
};

struct SfgStats {
    std::int64_t n = 0;
    double gate_on_fraction = 0.0;
    double lambda_min = 0.0;
    double lambda_q25 = 0.0;
    double lambda_median = 0.0;
    double lambda_q75 = 0.0;
    double lambda_max = 0.0;
    double lambda_mean = 0.0;
};

struct EvalReport {
    std::vector<RegionLoss> esm;
    std::optional<double> outlier_rate;
    std::optional<double> coverage_entropy;
    std::optional<double> frechet;
    std::vector<SweepPoint> sweep_points;
    std::optional<SfgStats> sfg_stats;
    int n_failed = 0;

    /// Throws NumericError on non-finite metrics or probabilities outside [0,1].
    void validate() const;
    nlohmann::json to_json() const;
};

struct RegionSpecs {
    GmmSpec mode;     // also the data distribution whose smoothed score is the target
    GmmSpec saddle;
    GmmSpec outlier;
};

RegionSpecs simplex_regions(const GmmSpec& simplex);

/// Per region and sigma: n points from the region spec plus N(0, sigma^2 I)
/// noise, scored against the smoothed mode (data) spec.
std::vector<RegionLoss> esm_by_region(const NoisePredictor& model, const RegionSpecs& specs,
                                      const std::vector<double>& sigmas, int n_per_region, std::uint64_t seed);

/// Log-spaced grid of n noise levels in [lo, hi].
std::vector<double> log_grid(double lo, double hi, int n);

double outlier_rate(const LabeledPointSet& samples, const Fractal& manifold, double threshold);
/// A sample is an outlier when its Mahalanobis distance to every component exceeds threshold.
double outlier_rate(const LabeledPointSet& samples, const GmmSpec& manifold, double threshold);

/// Shannon entropy (nats) of nearest-reference assignments. References are rows.
double coverage_entropy(const LabeledPointSet& samples, const Mat& modes);
double coverage_entropy(const LabeledPointSet& samples, const std::vector<Segment>& segments);

/// Frechet distance between Gaussian fits of two point sets (rows), covariances regularized by 1e-8 I.
double gaussian_frechet(const Mat& a, const Mat& b);
double gaussian_frechet(const Vec& mean_a, const Mat& cov_a, const Vec& mean_b, const Mat& cov_b);

SfgStats sfg_stats(const SampleSet& samples);

struct SweepCurve {
    std::string name;
    std::optional<double> alpha0;
    std::optional<double> h;
};

using SweepRun = std::function<std::map<std::string, double>(const GuidanceSpec& spec)>;

/// Runs `run` once for the unguided baseline (curve "baseline", weight = identity
/// weight) and once per (curve, weight). Failures are rethrown tagged with the run id.
std::vector<SweepPoint> sweep(const GuidanceSpec& base, const std::vector<double>& weights,
                              const std::vector<SweepCurve>& curves, const SweepRun& run);

/// Weight at which `kind` is a no-op.
double identity_weight(GuidanceKind kind);

void write_sweep_csv(std::ostream& os, const std::vector<SweepPoint>& points);
void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points);
std::vector<SweepPoint> read_sweep_csv(const std::string& path);

struct FieldGrid {
    double x_min = -4.0, x_max = 4.0;
    double y_min = -4.0, y_max = 4.0;
    int nx = 21, ny = 21;
};

struct FieldPoint {
    Vec x;
    Vec score;
    std::vector<Vec> class_grads;  // one per class id, ascending
    double lambda = 0.0;           // top Hessian eigenvalue
    Vec eigvec;
    bool gate = false;
};

std::vector<FieldPoint> curvature_field(const SmoothedGmm& g, const FieldGrid& grid);

void write_field_csv(std::ostream& os, const std::vector<FieldPoint>& field);
void write_field_csv(const std::string& path, const std::vector<FieldPoint>& field);
std::vector<FieldPoint> read_field_csv(const std::string& path);

} // namespace sfg
