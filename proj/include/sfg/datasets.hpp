#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sfg/common.hpp"

namespace sfg {

/// Component covariance: either s*I (isotropic) or a dense SPD matrix.
class Covariance {
public:
    static Covariance isotropic(double variance);
    static Covariance full(Mat cov);

    bool is_isotropic() const { return !full_.has_value(); }
    double variance() const { return variance_; }
    const Mat& matrix() const { return *full_; }

    Mat dense(int dim) const;
    /// Returns this + extra * I (Gaussian smoothing of the component).
    Covariance plus_isotropic(double extra) const;

private:
    double variance_ = 1.0;
    std::optional<Mat> full_;
};

struct GmmComponent {
    double weight = 1.0;
    Vec mean;
    Covariance cov = Covariance::isotropic(1.0);
    int label = 0;
};

/// Exact mixture of Gaussians. Component labels double as class ids.
struct GmmSpec {
    std::vector<GmmComponent> components;

    int dim() const { return components.empty() ? 0 : static_cast<int>(components.front().mean.size()); }
    int size() const { return static_cast<int>(components.size()); }
    std::vector<int> class_ids() const;

    /// Throws std::invalid_argument when weights, means or covariances break the invariants.
    void validate() const;
};

enum class Region { none, mode, saddle, outlier };

std::string to_string(Region r);
Region region_from_string(const std::string& s);

/// N points in rows, one label per point, optional region tag per point.
struct LabeledPointSet {
    Mat points;  // N x n
    std::vector<int> labels;
    std::vector<Region> regions;  // empty or size N

    int size() const { return static_cast<int>(points.rows()); }
    int dim() const { return static_cast<int>(points.cols()); }
    void validate() const;
};

GmmSpec make_simplex_gmm(int n_components, int ambient_dim, double scale);
GmmSpec make_saddle_gmm(const GmmSpec& base);
GmmSpec make_outlier_gmm(const GmmSpec& base);
GmmSpec make_two_gaussian(double separation, double base_variance, int ambient_dim);

/// Sub-mixture of the components carrying `label`, weights renormalized.
GmmSpec class_subset(const GmmSpec& spec, int label);

LabeledPointSet sample_gmm(const GmmSpec& spec, int n, std::uint64_t seed);

struct FractalSpec {
    int depth = 8;
    double branch_angle = 0.6283185307179586;  // pi/5
    double shrink_ratio = 0.75;
    double jitter_sigma = 0.005;
    int n_classes = 2;

    void validate() const;
};

struct Segment {
    Eigen::Vector2d a;
    Eigen::Vector2d b;
    int level = 0;
    int class_id = -1;  // -1: shallower than the class level, shared by all classes

    double length() const { return (b - a).norm(); }
};

double point_segment_distance(const Eigen::Vector2d& p, const Segment& s);

/// Binary-tree fractal: a unit trunk from the origin along +y, each segment
/// spawning two children rotated by +-branch_angle and scaled by shrink_ratio.
class Fractal {
public:
    explicit Fractal(const FractalSpec& spec);

    const FractalSpec& spec() const { return spec_; }
    const std::vector<Segment>& segments() const { return segments_; }
    double total_length() const { return total_length_; }

    /// Length-weighted segment choice, uniform position, isotropic jitter.
    /// Points on shared (pre-class-level) segments get a uniformly drawn class.
    LabeledPointSet sample(int n, std::uint64_t seed) const;

    double distance(const Eigen::Vector2d& p) const;
    int nearest_segment(const Eigen::Vector2d& p) const;

private:
    FractalSpec spec_;
    std::vector<Segment> segments_;
    std::vector<double> cumulative_length_;
    double total_length_ = 0.0;
};

Fractal make_fractal(const FractalSpec& spec);

// CSV: header x0,...,x{n-1},label,region; 9 significant digits.
void write_csv(std::ostream& os, const LabeledPointSet& set);
void write_csv(const std::string& path, const LabeledPointSet& set);
LabeledPointSet read_csv(std::istream& is);
LabeledPointSet read_csv(const std::string& path);

} // namespace sfg
