#include "sfg/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace sfg {

Covariance Covariance::isotropic(double variance) {
    if (!(variance > 0.0) || !std::isfinite(variance))
        throw std::invalid_argument("isotropic variance must be positive and finite");
    Covariance c;
    c.variance_ = variance;
    return c;
}

Covariance Covariance::full(Mat cov) {
    if (cov.rows() != cov.cols()) throw std::invalid_argument("covariance must be square");
    Covariance c;
    c.full_ = std::move(cov);
    return c;
}

Mat Covariance::dense(int dim) const {
    if (full_) return *full_;
    return variance_ * Mat::Identity(dim, dim);
}

Covariance Covariance::plus_isotropic(double extra) const {
    if (!full_) {
        Covariance c;
        c.variance_ = variance_ + extra;
        return c;
    }
    Mat m = *full_;
    m.diagonal().array() += extra;
    return full(std::move(m));
}

std::vector<int> GmmSpec::class_ids() const {
    std::vector<int> ids;
    for (const auto& c : components) ids.push_back(c.label);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

void GmmSpec::validate() const {
    if (components.empty()) throw std::invalid_argument("GmmSpec has no components");
    const int n = dim();
    if (n < 1) throw std::invalid_argument("GmmSpec ambient dimension must be >= 1");
    double total = 0.0;
    for (const auto& c : components) {
        if (c.mean.size() != n)
            throw std::invalid_argument("GmmSpec means have inconsistent dimensions");
        if (!(c.weight >= 0.0)) throw std::invalid_argument("GmmSpec weights must be nonnegative");
        total += c.weight;
        if (c.cov.is_isotropic()) {
            if (!(c.cov.variance() > 0.0)) throw std::invalid_argument("variance must be positive");
            continue;
        }
        const Mat& s = c.cov.matrix();
        if (s.rows() != n) throw std::invalid_argument("covariance dimension mismatch");
        if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12)
            throw std::invalid_argument("covariance is not symmetric");
        Eigen::SelfAdjointEigenSolver<Mat> es(s, Eigen::EigenvaluesOnly);
        if (!(es.eigenvalues().minCoeff() > 0.0))
            throw std::invalid_argument("covariance is not positive definite");
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("GmmSpec weights must sum to 1");
}

std::string to_string(Region r) {
    switch (r) {
    case Region::mode: return "mode";
    case Region::saddle: return "saddle";
    case Region::outlier: return "outlier";
    case Region::none: break;
    }
    return "";
}

Region region_from_string(const std::string& s) {
    if (s.empty()) return Region::none;
    if (s == "mode") return Region::mode;
    if (s == "saddle") return Region::saddle;
    if (s == "outlier") return Region::outlier;
    throw std::invalid_argument("unknown region tag '" + s + "'");
}

void LabeledPointSet::validate() const {
    if (static_cast<int>(labels.size()) != size())
        throw std::invalid_argument("label count does not match point count");
    if (!regions.empty() && static_cast<int>(regions.size()) != size())
        throw std::invalid_argument("region tag count does not match point count");
}

GmmSpec make_simplex_gmm(int n_components, int ambient_dim, double scale) {
    if (n_components < 1) throw std::invalid_argument("simplex needs at least one component");
    if (n_components > ambient_dim)
        throw std::invalid_argument("simplex with " + std::to_string(n_components) +
                                    " vertices does not fit in ambient dimension " +
                                    std::to_string(ambient_dim));
    if (!(scale > 0.0)) throw std::invalid_argument("simplex scale must be positive");
    GmmSpec spec;
    for (int i = 0; i < n_components; ++i) {
        GmmComponent c;
        c.weight = 1.0 / n_components;
        c.mean = Vec::Unit(ambient_dim, i);
        c.cov = Covariance::isotropic(scale * scale);
        c.label = i;
        spec.components.push_back(std::move(c));
    }
    return spec;
}

GmmSpec make_saddle_gmm(const GmmSpec& base) {
    const int k = base.size();
    if (k < 2) throw std::invalid_argument("saddle mixture needs at least two base components");
    GmmSpec spec;
    const double w = 2.0 / (static_cast<double>(k) * (k - 1));
    int label = 0;
    for (int i = 0; i < k; ++i) {
        for (int j = i + 1; j < k; ++j) {
            GmmComponent c;
            c.weight = w;
            c.mean = 0.5 * (base.components[i].mean + base.components[j].mean);
            c.cov = base.components[i].cov;
            c.label = label++;
            spec.components.push_back(std::move(c));
        }
    }
    return spec;
}

GmmSpec make_outlier_gmm(const GmmSpec& base) {
    GmmSpec spec = base;
    const double w = 1.0 / base.size();
    for (auto& c : spec.components) {
        c.mean *= 2.0;
        c.weight = w;
    }
    return spec;
}

GmmSpec make_two_gaussian(double separation, double base_variance, int ambient_dim) {
    if (!(separation > 0.0)) throw std::invalid_argument("separation must be positive");
    if (!(base_variance > 0.0)) throw std::invalid_argument("base variance must be positive");
    if (ambient_dim < 1) throw std::invalid_argument("ambient dimension must be >= 1");
    GmmSpec spec;
    for (int i = 0; i < 2; ++i) {
        GmmComponent c;
        c.weight = 0.5;
        c.mean = Vec::Zero(ambient_dim);
        c.mean[0] = (i == 0 ? -0.5 : 0.5) * separation;
        c.cov = Covariance::isotropic(base_variance);
        c.label = i;
        spec.components.push_back(std::move(c));
    }
    return spec;
}

GmmSpec class_subset(const GmmSpec& spec, int label) {
    GmmSpec sub;
    double total = 0.0;
    for (const auto& c : spec.components) {
        if (c.label != label) continue;
        sub.components.push_back(c);
        total += c.weight;
    }
    if (sub.components.empty() || !(total > 0.0))
        throw std::invalid_argument("unknown class id " + std::to_string(label));
    for (auto& c : sub.components) c.weight /= total;
    return sub;
}

LabeledPointSet sample_gmm(const GmmSpec& spec, int n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample count must be >= 1");
    const int dim = spec.dim();
    Rng rng(seed);
    std::vector<double> weights;
    for (const auto& c : spec.components) weights.push_back(c.weight);
    std::discrete_distribution<int> pick(weights.begin(), weights.end());

    std::vector<Mat> factors(spec.components.size());
    for (std::size_t i = 0; i < spec.components.size(); ++i) {
        const auto& cov = spec.components[i].cov;
        if (!cov.is_isotropic()) factors[i] = Eigen::LLT<Mat>(cov.matrix()).matrixL();
    }

    LabeledPointSet out;
    out.points.resize(n, dim);
    out.labels.resize(n);
    for (int r = 0; r < n; ++r) {
        const int k = pick(rng);
        const auto& c = spec.components[k];
        Vec z = standard_normal(rng, dim);
        if (c.cov.is_isotropic())
            out.points.row(r) = (c.mean + std::sqrt(c.cov.variance()) * z).transpose();
        else
            out.points.row(r) = (c.mean + factors[k] * z).transpose();
        out.labels[r] = c.label;
    }
    return out;
}

void FractalSpec::validate() const {
    if (depth < 1) throw std::invalid_argument("fractal depth must be >= 1");
    if (!(shrink_ratio > 0.0 && shrink_ratio < 1.0))
        throw std::invalid_argument("fractal shrink_ratio must lie strictly inside (0,1)");
    if (!std::isfinite(jitter_sigma) || jitter_sigma < 0.0)
        throw std::invalid_argument("fractal jitter_sigma must be finite and >= 0");
    if (!std::isfinite(branch_angle)) throw std::invalid_argument("fractal branch_angle must be finite");
    if (n_classes < 1 || (n_classes & (n_classes - 1)) != 0)
        throw std::invalid_argument("fractal n_classes must be a power of two");
    int level = 0;
    while ((1 << level) < n_classes) ++level;
    if (level > depth - 1)
        throw std::invalid_argument("fractal depth too small for the requested class count");
}

double point_segment_distance(const Eigen::Vector2d& p, const Segment& s) {
    const Eigen::Vector2d d = s.b - s.a;
    const double len2 = d.squaredNorm();
    double t = len2 > 0.0 ? (p - s.a).dot(d) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (s.a + t * d - p).norm();
}

Fractal::Fractal(const FractalSpec& spec) : spec_(spec) {
    spec_.validate();
    int class_level = 0;
    while ((1 << class_level) < spec_.n_classes) ++class_level;

    struct Node {
        Eigen::Vector2d start;
        double heading;
        double length;
        int class_id;
    };
    std::vector<Node> frontier{{Eigen::Vector2d::Zero(), M_PI / 2.0, 1.0, class_level == 0 ? 0 : -1}};
    for (int level = 0; level < spec_.depth; ++level) {
        std::vector<Node> next;
        for (std::size_t i = 0; i < frontier.size(); ++i) {
            const Node& node = frontier[i];
            Segment seg;
            seg.a = node.start;
            seg.b = node.start + node.length * Eigen::Vector2d(std::cos(node.heading), std::sin(node.heading));
            seg.level = level;
            seg.class_id = node.class_id;
            segments_.push_back(seg);
            for (int side = 0; side < 2; ++side) {
                const double turn = side == 0 ? spec_.branch_angle : -spec_.branch_angle;
                int cls = node.class_id;
                // Children of the level just above the class level start a new class.
                if (level + 1 == class_level) cls = static_cast<int>(2 * i + side);
                next.push_back({seg.b, node.heading + turn, node.length * spec_.shrink_ratio, cls});
            }
        }
        frontier = std::move(next);
    }
    for (const auto& s : segments_) {
        total_length_ += s.length();
        cumulative_length_.push_back(total_length_);
    }
}

LabeledPointSet Fractal::sample(int n, std::uint64_t seed) const {
    if (n < 1) throw std::invalid_argument("sample count must be >= 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_int_distribution<int> any_class(0, spec_.n_classes - 1);
    LabeledPointSet out;
    out.points.resize(n, 2);
    out.labels.resize(n);
    for (int r = 0; r < n; ++r) {
        const double pos = unit(rng) * total_length_;
        auto it = std::upper_bound(cumulative_length_.begin(), cumulative_length_.end(), pos);
        const std::size_t k = std::min<std::size_t>(it - cumulative_length_.begin(), segments_.size() - 1);
        const Segment& s = segments_[k];
        const double t = unit(rng);
        Eigen::Vector2d p = s.a + t * (s.b - s.a);
        if (spec_.jitter_sigma > 0.0) {
            p.x() += spec_.jitter_sigma * nd(rng);
            p.y() += spec_.jitter_sigma * nd(rng);
        }
        out.points.row(r) = p.transpose();
        out.labels[r] = s.class_id >= 0 ? s.class_id : any_class(rng);
    }
    return out;
}

double Fractal::distance(const Eigen::Vector2d& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& s : segments_) best = std::min(best, point_segment_distance(p, s));
    return best;
}

int Fractal::nearest_segment(const Eigen::Vector2d& p) const {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        const double d = point_segment_distance(p, segments_[i]);
        if (d < best) {
            best = d;
            arg = static_cast<int>(i);
        }
    }
    return arg;
}

Fractal make_fractal(const FractalSpec& spec) { return Fractal(spec); }

void write_csv(std::ostream& os, const LabeledPointSet& set) {
    set.validate();
    const int n = set.dim();
    for (int j = 0; j < n; ++j) os << 'x' << j << ',';
    os << "label,region\n";
    char buf[32];
    for (int r = 0; r < set.size(); ++r) {
        for (int j = 0; j < n; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", set.points(r, j));
            os << buf << ',';
        }
        os << set.labels[r] << ',';
        if (!set.regions.empty()) os << to_string(set.regions[r]);
        os << '\n';
    }
}

void write_csv(const std::string& path, const LabeledPointSet& set) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_csv(os, set);
    if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

LabeledPointSet read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty CSV");
    int n = 0;
    {
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) {
            if (!col.empty() && col[0] == 'x') ++n;
        }
    }
    std::vector<double> values;
    std::vector<int> labels;
    std::vector<Region> regions;
    bool any_region = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        for (int j = 0; j < n; ++j) {
            if (!std::getline(ss, cell, ',')) throw std::runtime_error("short CSV row");
            values.push_back(std::stod(cell));
        }
        if (!std::getline(ss, cell, ',')) throw std::runtime_error("CSV row without label");
        labels.push_back(std::stoi(cell));
        std::string tag;
        std::getline(ss, tag);
        regions.push_back(region_from_string(tag));
        any_region = any_region || !tag.empty();
    }
    LabeledPointSet out;
    const int rows = static_cast<int>(labels.size());
    out.points.resize(rows, n);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) out.points(r, j) = values[static_cast<std::size_t>(r) * n + j];
    out.labels = std::move(labels);
    if (any_region) out.regions = std::move(regions);
    return out;
}

LabeledPointSet read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot open '" + path + "'");
    return read_csv(is);
}

} // namespace sfg
