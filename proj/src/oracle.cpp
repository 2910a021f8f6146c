#include "sfg/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sfg {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void check_dim(const SmoothedGmm& g, Eigen::Index n) {
    if (n != g.dim())
        throw std::invalid_argument("dimension mismatch: point has " + std::to_string(n) +
                                    " coordinates, mixture has " + std::to_string(g.dim()));
}

double log_sum_exp(const Vec& terms) {
    const double m = terms.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((terms.array() - m).exp().sum());
}

} // namespace

SmoothedGmm::SmoothedGmm(GmmSpec base, double sigma) : base_(std::move(base)), sigma_(sigma) {
    if (!std::isfinite(sigma) || sigma < 0.0) throw std::invalid_argument("sigma must be finite and >= 0");
    base_.validate();
    const int n = base_.dim();
    const double extra = sigma * sigma;
    for (const auto& c : base_.components) {
        const double logw = c.weight > 0.0 ? std::log(c.weight) : -std::numeric_limits<double>::infinity();
        if (c.cov.is_isotropic()) {
            const double var = c.cov.variance() + extra;
            iso_precision_.push_back(1.0 / var);
            full_precision_.emplace_back();
            log_norm_.push_back(logw - 0.5 * (n * kLog2Pi + n * std::log(var)));
        } else {
            Mat cov = c.cov.matrix();
            cov.diagonal().array() += extra;
            Eigen::LLT<Mat> llt(cov);
            if (llt.info() != Eigen::Success) throw std::invalid_argument("smoothed covariance is not SPD");
            const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
            iso_precision_.push_back(0.0);
            full_precision_.push_back(llt.solve(Mat::Identity(n, n)));
            log_norm_.push_back(logw - 0.5 * (n * kLog2Pi + logdet));
        }
    }
}

Mat SmoothedGmm::covariance(int i) const {
    return base_.components[i].cov.plus_isotropic(sigma_ * sigma_).dense(dim());
}

Vec SmoothedGmm::apply_precision(int i, const Vec& v) const {
    if (iso_precision_[i] > 0.0) return iso_precision_[i] * v;
    return full_precision_[i] * v;
}

Mat SmoothedGmm::precision(int i) const {
    if (iso_precision_[i] > 0.0) return iso_precision_[i] * Mat::Identity(dim(), dim());
    return full_precision_[i];
}

Vec SmoothedGmm::component_score(int i, const Vec& x) const {
    return apply_precision(i, base_.components[i].mean - x);
}

Vec SmoothedGmm::component_log_terms(const Vec& x) const {
    Vec terms(size());
    for (int i = 0; i < size(); ++i) {
        const Vec d = x - base_.components[i].mean;
        const double quad = iso_precision_[i] > 0.0 ? iso_precision_[i] * d.squaredNorm()
                                                    : d.dot(full_precision_[i] * d);
        terms[i] = log_norm_[i] - 0.5 * quad;
    }
    return terms;
}

SmoothedGmm smooth(const GmmSpec& spec, double sigma) { return SmoothedGmm(spec, sigma); }

double log_density(const SmoothedGmm& g, const Vec& x) {
    check_dim(g, x.size());
    return log_sum_exp(g.component_log_terms(x));
}

Vec responsibilities(const SmoothedGmm& g, const Vec& x) {
    check_dim(g, x.size());
    const Vec terms = g.component_log_terms(x);
    return (terms.array() - log_sum_exp(terms)).exp().matrix();
}

Vec score(const SmoothedGmm& g, const Vec& x) {
    const Vec r = responsibilities(g, x);
    Vec s = Vec::Zero(x.size());
    for (int i = 0; i < g.size(); ++i) {
        if (r[i] == 0.0) continue;
        s += r[i] * g.component_score(i, x);
    }
    return s;
}

Mat score_batch(const SmoothedGmm& g, const Mat& x) {
    check_dim(g, x.rows());
    Mat out(x.rows(), x.cols());
    for (Eigen::Index b = 0; b < x.cols(); ++b) out.col(b) = score(g, x.col(b));
    return out;
}

Mat hessian(const SmoothedGmm& g, const Vec& x) {
    const Vec r = responsibilities(g, x);
    const int n = g.dim();
    Mat h = Mat::Zero(n, n);
    Vec mean_score = Vec::Zero(n);
    for (int i = 0; i < g.size(); ++i) {
        if (r[i] == 0.0) continue;
        const Vec si = g.component_score(i, x);
        h.noalias() += r[i] * (si * si.transpose() - g.precision(i));
        mean_score += r[i] * si;
    }
    h.noalias() -= mean_score * mean_score.transpose();
    return 0.5 * (h + h.transpose());
}

std::vector<EigPair> full_spectrum(const Mat& h) {
    if (h.rows() != h.cols()) throw std::invalid_argument("spectrum of a non-square matrix");
    if ((h - h.transpose()).cwiseAbs().maxCoeff() > 1e-9)
        throw std::invalid_argument("spectrum requires a symmetric matrix");
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    if (es.info() != Eigen::Success) throw NumericError("symmetric eigensolver failed");
    std::vector<EigPair> pairs;
    for (Eigen::Index i = h.rows() - 1; i >= 0; --i)
        pairs.push_back({es.eigenvalues()[i], es.eigenvectors().col(i).normalized()});
    return pairs;
}

EigPair top_eigenpair(const Mat& h) { return full_spectrum(h).front(); }

Vec classifier_grad(const SmoothedGmm& g, const Vec& x, int class_id) {
    const Vec r = responsibilities(g, x);
    double class_mass = 0.0;
    for (int i = 0; i < g.size(); ++i)
        if (g.base().components[i].label == class_id) class_mass += r[i];
    bool known = false;
    for (const auto& c : g.base().components) known = known || c.label == class_id;
    if (!known) throw std::invalid_argument("unknown class id " + std::to_string(class_id));

    // grad log p(y|x) = E_{i|x,y}[s_i] - E_{i|x}[s_i]
    Vec conditional = Vec::Zero(x.size());
    Vec marginal = Vec::Zero(x.size());
    for (int i = 0; i < g.size(); ++i) {
        if (r[i] == 0.0) continue;
        const Vec si = g.component_score(i, x);
        marginal += r[i] * si;
        if (g.base().components[i].label == class_id && class_mass > 0.0) conditional += (r[i] / class_mass) * si;
    }
    if (!(class_mass > 0.0)) {
        // Posterior mass underflowed; fall back to the sub-mixture score directly.
        conditional = score(smooth(class_subset(g.base(), class_id), g.sigma()), x);
    }
    return conditional - marginal;
}

double default_grad_tol(int dim) { return 1e-6 * std::sqrt(static_cast<double>(dim)); }

RegionClass classify_region(const SmoothedGmm& g, const Vec& x, double grad_tol) {
    if (!(grad_tol > 0.0)) throw std::invalid_argument("grad_tol must be positive");
    const double top = full_spectrum(hessian(g, x)).front().value;
    if (top > 0.0) return RegionClass::saddle_region;
    if (score(g, x).norm() < grad_tol && top < 0.0) return RegionClass::mode;
    return RegionClass::other;
}

} // namespace sfg
