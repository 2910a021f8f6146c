#pragma once

#include <vector>

#include "sfg/datasets.hpp"

namespace sfg {

/// A GMM convolved with N(0, sigma^2 I); again a GMM with covariances
/// Sigma_i + sigma^2 I. Precomputes per-component precisions and normalizers.
class SmoothedGmm {
public:
    SmoothedGmm(GmmSpec base, double sigma);

    const GmmSpec& base() const { return base_; }
    double sigma() const { return sigma_; }
    int dim() const { return base_.dim(); }
    int size() const { return base_.size(); }

    /// Effective covariance of component i.
    Mat covariance(int i) const;

    // Per-component quantities at x.
    // log w_i + log N(x; mu_i, C_i)
    Vec component_log_terms(const Vec& x) const;
    // s_i = C_i^{-1} (mu_i - x)
    Vec component_score(int i, const Vec& x) const;
    // Applies C_i^{-1} to a vector.
    Vec apply_precision(int i, const Vec& v) const;
    Mat precision(int i) const;

private:
    GmmSpec base_;
    double sigma_;
    std::vector<double> iso_precision_;  // 1/variance for isotropic components, 0 otherwise
    std::vector<Mat> full_precision_;
    std::vector<double> log_norm_;  // log w_i - 0.5 (n log 2pi + log det C_i)
};

struct EigPair {
    double value = 0.0;
    Vec vector;
};

enum class RegionClass { mode, saddle_region, other };

SmoothedGmm smooth(const GmmSpec& spec, double sigma);

double log_density(const SmoothedGmm& g, const Vec& x);
/// Posterior responsibilities r_i(x), computed with max-subtracted log-sum-exp.
Vec responsibilities(const SmoothedGmm& g, const Vec& x);
Vec score(const SmoothedGmm& g, const Vec& x);
/// Batch score for columns of x (n x B).
Mat score_batch(const SmoothedGmm& g, const Mat& x);
Mat hessian(const SmoothedGmm& g, const Vec& x);

/// All eigenpairs of a symmetric matrix, descending by value.
std::vector<EigPair> full_spectrum(const Mat& h);
EigPair top_eigenpair(const Mat& h);

/// grad log p(y = class_id | x) under the exact Bayes posterior of g.
Vec classifier_grad(const SmoothedGmm& g, const Vec& x, int class_id);

/// Default mode tolerance: 1e-6 * sqrt(n).
double default_grad_tol(int dim);
RegionClass classify_region(const SmoothedGmm& g, const Vec& x, double grad_tol);

} // namespace sfg
