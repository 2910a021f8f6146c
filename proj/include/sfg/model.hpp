#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfg/datasets.hpp"
#include "sfg/oracle.hpp"

namespace sfg {

/// Anything that predicts the added noise eps(x, sigma) for a batch of
/// column vectors. `labels` is empty (unconditional) or holds one class id
/// per column; kNullClass selects the unconditional branch.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual int dim() const = 0;
    virtual Mat predict_eps(const Mat& x, double sigma, std::span<const int> labels) const = 0;
    virtual bool conditional() const { return false; }

    Vec predict_eps(const Vec& x, double sigma, std::optional<int> class_id = std::nullopt) const;
};

/// Exact noise predictor of a smoothed GMM: eps = -sigma * grad log p_sigma.
/// Conditional calls use the class sub-mixture.
class OracleModel final : public NoisePredictor {
public:
    explicit OracleModel(GmmSpec spec);
    int dim() const override { return spec_.dim(); }
    Mat predict_eps(const Mat& x, double sigma, std::span<const int> labels) const override;
    using NoisePredictor::predict_eps;
    bool conditional() const override { return true; }
    const GmmSpec& spec() const { return spec_; }

private:
    GmmSpec spec_;
};

// Parameterization changes. sigma > 0 and t < 1 are enforced.
template <class Derived>
typename Derived::PlainObject eps_to_score(const Eigen::MatrixBase<Derived>& eps, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("eps_to_score requires sigma > 0");
    return -eps / sigma;
}

template <class Derived>
typename Derived::PlainObject score_to_eps(const Eigen::MatrixBase<Derived>& score, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("score_to_eps requires sigma > 0");
    return -sigma * score;
}

// Flow convention: x_t = (1 - t) x_data + t eps, v = eps - x_data.
template <class D1, class D2>
typename D1::PlainObject flow_to_eps(const Eigen::MatrixBase<D1>& v, const Eigen::MatrixBase<D2>& x, double t) {
    if (!(t < 1.0)) throw std::invalid_argument("flow_to_eps requires t < 1");
    return (1.0 - t) * v + x;
}

template <class D1, class D2>
typename D1::PlainObject eps_to_flow(const Eigen::MatrixBase<D1>& eps, const Eigen::MatrixBase<D2>& x, double t) {
    if (!(t < 1.0)) throw std::invalid_argument("eps_to_flow requires t < 1");
    return (eps - x) / (1.0 - t);
}

enum class Objective { dsm, flow_matching };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

struct Architecture {
    int data_dim = 2;
    std::vector<int> hidden{64, 64};
    int n_classes = 0;  // 0: unconditional
    int embedding_dim = 8;
    Objective objective = Objective::dsm;
    // Input scale 1/sqrt(sigma^2 + sigma_data^2); with `skip` the network
    // predicts the residual on top of the optimal Gaussian denoiser.
    double sigma_data = 0.5;
    bool skip = true;

    void validate() const;
};

/// MLP noise predictor: [c_in x, 4 Fourier features of the noise level,
/// class embedding] -> SiLU hidden layers -> n outputs.
/// Parameters live in one flat vector: per layer W (column-major) then b,
/// then the embedding table (embedding_dim x (n_classes + 1), last column null).
class ScoreModel final : public NoisePredictor {
public:
    ScoreModel() = default;
    ScoreModel(Architecture arch, std::uint64_t seed);

    const Architecture& arch() const { return arch_; }
    int dim() const override { return arch_.data_dim; }
    bool conditional() const override { return arch_.n_classes > 0; }

    Mat predict_eps(const Mat& x, double sigma, std::span<const int> labels) const override;
    using NoisePredictor::predict_eps;
    /// Flow velocity in the flow convention above (model time t in (0,1)).
    Mat predict_flow(const Mat& x, double t, std::span<const int> labels) const;

    const Vec& parameters() const { return params_; }
    Vec& parameters() { return params_; }
    Eigen::Index parameter_count() const { return params_.size(); }

    /// Training loss for one fixed batch: mean over columns of ||target - output||^2,
    /// where (x, level, target) are already in the model's native parameterization.
    double loss(const Mat& x, const Vec& level, const Mat& target, std::span<const int> labels) const;
    double loss_and_grad(const Mat& x, const Vec& level, const Mat& target, std::span<const int> labels,
                         Vec& grad) const;

private:
    struct LayerView {
        Eigen::Index w_offset, b_offset;
        int rows, cols;
    };

    int input_width() const;
    Mat features(const Mat& x, const Vec& level, std::span<const int> labels) const;
    // Native output for per-column noise levels (eps for dsm, v for flow).
    Mat forward(const Mat& x, const Vec& level, std::span<const int> labels) const;
    int embed_column(int label) const;

    Architecture arch_;
    std::vector<LayerView> layers_;
    Eigen::Index embedding_offset_ = 0;
    Vec params_;
};

struct TrainConfig {
    int batches = 30000;
    int batch_size = 200;
    int warmup_batches = 500;
    double lr = 1e-3;
    bool cosine = true;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    Objective objective = Objective::dsm;
    // dsm: sigma ~ log-uniform[sigma_min, sigma_max]; flow: t ~ U(0,1).
    double sigma_min = 0.02;
    double sigma_max = 10.0;
    double label_dropout = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    // Exponential moving average of the weights; the returned model carries
    // the averaged weights. 0 disables.
    double ema_decay = 0.0;

    void validate() const;
    double learning_rate(int batch) const;
};

struct TrainResult {
    ScoreModel model;
    std::vector<double> losses;  // one per batch
};

/// Loss became non-finite or exceeded 1e6; carries the parameters before the failing update.
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& what, ScoreModel last_good, int batch)
        : NumericError(what), last_good_(std::move(last_good)), batch_(batch) {}
    const ScoreModel& last_good() const { return last_good_; }
    int batch() const { return batch_; }

private:
    ScoreModel last_good_;
    int batch_;
};

/// Per-coordinate RMS standard deviation of a point set.
double data_sigma(const LabeledPointSet& data);

TrainResult train(const LabeledPointSet& dataset, Architecture arch, const TrainConfig& cfg);

/// Mean over rows of sigma^2 ||oracle score - model score||^2 (unconditional branch).
double esm_loss(const NoisePredictor& m, const SmoothedGmm& g, const LabeledPointSet& points, double sigma);

// Checkpoint: "SFGM", u32 version, u32 header length, JSON header, then
// little-endian float32 parameter blocks in declaration order.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::string& path, const ScoreModel& model, const std::string& extra_json = "{}");
ScoreModel load_checkpoint(const std::string& path);

} // namespace sfg
