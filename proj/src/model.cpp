#include "sfg/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace sfg {

namespace {

constexpr int kFourierFeatures = 4;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// SiLU and its derivative, elementwise.
void silu(const Mat& z, Mat& out) { out = z.unaryExpr([](double v) { return v * sigmoid(v); }); }

Mat silu_grad(const Mat& z) {
    return z.unaryExpr([](double v) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
    });
}

} // namespace

Vec NoisePredictor::predict_eps(const Vec& x, double sigma, std::optional<int> class_id) const {
    const int label = class_id.value_or(kNullClass);
    const Mat out = predict_eps(Mat(x), sigma, std::span<const int>(&label, 1));
    return out.col(0);
}

OracleModel::OracleModel(GmmSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

Mat OracleModel::predict_eps(const Mat& x, double sigma, std::span<const int> labels) const {
    if (!(sigma > 0.0)) throw std::invalid_argument("oracle noise prediction requires sigma > 0");
    if (x.rows() != dim()) throw std::invalid_argument("oracle input dimension mismatch");
    const SmoothedGmm marginal(spec_, sigma);
    Mat out(x.rows(), x.cols());
    std::vector<std::optional<SmoothedGmm>> per_class;
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
        const int label = labels.empty() ? kNullClass : labels[b];
        if (label == kNullClass) {
            out.col(b) = -sigma * score(marginal, x.col(b));
            continue;
        }
        if (label < 0) throw std::invalid_argument("unknown class id " + std::to_string(label));
        if (per_class.size() <= static_cast<std::size_t>(label)) per_class.resize(label + 1);
        if (!per_class[label]) per_class[label].emplace(class_subset(spec_, label), sigma);
        out.col(b) = -sigma * score(*per_class[label], x.col(b));
    }
    return out;
}

std::string to_string(Objective o) { return o == Objective::dsm ? "dsm" : "flow_matching"; }

Objective objective_from_string(const std::string& s) {
    if (s == "dsm") return Objective::dsm;
    if (s == "flow_matching") return Objective::flow_matching;
    throw ConfigError("unknown training objective '" + s + "'");
}

void Architecture::validate() const {
    if (data_dim < 1) throw std::invalid_argument("architecture data_dim must be >= 1");
    if (hidden.empty()) throw std::invalid_argument("architecture needs at least one hidden layer");
    for (int w : hidden)
        if (w < 1) throw std::invalid_argument("hidden widths must be >= 1");
    if (n_classes < 0) throw std::invalid_argument("n_classes must be >= 0");
    if (n_classes > 0 && embedding_dim < 1) throw std::invalid_argument("conditional models need embedding_dim >= 1");
    if (!(sigma_data > 0.0)) throw std::invalid_argument("sigma_data must be positive");
}

ScoreModel::ScoreModel(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    Eigen::Index offset = 0;
    int fan_in = input_width();
    std::vector<int> outs = arch_.hidden;
    outs.push_back(arch_.data_dim);
    for (int width : outs) {
        LayerView l{offset, offset + static_cast<Eigen::Index>(width) * fan_in, width, fan_in};
        layers_.push_back(l);
        offset = l.b_offset + width;
        fan_in = width;
    }
    embedding_offset_ = offset;
    if (conditional()) offset += static_cast<Eigen::Index>(arch_.embedding_dim) * (arch_.n_classes + 1);
    params_ = Vec::Zero(offset);

    Rng rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const auto& l = layers_[li];
        double scale = 1.0 / std::sqrt(static_cast<double>(l.cols));
        if (li + 1 == layers_.size()) scale *= 0.1;
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(l.rows) * l.cols; ++i)
            params_[l.w_offset + i] = scale * nd(rng);
    }
    for (Eigen::Index i = embedding_offset_; i < params_.size(); ++i) params_[i] = nd(rng);
}

int ScoreModel::input_width() const {
    return arch_.data_dim + kFourierFeatures + (conditional() ? arch_.embedding_dim : 0);
}

int ScoreModel::embed_column(int label) const {
    if (label == kNullClass) return arch_.n_classes;
    if (label < 0 || label >= arch_.n_classes)
        throw std::invalid_argument("unknown class id " + std::to_string(label));
    return label;
}

Mat ScoreModel::features(const Mat& x, const Vec& level, std::span<const int> labels) const {
    const int n = arch_.data_dim;
    if (x.rows() != n) throw std::invalid_argument("model input dimension mismatch");
    if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != x.cols())
        throw std::invalid_argument("label count does not match batch size");
    Mat in(input_width(), x.cols());
    const double sd2 = arch_.sigma_data * arch_.sigma_data;
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
        double c_in = 1.0;
        double c_noise = 0.0;
        if (arch_.objective == Objective::dsm) {
            c_in = 1.0 / std::sqrt(level[b] * level[b] + sd2);
            c_noise = 0.25 * std::log(level[b]);
        } else {
            c_noise = 2.0 * level[b] - 1.0;
        }
        in.col(b).head(n) = c_in * x.col(b);
        in(n + 0, b) = std::sin(c_noise);
        in(n + 1, b) = std::cos(c_noise);
        in(n + 2, b) = std::sin(2.0 * c_noise);
        in(n + 3, b) = std::cos(2.0 * c_noise);
    }
    if (conditional()) {
        const int e = arch_.embedding_dim;
        Eigen::Map<const Mat> table(params_.data() + embedding_offset_, e, arch_.n_classes + 1);
        for (Eigen::Index b = 0; b < x.cols(); ++b) {
            const int label = labels.empty() ? kNullClass : labels[b];
            in.col(b).tail(e) = table.col(embed_column(label));
        }
    } else {
        for (int label : labels)
            if (label != kNullClass) throw std::invalid_argument("unconditional model got class id " + std::to_string(label));
    }
    return in;
}

Mat ScoreModel::forward(const Mat& x, const Vec& level, std::span<const int> labels) const {
    Mat h = features(x, level, labels);
    Mat z;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const auto& l = layers_[li];
        Eigen::Map<const Mat> w(params_.data() + l.w_offset, l.rows, l.cols);
        Eigen::Map<const Vec> bias(params_.data() + l.b_offset, l.rows);
        z.noalias() = w * h;
        z.colwise() += bias;
        if (li + 1 < layers_.size()) silu(z, h);
    }
    if (arch_.objective == Objective::flow_matching || !arch_.skip) return z;
    const double sd = arch_.sigma_data;
    Mat out(x.rows(), x.cols());
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
        const double s = level[b];
        const double denom = s * s + sd * sd;
        out.col(b) = (s / denom) * x.col(b) - (sd / std::sqrt(denom)) * z.col(b);
    }
    return out;
}

Mat ScoreModel::predict_eps(const Mat& x, double sigma, std::span<const int> labels) const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("predict_eps requires finite sigma > 0");
    if (arch_.objective == Objective::dsm) return forward(x, Vec::Constant(x.cols(), sigma), labels);
    // Flow model: x~ = x_t / (1 - t) with sigma = t / (1 - t).
    const double t = sigma / (1.0 + sigma);
    const Mat xt = x / (1.0 + sigma);
    const Mat v = forward(xt, Vec::Constant(x.cols(), t), labels);
    return flow_to_eps(v, xt, t);
}

Mat ScoreModel::predict_flow(const Mat& x, double t, std::span<const int> labels) const {
    if (arch_.objective == Objective::flow_matching) {
        if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("predict_flow requires t in [0,1]");
        return forward(x, Vec::Constant(x.cols(), t), labels);
    }
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("predict_flow requires t in (0,1)");
    const double sigma = t / (1.0 - t);
    const Mat eps = forward(x / (1.0 - t), Vec::Constant(x.cols(), sigma), labels);
    return eps_to_flow(eps, x, t);
}

double ScoreModel::loss(const Mat& x, const Vec& level, const Mat& target, std::span<const int> labels) const {
    const Mat out = forward(x, level, labels);
    return (out - target).colwise().squaredNorm().mean();
}

double ScoreModel::loss_and_grad(const Mat& x, const Vec& level, const Mat& target, std::span<const int> labels,
                                 Vec& grad) const {
    const Eigen::Index batch = x.cols();
    std::vector<Mat> acts{features(x, level, labels)};
    std::vector<Mat> pre;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const auto& l = layers_[li];
        Eigen::Map<const Mat> w(params_.data() + l.w_offset, l.rows, l.cols);
        Eigen::Map<const Vec> bias(params_.data() + l.b_offset, l.rows);
        Mat z = w * acts.back();
        z.colwise() += bias;
        if (li + 1 < layers_.size()) {
            Mat a;
            silu(z, a);
            acts.push_back(std::move(a));
        }
        pre.push_back(std::move(z));
    }

    // Output head and dL/dF.
    const Mat& f = pre.back();
    Mat out;
    Vec out_coef = Vec::Ones(batch);
    if (arch_.objective == Objective::dsm && arch_.skip) {
        const double sd = arch_.sigma_data;
        out.resize(x.rows(), batch);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const double s = level[b];
            const double denom = s * s + sd * sd;
            out_coef[b] = -sd / std::sqrt(denom);
            out.col(b) = (s / denom) * x.col(b) + out_coef[b] * f.col(b);
        }
    } else {
        out = f;
    }
    const Mat resid = out - target;
    const double value = resid.colwise().squaredNorm().mean();
    Mat g = (2.0 / static_cast<double>(batch)) * resid * out_coef.asDiagonal();

    grad = Vec::Zero(params_.size());
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const auto& l = layers_[li];
        Eigen::Map<Mat> gw(grad.data() + l.w_offset, l.rows, l.cols);
        Eigen::Map<Vec> gb(grad.data() + l.b_offset, l.rows);
        gw.noalias() = g * acts[li].transpose();
        gb = g.rowwise().sum();
        Eigen::Map<const Mat> w(params_.data() + l.w_offset, l.rows, l.cols);
        Mat upstream = w.transpose() * g;
        if (li > 0)
            g = upstream.cwiseProduct(silu_grad(pre[li - 1]));
        else
            g = std::move(upstream);
    }
    if (conditional()) {
        const int e = arch_.embedding_dim;
        const int off = arch_.data_dim + kFourierFeatures;
        Eigen::Map<Mat> table(grad.data() + embedding_offset_, e, arch_.n_classes + 1);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const int label = labels.empty() ? kNullClass : labels[b];
            table.col(embed_column(label)) += g.col(b).segment(off, e);
        }
    }
    return value;
}

void TrainConfig::validate() const {
    if (batches < 1) throw ConfigError("train.batches must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (warmup_batches < 0 || warmup_batches > batches) throw ConfigError("train.warmup must lie in [0, batches]");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(sigma_min > 0.0 && sigma_max > sigma_min)) throw ConfigError("train sigma range must satisfy 0 < min < max");
    if (label_dropout < 0.0 || label_dropout > 1.0) throw ConfigError("train.label_dropout must lie in [0,1]");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema_decay must lie in [0,1)");
}

double TrainConfig::learning_rate(int batch) const {
    if (batch < warmup_batches) return lr * static_cast<double>(batch + 1) / warmup_batches;
    if (!cosine || batches == warmup_batches) return lr;
    const double progress = static_cast<double>(batch - warmup_batches) / (batches - warmup_batches);
    return 0.5 * lr * (1.0 + std::cos(M_PI * progress));
}

double data_sigma(const LabeledPointSet& data) {
    if (data.size() < 2) return 1.0;
    const Eigen::RowVectorXd mean = data.points.colwise().mean();
    const double var = (data.points.rowwise() - mean).array().square().sum() / ((data.size() - 1.0) * data.dim());
    return std::sqrt(var);
}

TrainResult train(const LabeledPointSet& dataset, Architecture arch, const TrainConfig& cfg) {
    cfg.validate();
    dataset.validate();
    if (dataset.size() < 1) throw std::invalid_argument("training set is empty");
    arch.data_dim = dataset.dim();
    arch.objective = cfg.objective;
    if (!(arch.sigma_data > 0.0)) arch.sigma_data = data_sigma(dataset);

    Rng rng(cfg.seed);
    ScoreModel model(arch, derive_seed(cfg.seed, 1));
    const Eigen::Index np = model.parameter_count();
    Vec m1 = Vec::Zero(np), m2 = Vec::Zero(np), grad;
    Vec ema = model.parameters();

    std::uniform_int_distribution<int> pick(0, dataset.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    const double log_lo = std::log(cfg.sigma_min), log_hi = std::log(cfg.sigma_max);
    const int n = dataset.dim();
    const int bs = cfg.batch_size;

    TrainResult result;
    result.losses.reserve(cfg.batches);
    Mat x(n, bs), target(n, bs);
    Vec level(bs);
    std::vector<int> labels(model.conditional() ? bs : 0);

    for (int step = 0; step < cfg.batches; ++step) {
        for (int b = 0; b < bs; ++b) {
            const int row = pick(rng);
            Vec noise(n);
            for (int j = 0; j < n; ++j) noise[j] = nd(rng);
            const Vec clean = dataset.points.row(row).transpose();
            if (cfg.objective == Objective::dsm) {
                const double sigma = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
                level[b] = sigma;
                x.col(b) = clean + sigma * noise;
                target.col(b) = noise;
            } else {
                double t = unit(rng);
                if (t <= 0.0) t = 1e-6;
                level[b] = t;
                x.col(b) = (1.0 - t) * clean + t * noise;
                target.col(b) = noise - clean;
            }
            if (model.conditional()) {
                const bool drop = unit(rng) < cfg.label_dropout;
                labels[b] = drop ? kNullClass : dataset.labels[row];
            }
        }
        const double value = model.loss_and_grad(x, level, target, labels, grad);
        if (!std::isfinite(value) || value > 1e6 || !grad.allFinite())
            throw DivergenceError("training diverged at batch " + std::to_string(step) +
                                      " (loss " + std::to_string(value) + ")",
                                  model, step);
        result.losses.push_back(value);

        // Adam with decoupled weight decay.
        const double lr = cfg.learning_rate(step);
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step + 1);
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step + 1);
        m1 = cfg.adam_beta1 * m1 + (1.0 - cfg.adam_beta1) * grad;
        m2 = cfg.adam_beta2 * m2 + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
        Vec& p = model.parameters();
        p -= lr * cfg.weight_decay * p;
        p.array() -= lr * (m1.array() / bc1) / ((m2.array() / bc2).sqrt() + cfg.adam_eps);
        // Bias-corrected warm start: the average covers all steps while step < 1/(1-decay).
        const double decay = std::min(cfg.ema_decay, static_cast<double>(step) / (step + 1.0));
        ema = decay * ema + (1.0 - decay) * p;
    }
    if (cfg.ema_decay > 0.0) model.parameters() = ema;
    result.model = std::move(model);
    return result;
}

double esm_loss(const NoisePredictor& m, const SmoothedGmm& g, const LabeledPointSet& points, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("esm_loss requires sigma > 0");
    if (points.size() == 0) return 0.0;
    constexpr Eigen::Index kChunk = 256;
    double total = 0.0;
    const Eigen::Index rows = points.points.rows();
    for (Eigen::Index start = 0; start < rows; start += kChunk) {
        const Eigen::Index len = std::min(kChunk, rows - start);
        const Mat x = points.points.middleRows(start, len).transpose();
        const Mat eps = m.predict_eps(x, sigma, {});
        // Kept as a separate product so the compiler cannot fuse it into the difference.
        const Mat truth_eps = -sigma * score_batch(g, x);
        total += (eps - truth_eps).colwise().squaredNorm().sum();
    }
    return total / static_cast<double>(rows);
}

namespace {

nlohmann::json arch_to_json(const Architecture& a) {
    return {{"data_dim", a.data_dim}, {"hidden", a.hidden},           {"n_classes", a.n_classes},
            {"embedding_dim", a.embedding_dim}, {"objective", to_string(a.objective)},
            {"sigma_data", a.sigma_data},         {"skip", a.skip}};
}

Architecture arch_from_json(const nlohmann::json& j) {
    Architecture a;
    a.data_dim = j.at("data_dim").get<int>();
    a.hidden = j.at("hidden").get<std::vector<int>>();
    a.n_classes = j.at("n_classes").get<int>();
    a.embedding_dim = j.at("embedding_dim").get<int>();
    a.objective = objective_from_string(j.at("objective").get<std::string>());
    a.sigma_data = j.at("sigma_data").get<double>();
    a.skip = j.at("skip").get<bool>();
    return a;
}

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated checkpoint");
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void save_checkpoint(const std::string& path, const ScoreModel& model, const std::string& extra_json) {
    static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
    nlohmann::json header = nlohmann::json::parse(extra_json);
    header["architecture"] = arch_to_json(model.arch());
    header["parameter_count"] = model.parameter_count();
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os.write("SFGM", 4);
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (Eigen::Index i = 0; i < model.parameter_count(); ++i) {
        const float f = static_cast<float>(model.parameters()[i]);
        os.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

ScoreModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifact("checkpoint '" + path + "' not found");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "SFGM", 4) != 0)
        throw std::runtime_error("'" + path + "' is not an SFGM checkpoint");
    const std::uint32_t version = get_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t len = get_u32(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), len)) throw std::runtime_error("truncated checkpoint header");
    const auto header = nlohmann::json::parse(text);
    ScoreModel model(arch_from_json(header.at("architecture")), 0);
    if (header.at("parameter_count").get<Eigen::Index>() != model.parameter_count())
        throw std::runtime_error("checkpoint parameter count does not match its architecture");
    for (Eigen::Index i = 0; i < model.parameter_count(); ++i) {
        float f;
        if (!is.read(reinterpret_cast<char*>(&f), sizeof f)) throw std::runtime_error("truncated checkpoint weights");
        model.parameters()[i] = f;
    }
    return model;
}

} // namespace sfg
