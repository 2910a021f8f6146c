#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfg/datasets.hpp"
#include "sfg/eval.hpp"
#include "sfg/guidance.hpp"
#include "sfg/model.hpp"

namespace sfg {

enum class Task { simplex, two_gaussian, fractal };

std::string to_string(Task t);

struct DataConfig {
    // simplex
    int n_components = 16;
    int ambient_dim = 256;
    double scale = 0.2;
    // two_gaussian
    double separation = 4.0;
    double base_variance = 1.0;
    // fractal
    FractalSpec fractal;
    int n_train = 1000;
    int n_test = 1000;
};

struct ModelConfig {
    bool oracle = false;
    std::vector<int> hidden{64, 64};
    bool conditional = false;
    int embedding_dim = 8;
    Objective objective = Objective::dsm;
    double sigma_data = 0.0;  // 0: measured from the training set
    bool skip = true;
};

struct CompanionConfig {
    std::vector<int> hidden;  // empty: half the main widths
    int batches = 0;          // 0: a quarter of the main run
};

struct TierConfig {
    std::string name;
    std::vector<int> hidden;
};

struct ScheduleConfig {
    int steps = 100;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    double tau_start = 0.0;
};

enum class LabelMode { none, balanced, fixed };

struct SampleConfig {
    int n_samples = 1000;
    LabelMode labels = LabelMode::none;
    int fixed_class = 0;
    int keep_every = 0;
    int chunk = 64;
};

struct EvalConfig {
    double sigma_min = 0.02;
    double sigma_max = 10.0;
    int n_sigmas = 9;
    int n_per_region = 1000;
    int n_reference = 5000;
    std::optional<double> outlier_threshold;  // default: 3 x jitter (fractal), Mahalanobis sqrt(d) + 3 (mixtures)
    std::vector<double> field_variances{4.0, 2.0, 0.5};
    double field_extent = 5.0;
    int field_points = 21;
};

struct SweepConfig {
    std::vector<double> weights;
    std::vector<SweepCurve> curves;
};

struct PlotConfig {
    std::vector<std::pair<std::string, std::string>> scatter;  // (title, path)
    std::vector<std::string> fields;
    std::string sweep;
    std::string metric = "frechet";
};

struct RunConfig {
    Task task = Task::simplex;
    std::uint64_t seed = 0;
    std::string out = "run";
    int threads = 1;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    std::optional<CompanionConfig> companion;
    std::vector<TierConfig> tiers;
    GuidanceSpec guidance;
    ScheduleConfig schedule;
    SampleConfig sample;
    EvalConfig eval;
    SweepConfig sweep;
    PlotConfig plot;

    Architecture architecture() const;
    Architecture companion_architecture() const;
    TrainConfig companion_train() const;
    double outlier_threshold() const;
    int n_classes() const;
};

/// The published schema, embedded at build time.
const nlohmann::json& run_config_schema();

/// Structural check of `doc` against a JSON-schema subset (type, enum,
/// bounds, items, required, additionalProperties, pattern). Throws ConfigError
/// naming the offending path.
void validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema);

/// Schema check, defaults, then cross-field validation. Throws ConfigError.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::string& path);

/// Applies SFG_SET__a__b=value style overrides (value parsed as JSON, else
/// taken as a string) from `env` (NAME=VALUE strings).
void apply_env_overrides(nlohmann::json& doc, const std::vector<std::string>& env);

/// Effective configuration with all defaults filled. `threads` and `out` are
/// omitted since they do not affect results.
nlohmann::json effective_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

std::string sha256_hex(const std::string& bytes);

} // namespace sfg
