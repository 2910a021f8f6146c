#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfg/config.hpp"
#include "sfg/sampler.hpp"

namespace sfg {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitNumeric = 3, kExitMissing = 4 };

/// Ground-truth description of the configured task.
struct TaskTruth {
    std::optional<GmmSpec> gmm;
    std::optional<Fractal> fractal;
};

TaskTruth task_truth(const RunConfig& cfg);
LabeledPointSet reference_samples(const RunConfig& cfg, const TaskTruth& truth, int n);

/// Models needed to sample with the configured guidance.
struct LoadedModels {
    std::shared_ptr<const NoisePredictor> main;
    std::shared_ptr<const ScoreModel> main_net;  // null for oracle models
    std::shared_ptr<const ScoreModel> companion;
};

LoadedModels load_models(const RunConfig& cfg, const std::string& out_dir, const GuidanceSpec& spec);

SampleSet run_sampling(const RunConfig& cfg, const LoadedModels& models, const TaskTruth& truth,
                       const GuidanceSpec& spec, int threads);

/// frechet (mixture tasks), outlier_rate and coverage_entropy of the final samples.
std::map<std::string, double> sample_metrics(const RunConfig& cfg, const TaskTruth& truth,
                                             const LabeledPointSet& finals, const LabeledPointSet& reference);

/// Per-trajectory class ids for the configured label mode (empty when unlabeled).
std::vector<int> sample_labels(const RunConfig& cfg);

// Each command reads and writes artifacts under cfg.out.
void cmd_gen_data(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_sample(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_sweep(const RunConfig& cfg);
void cmd_plot(const RunConfig& cfg);
/// `inputs`: extra sample CSVs, one scatter panel each (titled by their directory).
void cmd_plot(const RunConfig& cfg, const std::vector<std::string>& inputs);

/// Parses argv, runs one command and maps failures to exit codes.
int run_cli(int argc, char** argv, const std::vector<std::string>& env);

} // namespace sfg
