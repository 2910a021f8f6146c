#include "sfg/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "sfg/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sfg {
namespace {

constexpr std::uint64_t kDataStream = 0xda;
constexpr std::uint64_t kSampleStream = 0x5a;
constexpr std::uint64_t kReferenceStream = 0x5e;
constexpr std::uint64_t kEvalStream = 0xe5;

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw MissingArtifact("cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw std::runtime_error("cannot create output directory " + p.string());
}

std::string num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string short_num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", x);
    return buf;
}

void require_file(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw MissingArtifact(p.string() + " not found; " + hint);
}

/// Writes manifest_<command>.json listing `outputs` (relative to out) with their hashes.
void write_manifest(const RunConfig& cfg, const std::string& command, const std::vector<std::string>& outputs,
                    json extra = json::object()) {
    const fs::path out(cfg.out);
    json files = json::object();
    for (const auto& rel : outputs) files[rel] = sha256_hex(slurp(out / rel));
    json m = {{"command", command},
              {"version", SFG_VERSION},
              {"config", effective_json(cfg)},
              {"config_hash", config_hash(cfg)},
              {"outputs", files}};
    if (!extra.empty()) m["details"] = std::move(extra);
    write_text((out / ("manifest_" + command + ".json")).string(), m.dump(2) + "\n");
}

void write_losses(const fs::path& path, const std::vector<double>& losses) {
    std::ostringstream os;
    os << "batch,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << num(losses[i]) << '\n';
    write_text(path.string(), os.str());
}

LabeledPointSet with_region(LabeledPointSet set, Region r) {
    set.regions.assign(set.size(), r);
    return set;
}

bool is_flow(const RunConfig& cfg) { return !cfg.model.oracle && cfg.model.objective == Objective::flow_matching; }

/// Trains one network, saving the last good parameters on divergence.
ScoreModel train_one(const LabeledPointSet& data, Architecture arch, const TrainConfig& tc, const fs::path& ckpt,
                     const fs::path& loss_csv, const std::string& hash) {
    try {
        TrainResult r = train(data, std::move(arch), tc);
        save_checkpoint(ckpt.string(), r.model, json{{"config_hash", hash}}.dump());
        write_losses(loss_csv, r.losses);
        return std::move(r.model);
    } catch (const DivergenceError& e) {
        fs::path last = ckpt;
        last.replace_extension(".last_good.ckpt");
        save_checkpoint(last.string(), e.last_good(), json{{"config_hash", hash}, {"diverged_at", e.batch()}}.dump());
        throw NumericError(std::string(e.what()) + "; last good parameters in " + last.string());
    }
}

// sfg_trace.csv: trajectory,step,lambda,gate,alpha
void write_trace(const fs::path& path, const SampleSet& s) {
    std::ostringstream os;
    os << "trajectory,step,lambda,gate,alpha\n";
    for (std::size_t j = 0; j < s.trajectories.size(); ++j) {
        const auto& t = s.trajectories[j];
        for (std::size_t k = 0; k < t.sfg_trace.size(); ++k)
            os << j << ',' << k << ',' << num(t.sfg_trace[k].lambda) << ',' << (t.sfg_trace[k].gate ? 1 : 0) << ','
               << num(t.sfg_trace[k].alpha) << '\n';
    }
    write_text(path.string(), os.str());
}

SampleSet read_trace(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    SampleSet s;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string f[5];
        for (auto& x : f) std::getline(ls, x, ',');
        const auto j = std::stoul(f[0]);
        if (s.trajectories.size() <= j) s.trajectories.resize(j + 1);
        s.trajectories[j].sfg_trace.push_back({std::stod(f[2]), f[3] == "1", std::stod(f[4])});
    }
    return s;
}

// trajectories.csv: trajectory,step,x0..x{n-1}
void write_states(const fs::path& path, const SampleSet& s) {
    std::ostringstream os;
    const int dim = s.trajectories.empty() || s.trajectories.front().states.empty()
                        ? 0
                        : static_cast<int>(s.trajectories.front().states.front().size());
    os << "trajectory,step";
    for (int i = 0; i < dim; ++i) os << ",x" << i;
    os << '\n';
    for (std::size_t j = 0; j < s.trajectories.size(); ++j)
        for (std::size_t k = 0; k < s.trajectories[j].states.size(); ++k) {
            os << j << ',' << k;
            for (double v : s.trajectories[j].states[k]) os << ',' << num(v);
            os << '\n';
        }
    write_text(path.string(), os.str());
}

void write_esm(std::ostringstream& os, const std::string& model, const std::vector<RegionLoss>& rows) {
    for (const auto& r : rows)
        os << model << ',' << to_string(r.region) << ',' << num(r.sigma) << ',' << num(r.t) << ',' << num(r.loss)
           << '\n';
}

json esm_json(const std::vector<RegionLoss>& rows) {
    json a = json::array();
    for (const auto& r : rows) a.push_back({{"region", to_string(r.region)}, {"sigma", r.sigma}, {"t", r.t}, {"loss", r.loss}});
    return a;
}

fs::path resolve(const RunConfig& cfg, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || fs::exists(path) ? path : fs::path(cfg.out) / path;
}

} // namespace

TaskTruth task_truth(const RunConfig& cfg) {
    TaskTruth t;
    switch (cfg.task) {
    case Task::simplex:
        t.gmm = make_simplex_gmm(cfg.data.n_components, cfg.data.ambient_dim, cfg.data.scale);
        break;
    case Task::two_gaussian:
        t.gmm = make_two_gaussian(cfg.data.separation, cfg.data.base_variance, cfg.data.ambient_dim);
        break;
    case Task::fractal:
        t.fractal = make_fractal(cfg.data.fractal);
        break;
    }
    return t;
}

LabeledPointSet reference_samples(const RunConfig& cfg, const TaskTruth& truth, int n) {
    const auto seed = derive_seed(cfg.seed, kReferenceStream);
    return truth.gmm ? sample_gmm(*truth.gmm, n, seed) : truth.fractal->sample(n, seed);
}

LoadedModels load_models(const RunConfig& cfg, const std::string& out_dir, const GuidanceSpec& spec) {
    LoadedModels m;
    if (cfg.model.oracle) {
        m.main = std::make_shared<OracleModel>(*task_truth(cfg).gmm);
        return m;
    }
    const fs::path out(out_dir);
    require_file(out / "model.ckpt", "run `sfg train` first");
    m.main_net = std::make_shared<ScoreModel>(load_checkpoint((out / "model.ckpt").string()));
    m.main = m.main_net;
    if (spec.kind == GuidanceKind::autoguidance) {
        require_file(out / "companion.ckpt", "autoguidance needs the companion trained by `sfg train`");
        m.companion = std::make_shared<ScoreModel>(load_checkpoint((out / "companion.ckpt").string()));
    }
    const int want = cfg.task == Task::fractal ? 2 : cfg.data.ambient_dim;
    if (m.main->dim() != want)
        throw ConfigError("checkpoint dimension " + std::to_string(m.main->dim()) + " does not match the task (" +
                          std::to_string(want) + ")");
    if (spec.needs_companion() && spec.kind != GuidanceKind::autoguidance && !m.main->conditional())
        throw ConfigError(to_string(spec.kind) + " guidance needs a conditional checkpoint");
    return m;
}

std::vector<int> sample_labels(const RunConfig& cfg) {
    std::vector<int> labels;
    const int n = cfg.sample.n_samples;
    if (cfg.sample.labels == LabelMode::balanced) {
        for (int j = 0; j < n; ++j) labels.push_back(j % cfg.n_classes());
    } else if (cfg.sample.labels == LabelMode::fixed) {
        labels.assign(n, cfg.sample.fixed_class);
    }
    return labels;
}

SampleSet run_sampling(const RunConfig& cfg, const LoadedModels& models, const TaskTruth& truth,
                       const GuidanceSpec& spec, int threads) {
    SampleOptions opts;
    opts.threads = threads;
    opts.chunk = cfg.sample.chunk;
    opts.labels = sample_labels(cfg);
    opts.keep_every = cfg.sample.keep_every;
    const auto seed = derive_seed(cfg.seed, kSampleStream);
    if (is_flow(cfg)) {
        const ScoreModel* companion = spec.kind == GuidanceKind::autoguidance ? models.companion.get()
                                      : spec.needs_companion()                ? models.main_net.get()
                                                                              : nullptr;
        const Provider p = flow_provider(*models.main_net, companion, spec);
        return euler_flow_sample(p, flow_schedule(cfg.schedule.steps, cfg.schedule.tau_start), cfg.sample.n_samples,
                                 seed, opts);
    }
    Models ms;
    ms.main = models.main.get();
    if (spec.kind == GuidanceKind::autoguidance)
        ms.companion = models.companion.get();
    else if (spec.needs_companion())
        ms.companion = models.main.get();
    if (spec.kind == GuidanceKind::classifier) {
        const GmmSpec gmm = *truth.gmm;
        ms.classifier_grad = [gmm](const Vec& x, double sigma, int c) { return classifier_grad(smooth(gmm, sigma), x, c); };
    }
    const GuidedModel gm(std::move(ms), spec);
    const Schedule sched = sigma_schedule(cfg.schedule.steps, cfg.schedule.sigma_min, cfg.schedule.sigma_max,
                                          cfg.schedule.rho);
    return heun_sample(gm.provider(), sched, cfg.sample.n_samples, seed, opts);
}

std::map<std::string, double> sample_metrics(const RunConfig& cfg, const TaskTruth& truth,
                                             const LabeledPointSet& finals, const LabeledPointSet& reference) {
    std::map<std::string, double> m;
    if (finals.size() == 0) throw NumericError("no finite samples to evaluate");
    const double thr = cfg.outlier_threshold();
    if (truth.gmm) {
        Mat means(truth.gmm->size(), truth.gmm->dim());
        for (int i = 0; i < truth.gmm->size(); ++i) means.row(i) = truth.gmm->components[i].mean.transpose();
        m["outlier_rate"] = outlier_rate(finals, *truth.gmm, thr);
        m["coverage_entropy"] = coverage_entropy(finals, means);
        if (finals.size() > finals.dim() && reference.size() > reference.dim())
            m["frechet"] = gaussian_frechet(finals.points, reference.points);
    } else {
        m["outlier_rate"] = outlier_rate(finals, *truth.fractal, thr);
        m["coverage_entropy"] = coverage_entropy(finals, truth.fractal->segments());
    }
    return m;
}

void cmd_gen_data(const RunConfig& cfg) {
    const fs::path out(cfg.out);
    ensure_dir(out / "data");
    const TaskTruth truth = task_truth(cfg);
    const auto seed = derive_seed(cfg.seed, kDataStream);
    std::vector<std::string> outputs{"data/train.csv"};
    if (truth.gmm) {
        write_csv((out / "data/train.csv").string(), with_region(sample_gmm(*truth.gmm, cfg.data.n_train, seed), Region::mode));
    } else {
        write_csv((out / "data/train.csv").string(), truth.fractal->sample(cfg.data.n_train, seed));
    }
    if (cfg.task == Task::simplex) {
        const RegionSpecs rs = simplex_regions(*truth.gmm);
        const std::pair<const GmmSpec*, Region> sets[] = {
            {&rs.mode, Region::mode}, {&rs.saddle, Region::saddle}, {&rs.outlier, Region::outlier}};
        for (std::uint64_t k = 0; k < 3; ++k) {
            const std::string rel = "data/test_" + to_string(sets[k].second) + ".csv";
            write_csv((out / rel).string(),
                      with_region(sample_gmm(*sets[k].first, cfg.data.n_test, derive_seed(seed, k + 1)), sets[k].second));
            outputs.push_back(rel);
        }
    }
    write_manifest(cfg, "gen-data", outputs);
}

void cmd_train(const RunConfig& cfg) {
    const fs::path out(cfg.out);
    if (cfg.model.oracle) {
        ensure_dir(out);
        write_manifest(cfg, "train", {}, {{"note", "oracle model, nothing to train"}});
        return;
    }
    require_file(out / "data/train.csv", "run `sfg gen-data` first");
    const LabeledPointSet data = read_csv((out / "data/train.csv").string());
    const std::string hash = config_hash(cfg);
    std::vector<std::string> outputs;

    Architecture arch = cfg.architecture();
    arch.data_dim = data.dim();
    train_one(data, arch, cfg.train, out / "model.ckpt", out / "loss.csv", hash);
    outputs.insert(outputs.end(), {"model.ckpt", "loss.csv"});

    if (cfg.companion) {
        Architecture ca = cfg.companion_architecture();
        ca.data_dim = data.dim();
        train_one(data, ca, cfg.companion_train(), out / "companion.ckpt", out / "companion_loss.csv", hash);
        outputs.insert(outputs.end(), {"companion.ckpt", "companion_loss.csv"});
    }
    if (!cfg.tiers.empty()) ensure_dir(out / "tiers");
    for (std::size_t i = 0; i < cfg.tiers.size(); ++i) {
        Architecture ta = arch;
        ta.hidden = cfg.tiers[i].hidden;
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.train.seed, 0x100 + i);
        const std::string name = "tiers/" + cfg.tiers[i].name;
        train_one(data, ta, tc, out / (name + ".ckpt"), out / (name + "_loss.csv"), hash);
        outputs.insert(outputs.end(), {name + ".ckpt", name + "_loss.csv"});
    }
    write_manifest(cfg, "train", outputs);
}

void cmd_sample(const RunConfig& cfg) {
    const fs::path out(cfg.out);
    ensure_dir(out);
    const TaskTruth truth = task_truth(cfg);
    const LoadedModels models = load_models(cfg, cfg.out, cfg.guidance);
    const SampleSet s = run_sampling(cfg, models, truth, cfg.guidance, cfg.threads);
    if (s.n_failed == static_cast<int>(s.trajectories.size()))
        throw NumericError("all " + std::to_string(s.n_failed) + " trajectories became non-finite");
    if (s.n_failed > 0) std::cerr << "warning: " << s.n_failed << " trajectories became non-finite and were dropped\n";

    std::vector<std::string> outputs{"samples.csv"};
    write_csv((out / "samples.csv").string(), s.finals());
    if (cfg.guidance.uses_sfg()) {
        write_trace(out / "sfg_trace.csv", s);
        outputs.push_back("sfg_trace.csv");
    }
    if (cfg.sample.keep_every > 0) {
        write_states(out / "trajectories.csv", s);
        outputs.push_back("trajectories.csv");
    }
    json details = {{"n_samples", s.trajectories.size()},
                    {"n_failed", s.n_failed},
                    {"n_steps", s.n_steps},
                    {"eps_fn_calls", s.eps_fn_calls},
                    {"model_evals", s.model_evals}};
    if (cfg.guidance.uses_sfg()) details["gate_on_fraction"] = sfg_stats(s).gate_on_fraction;
    write_manifest(cfg, "sample", outputs, details);
}

void cmd_eval(const RunConfig& cfg) {
    const fs::path out(cfg.out);
    ensure_dir(out);
    const TaskTruth truth = task_truth(cfg);
    EvalReport report;
    json extra = json::object();
    std::vector<std::string> outputs;
    bool evaluated = false;

    if (cfg.task == Task::simplex) {
        const RegionSpecs rs = simplex_regions(*truth.gmm);
        const auto sigmas = log_grid(cfg.eval.sigma_min, cfg.eval.sigma_max, cfg.eval.n_sigmas);
        const auto seed = derive_seed(cfg.seed, kEvalStream);
        const LoadedModels models = load_models(cfg, cfg.out, GuidanceSpec{});
        std::ostringstream csv;
        csv << "model,region,sigma,t,loss\n";
        report.esm = esm_by_region(*models.main, rs, sigmas, cfg.eval.n_per_region, seed);
        write_esm(csv, "main", report.esm);
        json tiers = json::object();
        for (const auto& tier : cfg.tiers) {
            const fs::path ck = out / "tiers" / (tier.name + ".ckpt");
            require_file(ck, "run `sfg train` with tiers first");
            const ScoreModel net = load_checkpoint(ck.string());
            const auto rows = esm_by_region(net, rs, sigmas, cfg.eval.n_per_region, seed);
            write_esm(csv, tier.name, rows);
            tiers[tier.name] = esm_json(rows);
        }
        if (!tiers.empty()) extra["tiers"] = tiers;
        write_text((out / "esm.csv").string(), csv.str());
        outputs.push_back("esm.csv");
        evaluated = true;
    }

    if (fs::exists(out / "samples.csv")) {
        const LabeledPointSet finals = read_csv((out / "samples.csv").string());
        const auto metrics = sample_metrics(cfg, truth, finals, reference_samples(cfg, truth, cfg.eval.n_reference));
        if (metrics.count("outlier_rate")) report.outlier_rate = metrics.at("outlier_rate");
        if (metrics.count("coverage_entropy")) report.coverage_entropy = metrics.at("coverage_entropy");
        if (metrics.count("frechet")) report.frechet = metrics.at("frechet");
        evaluated = true;
    }
    if (fs::exists(out / "sfg_trace.csv")) report.sfg_stats = sfg_stats(read_trace(out / "sfg_trace.csv"));
    if (fs::exists(out / "manifest_sample.json")) {
        const json ms = json::parse(slurp(out / "manifest_sample.json"));
        report.n_failed = ms.value("details", json::object()).value("n_failed", 0);
    }

    if (cfg.task == Task::two_gaussian) {
        if (truth.gmm->dim() != 2) throw ConfigError("the curvature field needs data.ambient_dim = 2");
        FieldGrid grid;
        grid.x_min = grid.y_min = -cfg.eval.field_extent;
        grid.x_max = grid.y_max = cfg.eval.field_extent;
        grid.nx = grid.ny = cfg.eval.field_points;
        for (double var : cfg.eval.field_variances) {
            const std::string rel = "field_" + short_num(var) + ".csv";
            write_field_csv((out / rel).string(), curvature_field(smooth(*truth.gmm, std::sqrt(var)), grid));
            outputs.push_back(rel);
        }
        evaluated = true;
    }
    if (!evaluated) throw MissingArtifact("nothing to evaluate in " + cfg.out + "; run `sfg sample` first");

    report.validate();
    json rj = report.to_json();
    for (auto& [k, v] : extra.items()) rj[k] = v;
    write_text((out / "report.json").string(), rj.dump(2) + "\n");
    outputs.insert(outputs.begin(), "report.json");
    write_manifest(cfg, "eval", outputs);
}

void cmd_sweep(const RunConfig& cfg) {
    if (cfg.sweep.weights.empty()) throw ConfigError("sweep.weights is empty");
    const fs::path out(cfg.out);
    ensure_dir(out);
    const TaskTruth truth = task_truth(cfg);
    const LoadedModels models = load_models(cfg, cfg.out, cfg.guidance);
    const LabeledPointSet reference = reference_samples(cfg, truth, cfg.eval.n_reference);
    const auto points = sweep(cfg.guidance, cfg.sweep.weights, cfg.sweep.curves, [&](const GuidanceSpec& spec) {
        const SampleSet s = run_sampling(cfg, models, truth, spec, cfg.threads);
        auto m = sample_metrics(cfg, truth, s.finals(), reference);
        m["failed"] = s.n_failed;
        m["gate_on_fraction"] = sfg_stats(s).gate_on_fraction;
        return m;
    });
    write_sweep_csv((out / "sweep.csv").string(), points);
    write_manifest(cfg, "sweep", {"sweep.csv"});
}

void cmd_plot(const RunConfig& cfg, const std::vector<std::string>& inputs) {
    const fs::path out(cfg.out);
    ensure_dir(out / "plots");
    std::vector<std::string> outputs;
    const TaskTruth truth = task_truth(cfg);
    const std::vector<Segment> underlay = truth.fractal ? truth.fractal->segments() : std::vector<Segment>{};

    std::vector<std::pair<std::string, fs::path>> scatter;
    for (const auto& [title, path] : cfg.plot.scatter) scatter.emplace_back(title, resolve(cfg, path));
    for (const auto& in : inputs) {
        const fs::path p(in);
        const std::string stem = p.parent_path().filename().string();
        scatter.emplace_back(stem.empty() ? p.stem().string() : stem, p);
    }
    const bool planar = cfg.task == Task::fractal || cfg.data.ambient_dim == 2;
    if (scatter.empty() && planar && fs::exists(out / "samples.csv"))
        scatter.emplace_back(to_string(cfg.guidance.kind), out / "samples.csv");

    const auto project_hint = [](const std::string& what) {
        return ConfigError(what + " has more than 2 dimensions; project it to two coordinates before plotting");
    };
    std::vector<ScatterPanel> panels;
    for (const auto& [title, path] : scatter) {
        require_file(path, "cannot plot a missing file");
        LabeledPointSet pts = read_csv(path.string());
        if (pts.size() > 0 && pts.dim() != 2) throw project_hint(path.string());
        panels.push_back({title, std::move(pts), underlay});
    }
    const bool any_field = !cfg.plot.fields.empty() || cfg.task == Task::two_gaussian;
    if (!panels.empty() || !any_field) {
        write_text((out / "plots/scatter.svg").string(), scatter_svg(panels));
        outputs.push_back("plots/scatter.svg");
    }

    std::vector<fs::path> fields;
    for (const auto& f : cfg.plot.fields) fields.push_back(resolve(cfg, f));
    if (fields.empty())
        for (double var : cfg.eval.field_variances)
            if (fs::exists(out / ("field_" + short_num(var) + ".csv")))
                fields.push_back(out / ("field_" + short_num(var) + ".csv"));
    if (!fields.empty()) {
        std::vector<QuiverPanel> qp;
        for (const auto& f : fields) {
            require_file(f, "run `sfg eval` on the two_gaussian task first");
            auto field = read_field_csv(f.string());
            if (!field.empty() && field.front().x.size() != 2) throw project_hint(f.string());
            std::string title = f.stem().string();
            if (title.rfind("field_", 0) == 0) title = "sigma^2 = " + title.substr(6);
            qp.push_back({title, std::move(field)});
        }
        write_text((out / "plots/fields.svg").string(), quiver_svg(qp));
        outputs.push_back("plots/fields.svg");
    }

    const fs::path sweep_csv = cfg.plot.sweep.empty() ? out / "sweep.csv" : resolve(cfg, cfg.plot.sweep);
    if (!cfg.plot.sweep.empty()) require_file(sweep_csv, "run `sfg sweep` first");
    if (fs::exists(sweep_csv)) {
        const auto pts = read_sweep_csv(sweep_csv.string());
        const std::string rel = "plots/sweep_" + cfg.plot.metric + ".svg";
        write_text((out / rel).string(), line_chart_svg(pts, cfg.plot.metric, cfg.plot.metric + " vs weight"));
        outputs.push_back(rel);
    }
    write_manifest(cfg, "plot", outputs);
}

void cmd_plot(const RunConfig& cfg) { cmd_plot(cfg, {}); }

int run_cli(int argc, char** argv, const std::vector<std::string>& env) {
    std::map<std::string, std::string> envmap;
    for (const auto& e : env) {
        const auto eq = e.find('=');
        if (eq != std::string::npos) envmap[e.substr(0, eq)] = e.substr(eq + 1);
    }

    CLI::App app{"Saddle-free guidance lab: data, training, guided sampling, evaluation and plots", "sfg"};
    app.set_version_flag("--version", SFG_VERSION);
    app.fallthrough();
    std::string config_path, out;
    std::uint64_t seed = 0;
    int threads = 1;
    auto* o_config = app.add_option("--config", config_path, "Run configuration (JSON); env SFG_CONFIG");
    auto* o_seed = app.add_option("--seed", seed, "Master seed, overrides the config; env SFG_SEED");
    auto* o_out = app.add_option("--out", out, "Output directory, overrides the config; env SFG_OUT");
    auto* o_threads =
        app.add_option("--threads", threads, "Sampler threads (results do not depend on it); env SFG_THREADS")
            ->check(CLI::PositiveNumber);
    std::vector<std::string> plot_inputs;
    app.add_subcommand("gen-data", "Write the training and test sets");
    app.add_subcommand("train", "Train the model, companion and tiers");
    app.add_subcommand("sample", "Draw guided samples");
    app.add_subcommand("eval", "Write report.json, ESM tables and curvature fields");
    app.add_subcommand("sweep", "Sample over a grid of guidance weights");
    app.add_subcommand("plot", "Render SVG figures")
        ->add_option("--input", plot_inputs, "Extra samples CSV (one scatter panel each)");
    app.require_subcommand(1, 1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        const auto from_env = [&](CLI::Option* opt, const char* name) -> std::optional<std::string> {
            if (opt->count() > 0) return std::nullopt;
            const auto it = envmap.find(name);
            if (it == envmap.end()) return std::nullopt;
            return it->second;
        };
        if (auto v = from_env(o_config, "SFG_CONFIG")) config_path = *v;
        if (config_path.empty()) throw ConfigError("no configuration given (--config or SFG_CONFIG)");

        std::ifstream is(config_path);
        if (!is) throw MissingArtifact("cannot open config " + config_path);
        json doc;
        try {
            doc = json::parse(is);
        } catch (const json::exception& e) {
            throw ConfigError(config_path + ": " + e.what());
        }
        if (!doc.is_object()) throw ConfigError(config_path + ": expected a JSON object");
        apply_env_overrides(doc, env);

        const auto parse_number = [](const std::string& name, const std::string& text, auto& target) {
            try {
                std::size_t used = 0;
                const long long v = std::stoll(text, &used);
                if (used != text.size() || v < 0) throw std::invalid_argument(text);
                target = static_cast<std::remove_reference_t<decltype(target)>>(v);
            } catch (const std::exception&) {
                throw ConfigError(name + " must be a non-negative integer, got '" + text + "'");
            }
        };
        if (auto v = from_env(o_seed, "SFG_SEED")) {
            parse_number("SFG_SEED", *v, seed);
            doc["seed"] = seed;
        } else if (o_seed->count() > 0) {
            doc["seed"] = seed;
        }
        if (auto v = from_env(o_out, "SFG_OUT")) doc["out"] = *v;
        else if (o_out->count() > 0) doc["out"] = out;
        if (auto v = from_env(o_threads, "SFG_THREADS")) {
            parse_number("SFG_THREADS", *v, threads);
            doc["threads"] = threads;
        } else if (o_threads->count() > 0) {
            doc["threads"] = threads;
        }

        const RunConfig cfg = parse_config(doc);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "gen-data") cmd_gen_data(cfg);
        else if (cmd == "train") cmd_train(cfg);
        else if (cmd == "sample") cmd_sample(cfg);
        else if (cmd == "eval") cmd_eval(cfg);
        else if (cmd == "sweep") cmd_sweep(cfg);
        else cmd_plot(cfg, plot_inputs);
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return kExitMissing;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

} // namespace sfg
