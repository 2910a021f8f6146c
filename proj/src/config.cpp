#include "sfg/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "sfg/schema_data.hpp"

namespace sfg {

using nlohmann::json;

std::string to_string(Task t) {
    switch (t) {
    case Task::simplex: return "simplex";
    case Task::two_gaussian: return "two_gaussian";
    case Task::fractal: return "fractal";
    }
    return "simplex";
}

namespace {

Task task_from_string(const std::string& s) {
    if (s == "simplex") return Task::simplex;
    if (s == "two_gaussian") return Task::two_gaussian;
    if (s == "fractal") return Task::fractal;
    throw ConfigError("unknown task '" + s + "'");
}

std::string type_name(const json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    if (v.is_object()) return "object";
    return "null";
}

bool type_matches(const json& v, const std::string& type) {
    if (type == "number") return v.is_number();
    if (type == "integer") return v.is_number_integer() || v.is_number_unsigned();
    return type_name(v) == type;
}

void check_node(const json& v, const json& s, const std::string& path) {
    const std::string where = path.empty() ? "config" : path;
    if (s.contains("type") && !type_matches(v, s["type"].get<std::string>()))
        throw ConfigError(where + ": expected " + s["type"].get<std::string>() + ", got " + type_name(v));
    if (s.contains("enum")) {
        bool found = false;
        for (const auto& e : s["enum"]) found = found || e == v;
        if (!found) throw ConfigError(where + ": value " + v.dump() + " is not one of " + s["enum"].dump());
    }
    if (v.is_number()) {
        const double x = v.get<double>();
        if (s.contains("minimum") && x < s["minimum"].get<double>())
            throw ConfigError(where + ": must be >= " + s["minimum"].dump());
        if (s.contains("maximum") && x > s["maximum"].get<double>())
            throw ConfigError(where + ": must be <= " + s["maximum"].dump());
        if (s.contains("exclusiveMinimum") && !(x > s["exclusiveMinimum"].get<double>()))
            throw ConfigError(where + ": must be > " + s["exclusiveMinimum"].dump());
        if (s.contains("exclusiveMaximum") && !(x < s["exclusiveMaximum"].get<double>()))
            throw ConfigError(where + ": must be < " + s["exclusiveMaximum"].dump());
        if (!std::isfinite(x)) throw ConfigError(where + ": must be finite");
    }
    if (v.is_string() && s.contains("pattern") &&
        !std::regex_search(v.get<std::string>(), std::regex(s["pattern"].get<std::string>())))
        throw ConfigError(where + ": does not match " + s["pattern"].get<std::string>());
    if (v.is_array()) {
        if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>())
            throw ConfigError(where + ": needs at least " + s["minItems"].dump() + " items");
        if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>())
            throw ConfigError(where + ": allows at most " + s["maxItems"].dump() + " items");
        if (s.contains("items"))
            for (std::size_t i = 0; i < v.size(); ++i) check_node(v[i], s["items"], where + "[" + std::to_string(i) + "]");
    }
    if (v.is_object()) {
        const json props = s.value("properties", json::object());
        if (s.contains("required"))
            for (const auto& r : s["required"])
                if (!v.contains(r.get<std::string>()))
                    throw ConfigError(where + ": missing required key '" + r.get<std::string>() + "'");
        for (const auto& [k, child] : v.items()) {
            const std::string child_path = path.empty() ? k : path + "." + k;
            if (props.contains(k))
                check_node(child, props[k], child_path);
            else if (s.value("additionalProperties", true) == false)
                throw ConfigError(where + ": unknown key '" + k + "'");
        }
    }
}

template <class T>
T get_or(const json& obj, const char* key, T fallback) {
    return obj.contains(key) ? obj[key].get<T>() : fallback;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

} // namespace

const json& run_config_schema() {
    static const json schema = json::parse(kRunConfigSchema);
    return schema;
}

void validate_against_schema(const json& doc, const json& schema) { check_node(doc, schema, ""); }

Architecture RunConfig::architecture() const {
    Architecture a;
    a.hidden = model.hidden;
    a.n_classes = model.conditional ? n_classes() : 0;
    a.embedding_dim = model.embedding_dim;
    a.objective = model.objective;
    a.sigma_data = model.sigma_data;
    a.skip = model.skip;
    return a;
}

Architecture RunConfig::companion_architecture() const {
    Architecture a = architecture();
    if (companion && !companion->hidden.empty()) {
        a.hidden = companion->hidden;
    } else {
        for (int& h : a.hidden) h = std::max(1, h / 2);
    }
    return a;
}

TrainConfig RunConfig::companion_train() const {
    TrainConfig t = train;
    t.batches = companion && companion->batches > 0 ? companion->batches : std::max(1, train.batches / 4);
    t.warmup_batches = std::min(t.warmup_batches, t.batches / 2);
    t.seed = derive_seed(train.seed, 0xc0);
    return t;
}

double RunConfig::outlier_threshold() const {
    if (eval.outlier_threshold) return *eval.outlier_threshold;
    if (task == Task::fractal) return 3.0 * data.fractal.jitter_sigma;
    // Mahalanobis norms of in-distribution points concentrate near sqrt(d).
    const int dim = task == Task::simplex ? data.ambient_dim : 2;
    return std::sqrt(static_cast<double>(dim)) + 3.0;
}

int RunConfig::n_classes() const {
    switch (task) {
    case Task::simplex: return data.n_components;
    case Task::two_gaussian: return 2;
    case Task::fractal: return data.fractal.n_classes;
    }
    return 0;
}

RunConfig parse_config(const json& doc) {
    validate_against_schema(doc, run_config_schema());
    RunConfig c;
    c.task = task_from_string(doc.at("task").get<std::string>());
    c.seed = get_or<std::uint64_t>(doc, "seed", 0);
    c.out = get_or<std::string>(doc, "out", "run");
    c.threads = get_or<int>(doc, "threads", 1);

    const json d = doc.value("data", json::object());
    auto& data = c.data;
    if (c.task == Task::two_gaussian) {
        data.ambient_dim = 2;
        data.n_train = 2000;
    }
    if (c.task == Task::fractal) data.n_train = 20000;
    data.n_components = get_or(d, "n_components", data.n_components);
    data.ambient_dim = get_or(d, "ambient_dim", data.ambient_dim);
    data.scale = get_or(d, "scale", data.scale);
    data.separation = get_or(d, "separation", data.separation);
    data.base_variance = get_or(d, "base_variance", data.base_variance);
    data.fractal.depth = get_or(d, "depth", data.fractal.depth);
    data.fractal.branch_angle = get_or(d, "branch_angle", data.fractal.branch_angle);
    data.fractal.shrink_ratio = get_or(d, "shrink_ratio", data.fractal.shrink_ratio);
    data.fractal.jitter_sigma = get_or(d, "jitter_sigma", data.fractal.jitter_sigma);
    data.fractal.n_classes = get_or(d, "n_classes", data.fractal.n_classes);
    data.n_train = get_or(d, "n_train", data.n_train);
    data.n_test = get_or(d, "n_test", data.n_test);
    const char* task_keys[3][6] = {{"n_components", "scale", "n_test", "", "", ""},
                                   {"separation", "base_variance", "", "", "", ""},
                                   {"depth", "branch_angle", "shrink_ratio", "jitter_sigma", "n_classes", ""}};
    for (int t = 0; t < 3; ++t) {
        if (t == static_cast<int>(c.task)) continue;
        for (const char* k : task_keys[t])
            if (*k && d.contains(k)) throw ConfigError(std::string("data.") + k + " does not apply to task " + to_string(c.task));
    }
    if (c.task == Task::fractal) {
        require(!d.contains("ambient_dim"), "data.ambient_dim does not apply to task fractal");
        try {
            data.fractal.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("data: ") + e.what());
        }
    }

    const json m = doc.value("model", json::object());
    c.model.oracle = get_or<std::string>(m, "source", "trained") == "oracle";
    c.model.hidden = get_or(m, "hidden", c.model.hidden);
    c.model.conditional = get_or(m, "conditional", c.model.conditional);
    c.model.embedding_dim = get_or(m, "embedding_dim", c.model.embedding_dim);
    c.model.objective = objective_from_string(get_or<std::string>(m, "objective", "dsm"));
    c.model.sigma_data = get_or(m, "sigma_data", c.model.sigma_data);
    c.model.skip = get_or(m, "skip", c.model.skip);

    const json t = doc.value("train", json::object());
    auto& tr = c.train;
    tr.batches = get_or(t, "batches", tr.batches);
    tr.batch_size = get_or(t, "batch_size", tr.batch_size);
    tr.warmup_batches = get_or(t, "warmup_batches", tr.warmup_batches);
    tr.lr = get_or(t, "lr", tr.lr);
    tr.cosine = get_or(t, "cosine", tr.cosine);
    tr.weight_decay = get_or(t, "weight_decay", tr.weight_decay);
    tr.sigma_min = get_or(t, "sigma_min", tr.sigma_min);
    tr.sigma_max = get_or(t, "sigma_max", tr.sigma_max);
    tr.label_dropout = get_or(t, "label_dropout", tr.label_dropout);
    tr.ema_decay = get_or(t, "ema_decay", tr.ema_decay);
    tr.objective = c.model.objective;
    tr.seed = derive_seed(c.seed, 0x7a);

    if (doc.contains("companion")) {
        CompanionConfig comp;
        comp.hidden = get_or(doc["companion"], "hidden", comp.hidden);
        comp.batches = get_or(doc["companion"], "batches", comp.batches);
        c.companion = comp;
    }
    for (const auto& tier : doc.value("tiers", json::array()))
        c.tiers.push_back({tier.at("name").get<std::string>(), tier.at("hidden").get<std::vector<int>>()});

    const json g = doc.value("guidance", json::object());
    auto& gs = c.guidance;
    gs.kind = guidance_kind_from_string(get_or<std::string>(g, "kind", "none"));
    gs.weight = get_or(g, "weight", identity_weight(gs.kind));
    if (g.contains("interval")) gs.interval = Interval{g["interval"][0].get<double>(), g["interval"][1].get<double>()};
    if (g.contains("class")) gs.classifier_class = g["class"].get<int>();
    gs.sfg_stack_weight = get_or(g, "sfg_stack_weight", 0.0);
    const json sg = g.value("sfg", json::object());
    gs.sfg.alpha0 = get_or(sg, "alpha", gs.sfg.alpha0);
    gs.sfg.h = get_or(sg, "h", gs.sfg.h);
    gs.sfg.sigma_scaled_shift = get_or(sg, "sigma_scaled_shift", gs.sfg.sigma_scaled_shift);
    gs.sfg.corrector_update = get_or(sg, "corrector_update", gs.sfg.corrector_update);

    const json s = doc.value("schedule", json::object());
    c.schedule.steps = get_or(s, "steps", c.schedule.steps);
    c.schedule.sigma_min = get_or(s, "sigma_min", c.schedule.sigma_min);
    c.schedule.sigma_max = get_or(s, "sigma_max", c.schedule.sigma_max);
    c.schedule.rho = get_or(s, "rho", c.schedule.rho);
    c.schedule.tau_start = get_or(s, "tau_start", c.schedule.tau_start);

    const json sm = doc.value("sample", json::object());
    c.sample.n_samples = get_or(sm, "n_samples", c.sample.n_samples);
    const std::string labels = get_or<std::string>(sm, "labels", "none");
    c.sample.labels = labels == "balanced" ? LabelMode::balanced : labels == "fixed" ? LabelMode::fixed : LabelMode::none;
    c.sample.fixed_class = get_or(sm, "class", 0);
    c.sample.keep_every = get_or(sm, "keep_every", 0);
    c.sample.chunk = get_or(sm, "chunk", c.sample.chunk);

    const json e = doc.value("eval", json::object());
    c.eval.sigma_min = get_or(e, "sigma_min", c.eval.sigma_min);
    c.eval.sigma_max = get_or(e, "sigma_max", c.eval.sigma_max);
    c.eval.n_sigmas = get_or(e, "n_sigmas", c.eval.n_sigmas);
    c.eval.n_per_region = get_or(e, "n_per_region", c.eval.n_per_region);
    c.eval.n_reference = get_or(e, "n_reference", c.eval.n_reference);
    if (e.contains("outlier_threshold")) c.eval.outlier_threshold = e["outlier_threshold"].get<double>();
    c.eval.field_variances = get_or(e, "field_variances", c.eval.field_variances);
    c.eval.field_extent = get_or(e, "field_extent", c.eval.field_extent);
    c.eval.field_points = get_or(e, "field_points", c.eval.field_points);

    const json sw = doc.value("sweep", json::object());
    c.sweep.weights = get_or(sw, "weights", std::vector<double>{});
    for (const auto& cv : sw.value("curves", json::array())) {
        SweepCurve curve{cv.at("name").get<std::string>(), std::nullopt, std::nullopt};
        if (cv.contains("alpha")) curve.alpha0 = cv["alpha"].get<double>();
        if (cv.contains("h")) curve.h = cv["h"].get<double>();
        c.sweep.curves.push_back(std::move(curve));
    }

    const json p = doc.value("plot", json::object());
    for (const auto& sc : p.value("scatter", json::array()))
        c.plot.scatter.emplace_back(sc.value("title", std::string()), sc.at("path").get<std::string>());
    c.plot.fields = get_or(p, "fields", std::vector<std::string>{});
    c.plot.sweep = get_or<std::string>(p, "sweep", "");
    c.plot.metric = get_or<std::string>(p, "metric", c.plot.metric);

    // Cross-field rules.
    const bool gmm_task = c.task != Task::fractal;
    const bool trained = !c.model.oracle;
    require(gmm_task || trained, "model.source = oracle needs a mixture task (simplex or two_gaussian)");
    if (c.task == Task::simplex) {
        require(data.n_components <= data.ambient_dim, "data.n_components must not exceed data.ambient_dim");
    }
    try {
        if (trained) {
            Architecture a = c.architecture();
            a.data_dim = c.task == Task::fractal ? 2 : data.ambient_dim;
            a.sigma_data = a.sigma_data > 0.0 ? a.sigma_data : 0.5;
            a.validate();
            c.train.validate();
        }
        gs.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& ex) {
        throw ConfigError(ex.what());
    }
    require(!(c.model.oracle && (doc.contains("tiers") || doc.contains("companion"))),
            "tiers and companion apply only to trained models");
    require(!(c.model.oracle && m.contains("hidden")), "model.hidden applies only to trained models");
    require(c.schedule.sigma_min < c.schedule.sigma_max, "schedule.sigma_min must be below schedule.sigma_max");
    require(c.eval.sigma_min < c.eval.sigma_max, "eval.sigma_min must be below eval.sigma_max");

    const bool conditional = c.model.oracle || c.model.conditional;
    const bool is_flow = trained && c.model.objective == Objective::flow_matching;
    const auto kind = gs.kind;
    if (kind == GuidanceKind::cfg || kind == GuidanceKind::interval_cfg)
        require(conditional, to_string(kind) + " guidance needs a conditional model (model.conditional = true)");
    if (kind == GuidanceKind::autoguidance) {
        require(trained, "autoguidance needs a trained model with a companion");
        require(c.companion.has_value(), "autoguidance needs a companion section (the degraded model)");
    }
    if (kind == GuidanceKind::classifier) {
        require(gmm_task, "classifier guidance needs a mixture task; the fractal has no exact classifier");
        require(!is_flow, "classifier guidance is available for dsm models only");
        require(*gs.classifier_class < c.n_classes(), "guidance.class is out of range");
    }
    if (c.sample.labels != LabelMode::none)
        require(conditional || kind == GuidanceKind::classifier,
                "sample.labels needs a conditional model or classifier guidance");
    if (c.sample.labels == LabelMode::fixed)
        require(c.sample.fixed_class < c.n_classes(), "sample.class is out of range");
    require(!(sm.contains("class") && c.sample.labels != LabelMode::fixed), "sample.class needs sample.labels = fixed");
    if (gs.uses_sfg() || kind == GuidanceKind::sfg)
        require(gs.sfg.h > 0.0, "guidance.sfg.h must be positive");
    if (!c.sweep.weights.empty()) {
        require(kind != GuidanceKind::none, "sweep needs guidance.kind");
        for (double w : c.sweep.weights) {
            GuidanceSpec probe = gs;
            if (kind != GuidanceKind::sfg && gs.sfg_stack_weight > 0.0)
                probe.sfg_stack_weight = w;
            else
                probe.weight = w;
            try {
                probe.validate();
            } catch (const ConfigError& ex) {
                throw ConfigError("sweep.weights: " + std::string(ex.what()));
            }
        }
    }
    for (std::size_t i = 0; i < c.tiers.size(); ++i)
        for (std::size_t j = i + 1; j < c.tiers.size(); ++j)
            require(c.tiers[i].name != c.tiers[j].name, "duplicate tier name '" + c.tiers[i].name + "'");
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot open config " + path);
    json doc;
    try {
        doc = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config(doc);
}

void apply_env_overrides(json& doc, const std::vector<std::string>& env) {
    static const std::string prefix = "SFG_SET__";
    for (const auto& entry : env) {
        if (entry.rfind(prefix, 0) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = entry.substr(prefix.size(), eq - prefix.size());
        const std::string raw = entry.substr(eq + 1);
        std::vector<std::string> parts;
        for (std::size_t start = 0;;) {
            const auto pos = key.find("__", start);
            parts.push_back(key.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
            if (pos == std::string::npos) break;
            start = pos + 2;
        }
        json* node = &doc;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (parts[i].empty()) throw ConfigError("malformed override " + entry.substr(0, eq));
            if (node->is_null()) *node = json::object();
            if (!node->is_object()) throw ConfigError("override " + entry.substr(0, eq) + " walks into a non-object");
            node = &(*node)[parts[i]];
        }
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        *node = value;
    }
}

json effective_json(const RunConfig& c) {
    json j;
    j["task"] = to_string(c.task);
    j["seed"] = c.seed;
    json data;
    switch (c.task) {
    case Task::simplex:
        data = {{"n_components", c.data.n_components}, {"ambient_dim", c.data.ambient_dim}, {"scale", c.data.scale},
                {"n_train", c.data.n_train}, {"n_test", c.data.n_test}};
        break;
    case Task::two_gaussian:
        data = {{"separation", c.data.separation}, {"base_variance", c.data.base_variance},
                {"ambient_dim", c.data.ambient_dim}, {"n_train", c.data.n_train}};
        break;
    case Task::fractal:
        data = {{"depth", c.data.fractal.depth},           {"branch_angle", c.data.fractal.branch_angle},
                {"shrink_ratio", c.data.fractal.shrink_ratio}, {"jitter_sigma", c.data.fractal.jitter_sigma},
                {"n_classes", c.data.fractal.n_classes},   {"n_train", c.data.n_train}};
        break;
    }
    j["data"] = data;
    if (c.model.oracle) {
        j["model"] = {{"source", "oracle"}};
    } else {
        j["model"] = {{"source", "trained"},
                      {"hidden", c.model.hidden},
                      {"conditional", c.model.conditional},
                      {"embedding_dim", c.model.embedding_dim},
                      {"objective", to_string(c.model.objective)},
                      {"sigma_data", c.model.sigma_data},
                      {"skip", c.model.skip}};
        j["train"] = {{"batches", c.train.batches},       {"batch_size", c.train.batch_size},
                      {"warmup_batches", c.train.warmup_batches}, {"lr", c.train.lr},
                      {"cosine", c.train.cosine},         {"weight_decay", c.train.weight_decay},
                      {"sigma_min", c.train.sigma_min},   {"sigma_max", c.train.sigma_max},
                      {"label_dropout", c.train.label_dropout}, {"ema_decay", c.train.ema_decay}};
        if (c.companion) j["companion"] = {{"hidden", c.companion_architecture().hidden}, {"batches", c.companion_train().batches}};
        if (!c.tiers.empty()) {
            json tiers = json::array();
            for (const auto& t : c.tiers) tiers.push_back({{"name", t.name}, {"hidden", t.hidden}});
            j["tiers"] = tiers;
        }
    }
    json g = {{"kind", to_string(c.guidance.kind)},
              {"weight", c.guidance.weight},
              {"sfg_stack_weight", c.guidance.sfg_stack_weight},
              {"sfg",
               {{"alpha", c.guidance.sfg.alpha0},
                {"h", c.guidance.sfg.h},
                {"sigma_scaled_shift", c.guidance.sfg.sigma_scaled_shift},
                {"corrector_update", c.guidance.sfg.corrector_update}}}};
    if (c.guidance.interval) g["interval"] = {c.guidance.interval->lo, c.guidance.interval->hi};
    if (c.guidance.classifier_class) g["class"] = *c.guidance.classifier_class;
    j["guidance"] = g;
    j["schedule"] = {{"steps", c.schedule.steps},         {"sigma_min", c.schedule.sigma_min},
                     {"sigma_max", c.schedule.sigma_max}, {"rho", c.schedule.rho},
                     {"tau_start", c.schedule.tau_start}};
    const char* label_names[] = {"none", "balanced", "fixed"};
    json sample = {{"n_samples", c.sample.n_samples},
                   {"labels", label_names[static_cast<int>(c.sample.labels)]},
                   {"keep_every", c.sample.keep_every},
                   {"chunk", c.sample.chunk}};
    if (c.sample.labels == LabelMode::fixed) sample["class"] = c.sample.fixed_class;
    j["sample"] = sample;
    j["eval"] = {{"sigma_min", c.eval.sigma_min},       {"sigma_max", c.eval.sigma_max},
                 {"n_sigmas", c.eval.n_sigmas},         {"n_per_region", c.eval.n_per_region},
                 {"n_reference", c.eval.n_reference},   {"outlier_threshold", c.outlier_threshold()},
                 {"field_variances", c.eval.field_variances}, {"field_extent", c.eval.field_extent},
                 {"field_points", c.eval.field_points}};
    if (!c.sweep.weights.empty()) {
        json curves = json::array();
        for (const auto& cv : c.sweep.curves) {
            json o = {{"name", cv.name}};
            if (cv.alpha0) o["alpha"] = *cv.alpha0;
            if (cv.h) o["h"] = *cv.h;
            curves.push_back(o);
        }
        j["sweep"] = {{"weights", c.sweep.weights}, {"curves", curves}};
    }
    return j;
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(effective_json(cfg).dump()); }

} // namespace sfg
