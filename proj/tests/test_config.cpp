#include <doctest.h>

#include "helpers.hpp"
#include "sfg/config.hpp"

using namespace sfg;
using nlohmann::json;

namespace {

void rejects(const json& doc, const std::string& fragment) {
    try {
        parse_config(doc);
        FAIL("accepted: " << doc.dump());
    } catch (const ConfigError& e) {
        CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
}

} // namespace

TEST_CASE("defaults") {
    const RunConfig c = parse_config(json{{"task", "simplex"}});
    CHECK(c.data.n_components == 16);
    CHECK(c.data.ambient_dim == 256);
    CHECK(c.data.scale == 0.2);
    CHECK(c.data.n_train == 1000);
    CHECK(c.train.batches == 30000);
    CHECK(c.train.batch_size == 200);
    CHECK(c.train.warmup_batches == 500);
    CHECK(c.train.lr == 1e-3);
    CHECK(c.train.weight_decay == 1e-5);
    CHECK(c.schedule.steps == 100);
    CHECK(c.guidance.kind == GuidanceKind::none);
    CHECK(c.guidance.sfg.alpha0 == 1.0);
    CHECK(c.guidance.sfg.h == 0.1);
    CHECK(c.outlier_threshold() == 16.0 + 3.0);  // sqrt(256) + 3
    const RunConfig f = parse_config(json{{"task", "fractal"}});
    CHECK(f.data.fractal.depth == 8);
    CHECK(f.outlier_threshold() == doctest::Approx(0.015));
    const RunConfig t = parse_config(json{{"task", "two_gaussian"}});
    CHECK(t.data.ambient_dim == 2);
    CHECK(t.n_classes() == 2);
}

TEST_CASE("schema violations") {
    rejects(json::object(), "task");
    rejects(json{{"task", "mnist"}}, "task");
    rejects(json{{"task", "simplex"}, {"colour", 1}}, "unknown key 'colour'");
    rejects(json{{"task", "simplex"}, {"train", {{"batches", 0}}}}, "train.batches");
    rejects(json{{"task", "simplex"}, {"train", {{"lr", "fast"}}}}, "train.lr");
    rejects(json{{"task", "simplex"}, {"tiers", {{{"name", "a b"}, {"hidden", {8}}}}}}, "tiers[0].name");
    rejects(json{{"task", "fractal"}, {"data", {{"shrink_ratio", 1.0}}}}, "shrink_ratio");
}

TEST_CASE("cross-field rules") {
    rejects(json{{"task", "fractal"}, {"model", {{"source", "oracle"}}}}, "oracle");
    rejects(json{{"task", "fractal"}, {"data", {{"n_components", 4}}}}, "n_components");
    rejects(json{{"task", "simplex"}, {"guidance", {{"kind", "cfg"}, {"weight", 2}}}}, "conditional");
    rejects(json{{"task", "simplex"}, {"guidance", {{"kind", "autoguidance"}, {"weight", 2}}}}, "companion");
    rejects(json{{"task", "fractal"}, {"model", {{"conditional", true}}}, {"guidance", {{"kind", "classifier"}, {"class", 0}}}},
            "mixture");
    rejects(json{{"task", "two_gaussian"}, {"guidance", {{"kind", "classifier"}, {"class", 5}}}}, "class");
    rejects(json{{"task", "two_gaussian"}, {"sample", {{"labels", "balanced"}}}}, "labels");
    rejects(json{{"task", "simplex"}, {"data", {{"n_components", 20}, {"ambient_dim", 8}}}}, "n_components");
    rejects(json{{"task", "simplex"}, {"guidance", {{"kind", "interval_cfg"}, {"weight", 2}}}, {"model", {{"conditional", true}}}},
            "interval");
    rejects(json{{"task", "simplex"}, {"tiers", {{{"name", "S"}, {"hidden", {8}}}, {{"name", "S"}, {"hidden", {9}}}}}},
            "duplicate");
    rejects(json{{"task", "simplex"}, {"guidance", {{"kind", "cfg"}, {"weight", 2}}}, {"model", {{"conditional", true}}},
                 {"sweep", {{"weights", {0.5, 2.0}}}}},
            "sweep.weights");
    rejects(json{{"task", "simplex"}, {"schedule", {{"sigma_min", 5}, {"sigma_max", 1}}}}, "schedule.sigma_min");
    CHECK_NOTHROW(parse_config(json{{"task", "two_gaussian"},
                                    {"model", {{"source", "oracle"}}},
                                    {"guidance", {{"kind", "cfg"}, {"weight", 3}}}}));
}

TEST_CASE("env overrides") {
    json doc = {{"task", "simplex"}, {"train", {{"batches", 10}, {"warmup_batches", 0}}}};
    apply_env_overrides(doc, {"SFG_SET__train__batches=20", "SFG_SET__guidance__kind=sfg", "SFG_SET__guidance__weight=2.5",
                              "SFG_SET__model__hidden=[16,16]", "HOME=/root", "SFG_SEED=4"});
    CHECK(doc["train"]["batches"] == 20);
    CHECK(doc["guidance"]["kind"] == "sfg");
    CHECK(doc["guidance"]["weight"] == 2.5);
    CHECK(doc["model"]["hidden"] == json::array({16, 16}));
    CHECK_FALSE(doc.contains("seed"));
    const RunConfig c = parse_config(doc);
    CHECK(c.guidance.weight == 2.5);
    json bad = {{"task", "simplex"}};
    CHECK_THROWS_AS(apply_env_overrides(bad, {"SFG_SET__task__x=1"}), ConfigError);
    CHECK_THROWS_AS(apply_env_overrides(bad, {"SFG_SET__a____b=1"}), ConfigError);
}

TEST_CASE("effective config and hash") {
    const RunConfig a = parse_config(json{{"task", "simplex"}, {"seed", 3}, {"threads", 4}, {"out", "x"}});
    const RunConfig b = parse_config(json{{"task", "simplex"}, {"seed", 3}, {"train", {{"batches", 30000}}}});
    CHECK(config_hash(a) == config_hash(b));  // threads/out do not count, defaults are explicit
    const RunConfig c = parse_config(json{{"task", "simplex"}, {"seed", 4}});
    CHECK(config_hash(a) != config_hash(c));
    CHECK(config_hash(a).size() == 64u);
    // the effective config is itself a valid config that parses to the same hash
    CHECK(config_hash(parse_config(effective_json(a))) == config_hash(a));
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("embedded schema equals the published file") {
    const auto text = test::read_file(std::filesystem::path(SFG_SOURCE_DIR) / "docs/run_config.schema.json");
    CHECK(json::parse(text) == run_config_schema());
}

TEST_CASE("shipped example configs parse") {
    int n = 0;
    for (const auto& e : std::filesystem::directory_iterator(std::filesystem::path(SFG_SOURCE_DIR) / "configs")) {
        if (e.path().extension() != ".json") continue;
        CHECK_NOTHROW(load_config(e.path().string()));
        ++n;
    }
    CHECK(n >= 4);
}

TEST_CASE("config files") {
    const auto dir = test::scratch_dir("config");
    test::write_text_file(dir / "ok.json", R"({"task": "two_gaussian"})");
    test::write_text_file(dir / "bad.json", R"({"task": )");
    CHECK(load_config((dir / "ok.json").string()).task == Task::two_gaussian);
    CHECK_THROWS_AS(load_config((dir / "bad.json").string()), ConfigError);
    CHECK_THROWS_AS(load_config((dir / "none.json").string()), MissingArtifact);
}
