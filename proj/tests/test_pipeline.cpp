#include <cmath>
#include <set>

#include "doctest.h"
#include "lorashear/config.hpp"
#include "lorashear/error.hpp"
#include "lorashear/pipeline.hpp"
#include "run_util.hpp"

using namespace lorashear;
using namespace lorashear::testing;

namespace {

std::string config_error(const nlohmann::json& j) {
    try {
        config_from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

PipelineConfig tiny() { return config_from_json(tiny_config_json()); }

}  // namespace

TEST_CASE("config survives a JSON round trip with defaults materialized") {
    const PipelineConfig c = tiny();
    CHECK(c.model.hidden == 16);
    CHECK(c.model.vocab == 64);
    CHECK(c.recovery.floor == 0.1);
    const auto j = config_to_json(c);
    CHECK(config_to_json(config_from_json(j)) == j);
    CHECK(j.at("schema_version") == 1);
    CHECK(config_to_json(config_from_json(nlohmann::json::object())) == config_to_json(PipelineConfig{}));
}

TEST_CASE("config errors name the offending path") {
    auto j = tiny_config_json();
    j["lhspg"]["mystery"] = 1;
    CHECK(config_error(j).find("config.lhspg.mystery") != std::string::npos);

    j = tiny_config_json();
    j["model"]["hidden"] = "wide";
    CHECK(config_error(j).find("config.model.hidden") != std::string::npos);

    j = tiny_config_json();
    j["recovery"]["optimizer"] = {{"kind", "rmsprop"}};
    CHECK(config_error(j).find("config.recovery.optimizer.kind") != std::string::npos);

    j = tiny_config_json();
    j["model"]["vocab"] = 10;
    CHECK_FALSE(config_error(j).empty());

    j = tiny_config_json();
    j["schema_version"] = 2;
    CHECK_FALSE(config_error(j).empty());

    j = tiny_config_json();
    j["pruning_ratio"] = 1.5;
    CHECK_FALSE(config_error(j).empty());
}

TEST_CASE("stage seeds fan out deterministically") {
    std::set<std::uint64_t> seen;
    for (const char* s : {"model", "lhspg", "recovery", "corpus"}) CHECK(seen.insert(derive_seed(7, s)).second);
    CHECK(derive_seed(7, "lhspg") == derive_seed(7, "lhspg"));
    CHECK(derive_seed(7, "lhspg") != derive_seed(8, "lhspg"));
    const auto a = resolve_seeds(tiny()), b = resolve_seeds(tiny());
    CHECK(a.lhspg.seed == b.lhspg.seed);
    CHECK(a.model.seed != a.recovery.seed);
    CHECK(derive_target(0.2, 72) == 14);
    CHECK(derive_target(0.5, 72) == 36);
}

TEST_CASE("a stage without its predecessor names the missing artifact") {
    const auto out = fresh_dir("missing");
    materialize_config(tiny(), out);
    try {
        run_stage("pretrain", out);
        FAIL("pretrain ran without data");
    } catch (const StageError& e) {
        CHECK(std::string(e.what()).find("gen-data") != std::string::npos);
    }
    run_stage("gen-data", out);
    CHECK_THROWS_AS(run_stage("analyze", out), StageError);
    CHECK_THROWS_AS(run_stage("report", out), StageError);
    CHECK_THROWS_AS(run_stage("bogus", out), ConfigError);
    fs::remove_all(out);
}

TEST_CASE("a different config in the same directory is refused") {
    const auto out = fresh_dir("conflict");
    materialize_config(tiny(), out);
    CHECK_NOTHROW(materialize_config(tiny(), out));
    PipelineConfig other = tiny();
    other.seed = 99;
    CHECK_THROWS_AS(materialize_config(other, out), StageError);
    fs::remove_all(out);
}

TEST_CASE("tampered artifacts are detected downstream") {
    const auto out = fresh_dir("tamper");
    run_all(tiny(), out, "analyze");
    SUBCASE("edited checkpoint") {
        {
            std::fstream f(out / "base.lshr", std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(-3, std::ios::end);
            f.put('\x7f');
        }
        CHECK_THROWS_AS(run_stage("analyze", out), StageError);
    }
    SUBCASE("edited config") {
        auto j = nlohmann::json::parse(slurp(out / "config.json"));
        j["pruning_ratio"] = 0.5;
        write_json(out / "config.json", j);
        CHECK_THROWS_AS(run_stage("prune", out), StageError);
    }
    SUBCASE("deleted manifest") {
        fs::remove(out / "manifests" / "pretrain.json");
        CHECK_THROWS_AS(run_stage("analyze", out), StageError);
    }
    fs::remove_all(out);
}

TEST_CASE("run-all is byte-reproducible and equals the stages run one by one") {
    const auto a = fresh_dir("det_a"), b = fresh_dir("det_b"), c = fresh_dir("det_c");
    run_all(tiny(), a);
    run_all(tiny(), b);
    materialize_config(tiny(), c);
    for (const auto& s : stage_names()) run_stage(s, c);
    const auto ta = tree(a);
    CHECK(ta.size() > 20);
    CHECK(ta == tree(b));
    CHECK(ta == tree(c));

    // rerunning a stage in place gives the same bytes
    run_stage("compress", a);
    CHECK(slurp(a / "compact.lshr") == ta.at("compact.lshr"));

    const auto eval = nlohmann::json::parse(ta.at("eval.json"));
    CHECK(eval.at("compact_vs_pruned_max_ppl_diff").get<double>() <= 1e-9);
    const auto models = eval.at("models");
    for (const auto& [name, ppl] : models.at("pruned").at("val_perplexity").items()) {
        CHECK(std::abs(ppl.get<double>() - models.at("compact").at("val_perplexity").at(name).get<double>()) <= 1e-9);
    }

    const auto prune = nlohmann::json::parse(ta.at("manifests/prune.json")).at("summary");
    const std::size_t k = prune.at("target_zero_groups").get<std::size_t>();
    CHECK(prune.at("zero_groups").get<std::size_t>() == k);
    CHECK(k == derive_target(0.25, prune.at("prunable_groups").get<std::size_t>()));
    CHECK(ta.at("report.md").find("| zero groups | " + std::to_string(k) + " |") != std::string::npos);
    for (const auto* p : {&a, &b, &c}) fs::remove_all(*p);
}
