#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "lorashear/checkpoint.hpp"
#include "lorashear/error.hpp"
#include "lorashear/graph.hpp"
#include "lorashear/groups.hpp"
#include "lorashear/pipeline.hpp"

using namespace lorashear;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kStage = 3, kNumeric = 4 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "run";
    std::string stage = "report";
    std::string checkpoint;
};

PipelineConfig requested_config(const Options& o) {
    PipelineConfig cfg;
    if (!o.config.empty()) {
        try {
            cfg = config_from_json(read_json(o.config));
        } catch (const StageError&) {
            throw ConfigError("cannot read config file " + o.config);
        } catch (const FormatError& e) {
            throw ConfigError(e.what());
        }
    }
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();
    return cfg;
}

// Later stages run under the config materialized by gen-data; flags may only
// restate it.
void check_matches_run(const Options& o) {
    if (o.config.empty() && !o.seed) return;
    const fs::path p = fs::path(o.out) / "config.json";
    if (!fs::exists(p)) throw StageError("missing artifact config.json in " + o.out + "; run gen-data first");
    const PipelineConfig run = load_run_config(o.out);
    PipelineConfig want = o.config.empty() ? run : requested_config(o);
    if (o.seed) want.seed = *o.seed;
    if (config_to_json(want) != config_to_json(run)) {
        throw StageError("--config/--seed differ from " + p.string() + "; use a fresh --out directory");
    }
}

int dispatch(const std::string& command, const Options& o) {
    if (command == "gen-data") {
        materialize_config(requested_config(o), o.out);
        stage_gen_data(o.out);
    } else if (command == "run-all") {
        run_all(requested_config(o), o.out, o.stage);
    } else if (command == "graph" || command == "groups") {
        const LoraModel m = load_checkpoint(o.checkpoint);
        const TraceGraph g = build_trace_graph(m);
        const auto spans = mark_composed_spans(g);
        if (command == "graph") {
            std::cout << graph_to_json(g, spans).dump(2) << "\n";
        } else {
            const NodeGroups ng = discover_node_groups(g, spans);
            const GroupSet set = partition_variables(g, ng);
            nlohmann::json j = {{"node_groups", node_groups_to_json(ng, g)}, {"groups", group_set_to_json(set)}};
            std::cout << j.dump(2) << "\n";
        }
        return kOk;
    } else {
        check_matches_run(o);
        run_stage(command, o.out);
    }
    std::cout << command << ": ok (" << o.out << ")\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structured pruning pipeline for LoRA-adapted toy transformers"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Pipeline config JSON (defaults when omitted)");
        sub->add_option("--seed", seed, "Run seed, overrides the config");
        sub->add_option("--out", o.out, "Run directory")->capture_default_str();
    };
    for (const auto& name : stage_names()) {
        add_common(app.add_subcommand(name, "Run the " + name + " stage"));
    }
    auto* all = app.add_subcommand("run-all", "Run every stage in order");
    add_common(all);
    all->add_option("--stage", o.stage, "Stop after this stage")->capture_default_str();
    for (const std::string name : {"graph", "groups"}) {
        auto* sub = app.add_subcommand(name, "Dump the " + name + " of a checkpoint as JSON");
        sub->add_option("checkpoint", o.checkpoint, "Checkpoint file")->required();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    const auto* seed_opt = app.get_subcommands().front()->get_option_no_throw("--seed");
    if (seed_opt && seed_opt->count()) o.seed = seed;

    try {
        return dispatch(command, o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const StageError& e) {
        std::cerr << "stage error: " << e.what() << "\n";
        return kStage;
    } catch (const FormatError& e) {
        std::cerr << "stage error: " << e.what() << "\n";
        return kStage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInternal;
    }
}
