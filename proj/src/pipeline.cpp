#include "lorashear/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lorashear/checkpoint.hpp"
#include "lorashear/compressor.hpp"
#include "lorashear/error.hpp"
#include "lorashear/eval.hpp"
#include "lorashear/graph.hpp"
#include "lorashear/hash.hpp"
#include "lorashear/train.hpp"

namespace lorashear {

using nlohmann::json;

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"gen-data", "pretrain", "analyze", "prune",
                                                   "compress", "recover",  "eval",    "report"};
    return names;
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw StageError("missing artifact " + path.filename().string() + " (" + path.string() + ")");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw StageError("cannot write " + path.string());
    f << text;
    if (!f) throw StageError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

namespace {

constexpr int kSchemaVersion = 1;

std::string config_digest(const fs::path& out) { return sha256_file(out / "config.json"); }

// Bookkeeping for one stage: verifies predecessors and records artifact hashes.
class StageRun {
   public:
    StageRun(fs::path out, std::string stage) : out_(std::move(out)), stage_(std::move(stage)) {
        if (!fs::exists(out_ / "config.json")) {
            throw StageError("missing artifact config.json in " + out_.string() + "; run gen-data first");
        }
        config_ = load_run_config(out_);
        config_sha_ = config_digest(out_);
        fs::remove(manifest_path(stage_));
    }

    const PipelineConfig& config() const { return config_; }
    fs::path path(const std::string& rel) const { return out_ / rel; }

    void require(const std::string& stage) {
        const fs::path mp = manifest_path(stage);
        if (!fs::exists(mp)) {
            throw StageError("missing artifact manifests/" + stage + ".json; run `" + stage + "` before `" + stage_ + "`");
        }
        const json m = read_json(mp);
        if (m.value("schema_version", 0) != kSchemaVersion) throw StageError("manifests/" + stage + ".json: unsupported schema");
        if (m.at("config_sha256") != config_sha_) {
            throw StageError("manifests/" + stage + ".json was produced under a different config.json");
        }
        for (const auto& [rel, sha] : m.at("outputs").items()) {
            if (!fs::exists(out_ / rel)) throw StageError("missing artifact " + rel + " (produced by " + stage + ")");
            if (sha256_file(out_ / rel) != sha.get<std::string>()) {
                throw StageError("artifact " + rel + " changed since " + stage + " produced it");
            }
        }
        inputs_["manifests/" + stage + ".json"] = sha256_file(mp);
        summaries_[stage] = m.at("summary");
    }

    const json& summary_of(const std::string& stage) const { return summaries_.at(stage); }

    void output_json(const std::string& rel, const json& j) {
        write_json(out_ / rel, j);
        outputs_[rel] = sha256_file(out_ / rel);
    }
    void output_text(const std::string& rel, const std::string& text) {
        write_text(out_ / rel, text);
        outputs_[rel] = sha256_file(out_ / rel);
    }
    void output_model(const std::string& rel, const LoraModel& m) {
        save_checkpoint(m, out_ / rel);
        outputs_[rel] = sha256_file(out_ / rel);
    }

    void finish(json summary) {
        const json manifest = {{"schema_version", kSchemaVersion}, {"stage", stage_},      {"config_sha256", config_sha_},
                               {"inputs", inputs_},                {"outputs", outputs_}, {"summary", std::move(summary)}};
        write_json(manifest_path(stage_), manifest);
    }

   private:
    fs::path manifest_path(const std::string& stage) const { return out_ / "manifests" / (stage + ".json"); }

    fs::path out_;
    std::string stage_;
    PipelineConfig config_;
    std::string config_sha_;
    json inputs_ = json::object();
    json outputs_ = json::object();
    std::map<std::string, json> summaries_;
};

SourceTaggedCorpus load_corpus(const StageRun& run) { return corpus_from_json(read_json(run.path("corpus.json"))); }

LoraModel load_model(const StageRun& run, const std::string& rel) { return load_checkpoint(run.path(rel)); }

std::vector<Sequence> first_n(const std::vector<Sequence>& v, std::size_t n) {
    return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

json per_source(const SourceTaggedCorpus& corpus, const std::vector<double>& values) {
    json j = json::object();
    for (std::size_t i = 0; i < corpus.sources.size(); ++i) j[corpus.sources[i].name] = values[i];
    return j;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string jsonl(const std::vector<json>& lines) {
    std::string out;
    for (const auto& l : lines) out += l.dump() + "\n";
    return out;
}

std::string fixed(double v, int digits = 4) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(digits) << v;
    return ss.str();
}

}  // namespace

void materialize_config(const PipelineConfig& config, const fs::path& out) {
    config.validate();
    fs::create_directories(out);
    const std::string text = config_to_json(config).dump(2) + "\n";
    const fs::path p = out / "config.json";
    if (fs::exists(p)) {
        std::ifstream f(p, std::ios::binary);
        std::ostringstream ss;
        ss << f.rdbuf();
        if (ss.str() == text) return;
        throw StageError(p.string() + " holds a different configuration; use a fresh --out directory");
    }
    write_text(p, text);
}

PipelineConfig load_run_config(const fs::path& out) {
    try {
        return config_from_json(read_json(out / "config.json"));
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config.json: ") + e.what());
    }
}

void stage_gen_data(const fs::path& out) {
    StageRun run(out, "gen-data");
    const auto corpus = generate_corpus(run.config().corpus, derive_seed(run.config().seed, "corpus"));
    run.output_json("corpus.json", corpus_to_json(corpus));
    json sizes = json::object();
    for (const auto& s : corpus.sources) {
        sizes[s.name] = {{"phase", phase_name(s.phase)}, {"train", s.train.size()}, {"val", s.val.size()}};
    }
    run.finish({{"sources", sizes}});
}

void stage_pretrain(const fs::path& out) {
    StageRun run(out, "pretrain");
    run.require("gen-data");
    const PipelineConfig cfg = resolve_seeds(run.config());
    const auto corpus = load_corpus(run);
    LoraModel model = build_model(cfg.model);
    const auto data = corpus.all_train();
    TrainConfig tc;
    tc.steps = cfg.pretrain.steps;
    tc.batch = cfg.pretrain.batch;
    tc.lr = cfg.pretrain.lr;
    tc.optimizer = cfg.pretrain.optimizer;
    tc.cosine = cfg.pretrain.cosine;
    tc.seed = derive_seed(cfg.seed, "pretrain");
    std::vector<json> log;
    const auto losses = train(model, Trainable::kBase, data, tc, [&](std::size_t step, double loss) {
        log.push_back({{"step", step}, {"loss", loss}});
    });
    run.output_model("base.lshr", model);
    run.output_text("pretrain_log.jsonl", jsonl(log));
    const auto ppl = source_perplexities(model, corpus);
    run.finish({{"steps", tc.steps},
                {"final_train_loss", losses.empty() ? 0.0 : losses.back()},
                {"parameters", parameter_count(model)},
                {"val_perplexity", per_source(corpus, ppl)}});
}

void stage_analyze(const fs::path& out) {
    StageRun run(out, "analyze");
    run.require("gen-data");
    run.require("pretrain");
    const PipelineConfig& cfg = run.config();
    const auto corpus = load_corpus(run);
    const LoraModel model = load_model(run, "base.lshr");
    const TraceGraph graph = build_trace_graph(model);
    const auto spans = mark_composed_spans(graph);
    const NodeGroups ng = discover_node_groups(graph, spans);
    GroupSet set = partition_variables(graph, ng);
    const auto eval = first_n(corpus.pooled_val(Phase::kPretraining), cfg.knowledge_eval);
    const KnowledgeProfile profile = analyze_knowledge(model, set, ng, cfg.knowledge, eval);
    run.output_json("graph.json", graph_to_json(graph, spans));
    run.output_json("node_groups.json", node_groups_to_json(ng, graph));
    run.output_json("groups.json", group_set_to_json(set));
    run.output_json("knowledge_profile.json", knowledge_profile_to_json(profile));
    run.output_text("knowledge_profile.csv", knowledge_profile_csv(profile));
    run.finish({{"node_groups", ng.groups.size()},
                {"groups", set.groups.size()},
                {"flagged_node_groups", profile.flagged()},
                {"unprunable_groups", set.count(GroupStatus::kUnprunable)},
                {"prunable_groups", set.prunable_ids().size()},
                {"full_perplexity", profile.full_perplexity}});
}

void stage_prune(const fs::path& out) {
    StageRun run(out, "prune");
    run.require("gen-data");
    run.require("pretrain");
    run.require("analyze");
    PipelineConfig cfg = resolve_seeds(run.config());
    const auto corpus = load_corpus(run);
    LoraModel model = load_model(run, "base.lshr");
    GroupSet set = group_set_from_json(read_json(run.path("groups.json")));
    const std::size_t prunable = set.prunable_ids().size();
    cfg.lhspg.target = derive_target(cfg.pruning_ratio, prunable);
    const auto data = corpus.pooled_train(Phase::kPretraining);
    const auto heldout = corpus.pooled_val(Phase::kPretraining);

    std::vector<json> log;
    const LhspgResult res = run_lhspg(model, set, cfg.lhspg, data, [&](const StepRecord& r, const LoraModel&) {
        log.push_back(step_record_to_json(r));
    });
    const LoraModel baseline = one_shot_prune(res.after_warmup, set, cfg.lhspg.target, cfg.lhspg.saliency);
    const double lhspg_loss = mean_loss(model, heldout);
    const double one_shot_loss = mean_loss(baseline, heldout);
    run.output_model("pruned.lshr", model);
    run.output_model("one_shot.lshr", baseline);
    run.output_json("groups_pruned.json", group_set_to_json(set));
    run.output_text("lhspg_log.jsonl", jsonl(log));
    run.finish({{"pruning_ratio", cfg.pruning_ratio},
                {"prunable_groups", prunable},
                {"target_zero_groups", cfg.lhspg.target},
                {"zero_groups", res.zero_groups},
                {"one_shot_zero_groups", count_zero_groups(baseline, set)},
                {"heldout_loss_lhspg", lhspg_loss},
                {"heldout_loss_one_shot", one_shot_loss},
                {"heldout_loss_delta", one_shot_loss - lhspg_loss}});
}

void stage_compress(const fs::path& out) {
    StageRun run(out, "compress");
    run.require("gen-data");
    run.require("prune");
    const auto corpus = load_corpus(run);
    const LoraModel pruned = load_model(run, "pruned.lshr");
    const GroupSet set = group_set_from_json(read_json(run.path("groups_pruned.json")));
    const TraceGraph graph = build_trace_graph(pruned);
    const NodeGroups ng = discover_node_groups(graph, mark_composed_spans(graph));
    const CompressionPlan plan = plan_compression(pruned, set, graph, ng);
    const LoraModel compact = apply_compression(pruned, plan);
    double max_diff = 0.0;
    for (const auto& s : first_n(corpus.all_val(), 32)) {
        std::span<const int> in(s);
        in = in.first(s.size() - 1);
        max_diff = std::max(max_diff, max_abs_diff(forward(pruned, in), forward(compact, in)));
    }
    std::vector<std::size_t> heads, neurons;
    for (const auto& b : compact.blocks) {
        heads.push_back(b.attn.heads());
        neurons.push_back(b.mlp.width());
    }
    run.output_json("plan.json", plan_to_json(plan));
    run.output_model("compact.lshr", compact);
    run.finish({{"removed_groups", plan.removed_groups.size()},
                {"parameters_full", parameter_count(pruned)},
                {"parameters_compact", parameter_count(compact)},
                {"parameters_closed_form", closed_form_parameters(compact.config, heads, neurons)},
                {"heads", heads},
                {"neurons", neurons},
                {"max_logit_diff_vs_pruned", max_diff}});
}

void stage_recover(const fs::path& out) {
    StageRun run(out, "recover");
    run.require("gen-data");
    run.require("pretrain");
    run.require("compress");
    const PipelineConfig cfg = resolve_seeds(run.config());
    const auto corpus = load_corpus(run);
    const LoraModel base = load_model(run, "base.lshr");
    LoraModel compact = load_model(run, "compact.lshr");
    const auto reference = source_perplexities(base, corpus);
    const RecoveryResult res = run_recovery(compact, reference, corpus, cfg.recovery);
    std::vector<json> log;
    for (const auto& r : res.log) log.push_back(round_record_to_json(r));
    run.output_model("recovered.lshr", compact);
    run.output_text("recovery_log.jsonl", jsonl(log));
    run.finish({{"rounds", res.log.size()},
                {"reference_perplexity", per_source(corpus, reference)},
                {"pre_perplexity", per_source(corpus, res.pre_perplexity)},
                {"post_perplexity", per_source(corpus, res.post_perplexity)},
                {"pre_mean_perplexity", res.pre_mean},
                {"post_mean_perplexity", res.post_mean}});
}

void stage_eval(const fs::path& out) {
    StageRun run(out, "eval");
    run.require("gen-data");
    run.require("pretrain");
    run.require("prune");
    run.require("compress");
    run.require("recover");
    const auto corpus = load_corpus(run);
    json models = json::object();
    std::map<std::string, std::vector<double>> ppl;
    for (const std::string name : {"base", "pruned", "one_shot", "compact", "recovered"}) {
        const LoraModel m = load_model(run, name + ".lshr");
        ppl[name] = source_perplexities(m, corpus);
        models[name] = {{"parameters", parameter_count(m)},
                        {"val_perplexity", per_source(corpus, ppl[name])},
                        {"mean_perplexity", mean(ppl[name])}};
    }
    double gap = 0.0;
    for (std::size_t i = 0; i < corpus.sources.size(); ++i) gap = std::max(gap, std::abs(ppl["pruned"][i] - ppl["compact"][i]));
    const json result = {{"schema_version", kSchemaVersion}, {"models", models}, {"compact_vs_pruned_max_ppl_diff", gap}};
    run.output_json("eval.json", result);
    run.finish({{"compact_vs_pruned_max_ppl_diff", gap}});
}

void stage_report(const fs::path& out) {
    StageRun run(out, "report");
    for (const auto& s : {"gen-data", "pretrain", "analyze", "prune", "compress", "recover", "eval"}) run.require(s);
    const PipelineConfig& cfg = run.config();
    const json prune = run.summary_of("prune");
    const json analyze = run.summary_of("analyze");
    const json compress = run.summary_of("compress");
    const json recover = run.summary_of("recover");
    const json eval = read_json(run.path("eval.json"));
    const json profile = read_json(run.path("knowledge_profile.json"));

    std::ostringstream md;
    md << "# Pruning report\n\n";
    md << "Seed " << cfg.seed << ", pruning ratio " << cfg.pruning_ratio << " of prunable groups.\n\n";
    md << "## Headline\n\n";
    md << "Held-out loss, LHSPG minus one-shot baseline: "
       << fixed(prune["heldout_loss_lhspg"].get<double>() - prune["heldout_loss_one_shot"].get<double>()) << "\n\n";
    md << "## Structure\n\n";
    md << "| quantity | value |\n|---|---|\n";
    md << "| node groups | " << analyze["node_groups"] << " |\n";
    md << "| groups | " << analyze["groups"] << " |\n";
    md << "| unprunable after analysis | " << analyze["unprunable_groups"] << " |\n";
    md << "| prunable | " << prune["prunable_groups"] << " |\n";
    md << "| target K | " << prune["target_zero_groups"] << " |\n";
    md << "| zero groups | " << prune["zero_groups"] << " |\n";
    md << "| parameters full | " << compress["parameters_full"] << " |\n";
    md << "| parameters compact | " << compress["parameters_compact"] << " |\n";
    md << "| surviving heads per block | " << compress["heads"].dump() << " |\n";
    md << "| surviving neurons per block | " << compress["neurons"].dump() << " |\n\n";
    md << "## Comparison\n\n";
    md << "| method | ratio | held-out loss | mean val perplexity |\n|---|---|---|---|\n";
    const auto& models = eval["models"];
    md << "| base | 0 | - | " << fixed(models["base"]["mean_perplexity"].get<double>()) << " |\n";
    md << "| one-shot | " << cfg.pruning_ratio << " | " << fixed(prune["heldout_loss_one_shot"].get<double>()) << " | "
       << fixed(models["one_shot"]["mean_perplexity"].get<double>()) << " |\n";
    md << "| LHSPG | " << cfg.pruning_ratio << " | " << fixed(prune["heldout_loss_lhspg"].get<double>()) << " | "
       << fixed(models["pruned"]["mean_perplexity"].get<double>()) << " |\n";
    md << "| LHSPG + recovery | " << cfg.pruning_ratio << " | - | "
       << fixed(models["recovered"]["mean_perplexity"].get<double>()) << " |\n\n";
    md << "## Perplexity by stage\n\n";
    md << "| source | base | one-shot | pruned | compact | recovered |\n|---|---|---|---|---|---|\n";
    for (const auto& [src, v] : models["base"]["val_perplexity"].items()) {
        md << "| " << src << " | " << fixed(v.get<double>());
        for (const std::string m : {"one_shot", "pruned", "compact", "recovered"}) {
            md << " | " << fixed(models[m]["val_perplexity"][src].get<double>());
        }
        md << " |\n";
    }
    md << "\nRecovery rounds: " << recover["rounds"] << ", mean perplexity " << fixed(recover["pre_mean_perplexity"].get<double>())
       << " before, " << fixed(recover["post_mean_perplexity"].get<double>()) << " after.\n\n";
    md << "## Knowledge distribution\n\n";
    md << "Full perplexity on the probe set: " << fixed(profile["full_perplexity"].get<double>()) << "\n\n";
    md << "| node group | name | structures | deviation | rank | unprunable |\n|---|---|---|---|---|---|\n";
    for (const auto& e : profile["node_groups"]) {
        md << "| " << e["node_group"] << " | " << e["name"].get<std::string>() << " | " << e["structures"] << " | "
           << fixed(e["deviation"].get<double>()) << " | " << e["rank"] << " | " << (e["unprunable"].get<bool>() ? "yes" : "no")
           << " |\n";
    }
    md << "\nPlot data: knowledge_profile.csv\n";
    run.output_text("report.md", md.str());
    run.finish({{"zero_groups", prune["zero_groups"]}});
}

void run_stage(const std::string& name, const fs::path& out) {
    if (name == "gen-data") return stage_gen_data(out);
    if (name == "pretrain") return stage_pretrain(out);
    if (name == "analyze") return stage_analyze(out);
    if (name == "prune") return stage_prune(out);
    if (name == "compress") return stage_compress(out);
    if (name == "recover") return stage_recover(out);
    if (name == "eval") return stage_eval(out);
    if (name == "report") return stage_report(out);
    throw ConfigError("unknown stage '" + name + "'");
}

void run_all(const PipelineConfig& config, const fs::path& out, const std::string& last) {
    const auto& names = stage_names();
    if (std::find(names.begin(), names.end(), last) == names.end()) throw ConfigError("unknown stage '" + last + "'");
    materialize_config(config, out);
    for (const auto& n : names) {
        run_stage(n, out);
        if (n == last) break;
    }
}

}  // namespace lorashear
