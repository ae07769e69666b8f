#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>

#include "doctest.h"
#include "eval_oracle.hpp"
#include "lorashear/error.hpp"
#include "lorashear/eval.hpp"
#include "lorashear/hash.hpp"
#include "lorashear/knowledge.hpp"
#include "model_util.hpp"

using namespace lorashear;
using namespace lorashear::testing;

namespace {

struct Setup {
    LoraModel model;
    TraceGraph graph;
    NodeGroups node_groups;
    GroupSet set;
    std::vector<Sequence> eval;
};

Setup setup(ModelConfig cfg, std::uint64_t seed = 3) {
    Setup s;
    s.model = build_model(cfg);
    randomize_lora(s.model, seed + 1);
    s.graph = build_trace_graph(s.model);
    s.node_groups = discover_node_groups(s.graph, mark_composed_spans(s.graph));
    s.set = partition_variables(s.graph, s.node_groups);
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 6; ++i) s.eval.push_back(random_tokens(cfg.max_seq + 1, cfg.vocab, rng));
    return s;
}

// Zero-and-evaluate reference: saliency from explicit effective weights.
double oracle_deviation(const Setup& s, std::size_t node_group, const std::vector<double>& ratios) {
    const double full = oracle_perplexity(s.model, s.eval);
    LoraModel m = s.model;
    std::vector<std::pair<double, std::size_t>> scored;
    for (const auto& g : s.set.groups) {
        if (g.node_group != node_group) continue;
        double ss = 0.0;
        std::size_t n = 0;
        for (const auto& sl : g.slices) {
            if (sl.role != SliceRole::kFrozen) continue;
            const std::string path = sl.tensor.substr(0, sl.tensor.rfind('.'));
            Tensor w;
            for (auto& nl : lora_linears(m)) {
                if (nl.path == path) w = nl.linear->effective_weight();
            }
            for (std::size_t r = 0; r < w.rows(); ++r)
                for (std::size_t c = 0; c < w.cols(); ++c) {
                    const std::size_t idx = sl.axis == Axis::kPrimary ? r : c;
                    if (idx >= sl.begin && idx < sl.end) {
                        ss += w.at(r, c) * w.at(r, c);
                        ++n;
                    }
                }
        }
        scored.push_back({std::sqrt(ss / static_cast<double>(n)), g.id});
    }
    std::sort(scored.begin(), scored.end());
    double total = 0.0;
    for (double p : ratios) {
        LoraModel probe = s.model;
        const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(scored.size()) + 1e-12));
        for (std::size_t i = 0; i < k; ++i) {
            for (const auto& sl : s.set.groups[scored[i].second].slices) {
                Tensor& t = *find_tensor(probe, sl.tensor);
                for (std::size_t r = 0; r < t.rows(); ++r)
                    for (std::size_t c = 0; c < t.cols(); ++c) {
                        const std::size_t idx = sl.axis == Axis::kPrimary ? r : c;
                        if (idx >= sl.begin && idx < sl.end) t.at(r, c) = 0.0;
                    }
            }
        }
        total += oracle_perplexity(probe, s.eval) - full;
    }
    return total / static_cast<double>(ratios.size());
}

ModelConfig many_blocks() {
    ModelConfig c = tiny_config(5);
    c.vocab = 16;
    c.layers = 8;
    return c;
}

}  // namespace

TEST_CASE("probing with ratio zero gives exactly zero deviation") {
    Setup s = setup(tiny_config());
    const double full = perplexity(s.model, s.eval);
    const std::vector<double> ratios = {0.0};
    for (const auto* ng : s.node_groups.prunable()) {
        const auto r = probe_deviation(s.model, s.set, ng->id, ratios, s.eval, full, effective_l2_saliency);
        CHECK(r.deviation == 0.0);
    }
}

TEST_CASE("a node group behind a dead path has zero deviation") {
    Setup s = setup(tiny_config());
    auto& down = s.model.blocks[0].mlp.down;
    down.weight.fill(0.0);
    down.lora_B.fill(0.0);
    const double full = perplexity(s.model, s.eval);
    std::size_t mlp0 = 0;
    for (const auto* ng : s.node_groups.prunable()) {
        if (ng->name == "blocks.0.mlp") mlp0 = ng->id;
    }
    const std::vector<double> ratios = {0.25, 0.5, 1.0};
    const auto r = probe_deviation(s.model, s.set, mlp0, ratios, s.eval, full, effective_l2_saliency);
    CHECK(r.deviation == 0.0);
}

TEST_CASE("deviations match the zero-and-evaluate oracle") {
    Setup s = setup(tiny_config());
    const std::vector<double> ratios = {0.25, 0.5};
    const double full = perplexity(s.model, s.eval);
    for (const auto* ng : s.node_groups.prunable()) {
        CAPTURE(ng->name);
        const auto r = probe_deviation(s.model, s.set, ng->id, ratios, s.eval, full, effective_l2_saliency);
        CHECK(r.deviation == doctest::Approx(oracle_deviation(s, ng->id, ratios)).epsilon(1e-9));
    }
}

TEST_CASE("every probe restores the model bit-exactly") {
    Setup s = setup(toy_config(2));
    const std::string before = model_hash(s.model);
    KnowledgeConfig kc;
    const auto profile = analyze_knowledge(s.model, s.set, s.node_groups, kc, s.eval);
    CHECK(model_hash(s.model) == before);
    REQUIRE(profile.entries.size() == 4);
    for (const auto& e : profile.entries) {
        CHECK(e.hash_before == before);
        CHECK(e.hash_after == e.hash_before);
    }
}

TEST_CASE("a restore that leaves a trace is a corruption error") {
    Setup s = setup(tiny_config());
    const double full = perplexity(s.model, s.eval);
    const std::vector<double> ratios = {0.5};
    const auto id = s.node_groups.prunable().front()->id;
    CHECK_THROWS_AS(probe_deviation(s.model, s.set, id, ratios, s.eval, full, effective_l2_saliency,
                                    [](LoraModel& m) { m.final_norm[0] += 1e-12; }),
                    CorruptionError);
}

TEST_CASE("flagging follows ceil(gamma * n) on the largest deviations") {
    Setup s = setup(many_blocks());
    REQUIRE(s.node_groups.prunable().size() == 16);
    SUBCASE("gamma 0 flags nothing") {
        KnowledgeConfig kc;
        kc.gamma_unprunable = 0.0;
        const auto p = analyze_knowledge(s.model, s.set, s.node_groups, kc, s.eval);
        CHECK(p.flagged() == 0);
        CHECK(s.set.count(GroupStatus::kUnprunable) == 0);
    }
    SUBCASE("gamma 0.25 flags the four largest") {
        KnowledgeConfig kc;
        kc.gamma_unprunable = 0.25;
        const auto p = analyze_knowledge(s.model, s.set, s.node_groups, kc, s.eval);
        CHECK(p.flagged() == 4);
        std::vector<double> devs;
        for (const auto& e : p.entries) devs.push_back(e.deviation);
        std::sort(devs.rbegin(), devs.rend());
        std::size_t expected_groups = 0;
        for (const auto& e : p.entries) {
            CHECK(e.unprunable == (e.deviation >= devs[3]));
            if (e.unprunable) expected_groups += e.structures;
        }
        CHECK(s.set.count(GroupStatus::kUnprunable) == expected_groups);
    }
}

TEST_CASE("probe order and thread count do not change the profile") {
    Setup s = setup(toy_config(4));
    const double full = perplexity(s.model, s.eval);
    const std::vector<double> ratios = {0.25, 0.5};
    std::vector<double> fwd, rev;
    const auto ngs = s.node_groups.prunable();
    for (const auto* ng : ngs) fwd.push_back(probe_deviation(s.model, s.set, ng->id, ratios, s.eval, full, effective_l2_saliency).deviation);
    for (auto it = ngs.rbegin(); it != ngs.rend(); ++it)
        rev.insert(rev.begin(), probe_deviation(s.model, s.set, (*it)->id, ratios, s.eval, full, effective_l2_saliency).deviation);
    CHECK(fwd == rev);

    KnowledgeConfig kc;
    GroupSet a = s.set, b = s.set;
    setenv("LORASHEAR_THREADS", "1", 1);
    const auto pa = knowledge_profile_to_json(analyze_knowledge(s.model, a, s.node_groups, kc, s.eval));
    setenv("LORASHEAR_THREADS", "3", 1);
    const auto pb = knowledge_profile_to_json(analyze_knowledge(s.model, b, s.node_groups, kc, s.eval));
    unsetenv("LORASHEAR_THREADS");
    CHECK(pa.dump() == pb.dump());
}

TEST_CASE("knowledge analysis rejects bad inputs") {
    Setup s = setup(tiny_config());
    KnowledgeConfig kc;
    std::vector<Sequence> empty;
    CHECK_THROWS_AS(analyze_knowledge(s.model, s.set, s.node_groups, kc, empty), ConfigError);
    kc.gamma_unprunable = 1.0;
    CHECK_THROWS_AS(analyze_knowledge(s.model, s.set, s.node_groups, kc, s.eval), ConfigError);
}

TEST_CASE("profile CSV has one row per probed node group") {
    Setup s = setup(tiny_config());
    KnowledgeConfig kc;
    const auto p = analyze_knowledge(s.model, s.set, s.node_groups, kc, s.eval);
    const std::string csv = knowledge_profile_csv(p);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(p.entries.size() + 1));
    CHECK(csv.rfind("node_group,name,structures,deviation,rank,unprunable\n", 0) == 0);
}
