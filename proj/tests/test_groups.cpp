#include <random>
#include <set>

#include "doctest.h"
#include "erase_oracle.hpp"
#include "lorashear/error.hpp"
#include "lorashear/groups.hpp"
#include "model_util.hpp"
#include "toy_groups_oracle.hpp"

using namespace lorashear;
using namespace lorashear::testing;

namespace {

struct Analysis {
    TraceGraph graph;
    std::vector<ComposedSpan> spans;
    NodeGroups node_groups;
    GroupSet groups;
};

Analysis analyze(const LoraModel& m) {
    Analysis a;
    a.graph = build_trace_graph(m);
    a.spans = mark_composed_spans(a.graph);
    a.node_groups = discover_node_groups(a.graph, a.spans);
    a.groups = partition_variables(a.graph, a.node_groups);
    return a;
}

std::vector<std::pair<std::string, Axis>> params_of(const TraceGraph& g, const NodeGroup& ng) {
    std::vector<std::pair<std::string, Axis>> out;
    for (const auto& m : ng.members) {
        if (!g.node(m.node).param.empty()) out.push_back({g.node(m.node).param, m.axis});
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Slice> sorted_slices(std::vector<Slice> v) {
    std::sort(v.begin(), v.end(), [](const Slice& a, const Slice& b) {
        return std::tie(a.tensor, a.axis, a.begin) < std::tie(b.tensor, b.axis, b.begin);
    });
    return v;
}

TraceGraph lone_linear_graph() {
    TraceGraph g;
    auto add = [&](OpKind k, std::string name, std::vector<std::size_t> in, std::string param, Shape shape) {
        TraceNode n;
        n.id = g.nodes.size();
        n.kind = k;
        n.name = name;
        n.module = "lin";
        n.inputs = std::move(in);
        n.param = std::move(param);
        n.param_shape = std::move(shape);
        g.nodes.push_back(n);
        return n.id;
    };
    const auto x = add(OpKind::kEmbedding, "x", {}, "emb", {10, 6});
    const auto host = add(OpKind::kLinear, "lin", {x}, "lin.weight", {5, 6});
    const auto a = add(OpKind::kLoraA, "lin.lora_A", {x}, "lin.lora_A", {2, 6});
    const auto b = add(OpKind::kLoraB, "lin.lora_B", {a}, "lin.lora_B", {5, 2});
    g.sink = add(OpKind::kAdd, "lin.add", {host, b}, {}, {});
    return g;
}

}  // namespace

TEST_CASE("toy node groups match the hand enumeration") {
    const auto cfg = toy_config();
    const Analysis a = analyze(build_model(cfg));
    const auto expected = expected_toy_basic_groups(cfg.layers, cfg.heads, cfg.mlp_dim);
    const auto basic = a.node_groups.basic();
    REQUIRE(basic.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CAPTURE(expected[i].name);
        CHECK(basic[i]->name == expected[i].name);
        CHECK(basic[i]->prunable == expected[i].prunable);
        CHECK(basic[i]->structure_count() == expected[i].structures);
        CHECK(params_of(a.graph, *basic[i]) == expected[i].params);
    }
    CHECK(basic.front()->unprunable_reason == "hidden,normalized");
    CHECK(basic.back()->unprunable_reason == "vocab");
    CHECK(a.node_groups.composed().size() == 14);
    for (const auto* c : a.node_groups.composed()) {
        CHECK_FALSE(c->prunable);
        CHECK(c->channels == cfg.rank);
    }
}

TEST_CASE("toy model partitions into 136 groups with the expected slices") {
    const auto cfg = toy_config();
    const Analysis a = analyze(build_model(cfg));
    const auto expected = expected_toy_group_slices(cfg.layers, cfg.heads, cfg.head_dim(), cfg.mlp_dim);
    CHECK(expected.size() == 136);
    REQUIRE(a.groups.groups.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CAPTURE(i);
        CHECK(sorted_slices(a.groups.groups[i].slices) == sorted_slices(expected[i]));
        CHECK(a.groups.groups[i].id == i);
    }
}

TEST_CASE("groups are disjoint and cover every prunable tensor axis") {
    const Analysis a = analyze(build_model(toy_config()));
    CHECK_NOTHROW(check_disjoint(a.groups));
    GroupSet dup = a.groups;
    dup.groups[1].slices.push_back(dup.groups[0].slices[0]);
    CHECK_THROWS_AS(check_disjoint(dup), AnalysisError);
}

TEST_CASE("lone LoRA linear: lora_B sits in its composed group and in the output group") {
    const TraceGraph g = lone_linear_graph();
    const auto spans = mark_composed_spans(g);
    const NodeGroups ng = discover_node_groups(g, spans);
    std::size_t hits = 0;
    for (const auto& grp : ng.groups) {
        for (const auto& m : grp.members) hits += (m.node == spans[0].lora_B);
    }
    CHECK(hits == 2);
    const GroupSet set = partition_variables(g, ng);
    REQUIRE(set.groups.size() == 5);
    const std::vector<Slice> g2 = {{"lin.weight", Axis::kPrimary, 2, 3, SliceRole::kFrozen},
                                   {"lin.lora_B", Axis::kPrimary, 2, 3, SliceRole::kLora}};
    CHECK(set.groups[2].slices == g2);
}

TEST_CASE("removing a zeroed group is output-equivalent to physically erasing it") {
    const auto cfg = toy_config(3);
    LoraModel m = build_model(cfg);
    randomize_lora(m, 5);
    const Analysis a = analyze(m);
    std::mt19937_64 rng(17);
    const auto tokens = random_tokens(16, cfg.vocab, rng);
    const std::vector<std::size_t> picks = {0, 3, 5, 40, 67, 68, 71, 100, 135};
    for (auto id : picks) {
        CAPTURE(id);
        LoraModel zeroed = m;
        zero_group(zeroed, a.groups.groups[id]);
        CHECK(group_is_zero(zeroed, a.groups.groups[id]));
        const LoraModel erased = erase_groups(m, a.groups, {id});
        CHECK(max_abs_diff(forward(zeroed, tokens), forward(erased, tokens)) < 1e-9);
    }
    LoraModel zeroed = m;
    for (auto id : picks) zero_group(zeroed, a.groups.groups[id]);
    const LoraModel erased = erase_groups(m, a.groups, picks);
    CHECK(max_abs_diff(forward(zeroed, tokens), forward(erased, tokens)) < 1e-9);
}

TEST_CASE("zeroing only the frozen slices leaves the LoRA path alive") {
    LoraModel m = build_model(toy_config(4));
    randomize_lora(m, 9);
    const Analysis a = analyze(m);
    const Group& g = a.groups.groups[70];
    LoraModel partial = m;
    for (const auto& s : g.slices) {
        if (s.role == SliceRole::kFrozen) zero_slice(*find_tensor(partial, s.tensor), s);
    }
    CHECK(group_is_zero(partial, g));
    merge_lora(partial);
    CHECK_FALSE(group_is_zero(partial, g));
}

TEST_CASE("every group pairs each frozen producer slice with its LoRA slice") {
    const Analysis a = analyze(build_model(toy_config()));
    for (const auto& g : a.groups.groups) {
        std::set<std::string> frozen, lora;
        for (const auto& s : g.slices) {
            const auto base = s.tensor.substr(0, s.tensor.rfind('.'));
            (s.role == SliceRole::kFrozen ? frozen : lora).insert(base);
        }
        CHECK(frozen == lora);
    }
}

TEST_CASE("unclassifiable operators are rejected by name") {
    LoraModel m = build_model(toy_config());
    TraceGraph g = build_trace_graph(m);
    for (auto& n : g.nodes) {
        if (n.kind == OpKind::kMul && n.detail == "gate_up") {
            n.detail = "mystery";
            break;
        }
    }
    const auto spans = mark_composed_spans(g);
    try {
        discover_node_groups(g, spans);
        FAIL("expected AnalysisError");
    } catch (const AnalysisError& e) {
        CHECK(std::string(e.what()).find("mystery") != std::string::npos);
    }
}

TEST_CASE("coverage gaps are reported") {
    const TraceGraph g = lone_linear_graph();
    NodeGroups ng = discover_node_groups(g, mark_composed_spans(g));
    for (auto& grp : ng.groups) {
        if (grp.prunable) grp.channels = 3;
    }
    try {
        partition_variables(g, ng);
        FAIL("expected AnalysisError");
    } catch (const AnalysisError& e) {
        CHECK(std::string(e.what()).find("lin.weight[axis 0][3]") != std::string::npos);
    }
}

TEST_CASE("group set JSON round trip") {
    Analysis a = analyze(build_model(toy_config()));
    a.groups.groups[4].status = GroupStatus::kRedundant;
    a.groups.groups[9].status = GroupStatus::kUnprunable;
    const GroupSet back = group_set_from_json(group_set_to_json(a.groups));
    REQUIRE(back.groups.size() == a.groups.groups.size());
    for (std::size_t i = 0; i < back.groups.size(); ++i) {
        CHECK(back.groups[i].slices == a.groups.groups[i].slices);
        CHECK(back.groups[i].status == a.groups.groups[i].status);
        CHECK(back.groups[i].node_group == a.groups.groups[i].node_group);
    }
    CHECK_THROWS_AS(group_set_from_json(nlohmann::json{{"schema_version", 1}}), FormatError);
    CHECK(node_groups_to_json(a.node_groups, a.graph)["node_groups"].size() == a.node_groups.groups.size());
}

TEST_CASE("model without LoRA still groups, with no composed spans") {
    auto cfg = toy_config();
    cfg.rank = 0;
    const Analysis a = analyze(build_model(cfg));
    CHECK(a.node_groups.composed().empty());
    CHECK(a.groups.groups.size() == 136);
    for (const auto& g : a.groups.groups) {
        for (const auto& s : g.slices) CHECK(s.role == SliceRole::kFrozen);
    }
}
