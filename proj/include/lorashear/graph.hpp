#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/model.hpp"

namespace lorashear {

enum class OpKind { kLinear, kLoraA, kLoraB, kAdd, kMul, kRmsnorm, kSoftmax, kSilu, kEmbedding, kHead, kReshape };

std::string op_kind_name(OpKind kind);
OpKind parse_op_kind(const std::string& name);

// One operator of the trace graph. `detail` disambiguates operators of the
// same kind ("qk", "av", "gate_up" for mul; "split_heads"/"merge_heads" for
// reshape; "token"/"position" for embedding; "lora"/"residual"/"embed" for add).
struct TraceNode {
    std::size_t id = 0;
    OpKind kind = OpKind::kAdd;
    std::string name;
    std::string module;
    std::string param;  // empty when the operator has no parameter
    Shape param_shape;
    std::string detail;
    std::vector<std::size_t> inputs;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    double scale = 1.0;
};

struct TraceGraph {
    std::vector<TraceNode> nodes;
    // Module path ("model", "blocks", "blocks.0", "blocks.0.attn", ...) to the
    // ids of the operators it contains, transitively.
    std::map<std::string, std::vector<std::size_t>> module_tree;
    std::size_t sink = 0;

    std::vector<std::pair<std::size_t, std::size_t>> edges() const;
    std::vector<std::vector<std::size_t>> consumers() const;
    // Kahn order, smallest ready id first; throws StructureError on a cycle.
    std::vector<std::size_t> topological_order() const;
    const TraceNode& node(std::size_t id) const { return nodes.at(id); }
};

// A LoRA adaptor attached to a host linear: lora_A then lora_B, treated as a
// single pruning entity.
struct ComposedSpan {
    std::string path;
    std::size_t host = 0;
    std::size_t lora_A = 0;
    std::size_t lora_B = 0;
    std::vector<std::size_t> nodes() const { return {lora_A, lora_B}; }
};

TraceGraph build_trace_graph(const LoraModel& model);
std::vector<ComposedSpan> mark_composed_spans(const TraceGraph& graph);

// Evaluate the graph operator by operator in topological order.
Tensor execute_graph(const TraceGraph& graph, const LoraModel& model, std::span<const int> tokens);

nlohmann::json graph_to_json(const TraceGraph& graph, const std::vector<ComposedSpan>& spans);

}  // namespace lorashear
