#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/graph.hpp"
#include "lorashear/groups.hpp"

namespace lorashear {

struct TensorPlan {
    Shape original;
    std::vector<std::size_t> keep_rows;  // strictly increasing
    std::vector<std::size_t> keep_cols;
};

struct BlockPlan {
    std::vector<std::size_t> keep_heads;    // positions into the current kept_heads list
    std::vector<std::size_t> keep_neurons;  // positions into the current kept_neurons list
};

struct CompressionPlan {
    std::vector<std::size_t> removed_groups;
    std::map<std::string, TensorPlan> tensors;  // only tensors that shrink
    std::vector<BlockPlan> blocks;

    bool identity() const { return tensors.empty(); }
};

// Pass 1 removes output rows of every producer in a node group for the
// redundant groups' channels; pass 2 removes the matching input columns of the
// group's consumers (host weights and lora_A). Throws PlanError when a
// redundant group's slices disagree with the propagated removals.
CompressionPlan plan_compression(const LoraModel& model, const GroupSet& set, const TraceGraph& graph,
                                 const NodeGroups& node_groups);

LoraModel apply_compression(const LoraModel& model, const CompressionPlan& plan);

// Closed-form parameter count for a model with the given surviving heads and
// neurons per block.
std::size_t closed_form_parameters(const ModelConfig& config, const std::vector<std::size_t>& heads,
                                   const std::vector<std::size_t>& neurons);

nlohmann::json plan_to_json(const CompressionPlan& plan);
CompressionPlan plan_from_json(const nlohmann::json& j);

}  // namespace lorashear
