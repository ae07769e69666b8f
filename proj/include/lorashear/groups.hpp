#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/graph.hpp"
#include "lorashear/model.hpp"

namespace lorashear {

// Primary = output rows of a weight, secondary = input columns.
enum class Axis { kPrimary = 0, kSecondary = 1 };

enum class NodeGroupKind { kBasic, kComposed };

struct NodeGroupMember {
    std::size_t node = 0;
    Axis axis = Axis::kPrimary;
};

// Operators whose structures must be pruned together along the stated axes.
// Basic groups are the channel spaces of the graph; composed groups are LoRA
// spans (their rank axis). A lora_B node is a secondary member of its composed
// group and a primary member of the basic group of its output channels.
struct NodeGroup {
    std::size_t id = 0;
    NodeGroupKind kind = NodeGroupKind::kBasic;
    std::string name;
    std::vector<NodeGroupMember> members;
    bool prunable = false;
    std::string unprunable_reason;
    std::size_t channels = 0;
    std::size_t granularity = 1;

    std::size_t structure_count() const { return prunable ? channels / granularity : 0; }
};

struct NodeGroups {
    std::vector<NodeGroup> groups;

    std::vector<const NodeGroup*> basic() const;
    std::vector<const NodeGroup*> composed() const;
    // Node groups owning at least one prunable structure, in id order.
    std::vector<const NodeGroup*> prunable() const;
};

enum class SliceRole { kFrozen, kLora };

struct Slice {
    std::string tensor;
    Axis axis = Axis::kPrimary;
    std::size_t begin = 0;
    std::size_t end = 0;
    SliceRole role = SliceRole::kFrozen;

    std::size_t width() const { return end - begin; }
    bool operator==(const Slice&) const = default;
};

enum class GroupStatus { kPrunable, kUnprunable, kRedundant, kImportant };

std::string status_name(GroupStatus s);
GroupStatus parse_status(const std::string& s);

// One minimally removal structure: every (tensor, axis, index range) that has
// to disappear together.
struct Group {
    std::size_t id = 0;
    std::size_t node_group = 0;
    std::size_t index = 0;  // head or neuron index within the node group
    std::vector<Slice> slices;
    GroupStatus status = GroupStatus::kPrunable;

    bool prunable() const { return status != GroupStatus::kUnprunable; }
};

struct GroupSet {
    std::vector<Group> groups;

    std::size_t count(GroupStatus s) const;
    std::vector<std::size_t> ids_with(GroupStatus s) const;
    std::vector<std::size_t> prunable_ids() const;
    std::vector<std::size_t> in_node_group(std::size_t node_group) const;
};

NodeGroups discover_node_groups(const TraceGraph& graph, const std::vector<ComposedSpan>& spans);
GroupSet partition_variables(const TraceGraph& graph, const NodeGroups& node_groups);

// Throws AnalysisError when a (tensor, axis, index) appears twice.
void check_disjoint(const GroupSet& set);

// Element access for group slices.
std::size_t slice_numel(const Tensor& t, const Slice& s);
void zero_slice(Tensor& t, const Slice& s);

// Zero every slice of the group in the model.
void zero_group(LoraModel& model, const Group& group);
// True when every frozen slice of the group is exactly zero.
bool group_is_zero(const LoraModel& model, const Group& group);
// Number of frozen elements in the group.
std::size_t frozen_size(const LoraModel& model, const Group& group);

// Frozen slice values concatenated in slice order (row-major within a slice).
// With effective=true every value includes the adaptor term gamma * (B A).
std::vector<double> group_values(const LoraModel& model, const Group& group, bool effective = false);
void set_group_values(LoraModel& model, const Group& group, std::span<const double> values);
// Zero only the LoRA slices (B rows, A columns) of the group.
void zero_group_lora(LoraModel& model, const Group& group);

nlohmann::json node_groups_to_json(const NodeGroups& ng, const TraceGraph& graph);
nlohmann::json group_set_to_json(const GroupSet& set);
GroupSet group_set_from_json(const nlohmann::json& j);

}  // namespace lorashear
