#include "lorashear/groups.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "lorashear/error.hpp"

namespace lorashear {

std::vector<const NodeGroup*> NodeGroups::basic() const {
    std::vector<const NodeGroup*> out;
    for (const auto& g : groups) {
        if (g.kind == NodeGroupKind::kBasic) out.push_back(&g);
    }
    return out;
}

std::vector<const NodeGroup*> NodeGroups::composed() const {
    std::vector<const NodeGroup*> out;
    for (const auto& g : groups) {
        if (g.kind == NodeGroupKind::kComposed) out.push_back(&g);
    }
    return out;
}

std::vector<const NodeGroup*> NodeGroups::prunable() const {
    std::vector<const NodeGroup*> out;
    for (const auto& g : groups) {
        if (g.structure_count() > 0) out.push_back(&g);
    }
    return out;
}

std::string status_name(GroupStatus s) {
    switch (s) {
        case GroupStatus::kPrunable: return "prunable";
        case GroupStatus::kUnprunable: return "unprunable";
        case GroupStatus::kRedundant: return "redundant";
        case GroupStatus::kImportant: return "important";
    }
    return "?";
}

GroupStatus parse_status(const std::string& s) {
    for (auto st : {GroupStatus::kPrunable, GroupStatus::kUnprunable, GroupStatus::kRedundant, GroupStatus::kImportant}) {
        if (status_name(st) == s) return st;
    }
    throw FormatError("unknown group status '" + s + "'");
}

std::size_t GroupSet::count(GroupStatus s) const {
    return static_cast<std::size_t>(std::count_if(groups.begin(), groups.end(), [s](const Group& g) { return g.status == s; }));
}

std::vector<std::size_t> GroupSet::ids_with(GroupStatus s) const {
    std::vector<std::size_t> out;
    for (const auto& g : groups) {
        if (g.status == s) out.push_back(g.id);
    }
    return out;
}

std::vector<std::size_t> GroupSet::prunable_ids() const {
    std::vector<std::size_t> out;
    for (const auto& g : groups) {
        if (g.prunable()) out.push_back(g.id);
    }
    return out;
}

std::vector<std::size_t> GroupSet::in_node_group(std::size_t node_group) const {
    std::vector<std::size_t> out;
    for (const auto& g : groups) {
        if (g.node_group == node_group) out.push_back(g.id);
    }
    return out;
}

namespace {

class Dsu {
   public:
    explicit Dsu(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

   private:
    std::vector<std::size_t> parent_;
};

bool consumes_input_columns(OpKind k) { return k == OpKind::kLinear || k == OpKind::kLoraA || k == OpKind::kHead; }

std::string common_module(const std::vector<std::string>& modules) {
    if (modules.empty()) return "model";
    auto split = [](const std::string& s) {
        std::vector<std::string> parts;
        std::stringstream ss(s);
        std::string p;
        while (std::getline(ss, p, '.')) parts.push_back(p);
        return parts;
    };
    std::vector<std::string> prefix = split(modules[0]);
    for (std::size_t i = 1; i < modules.size(); ++i) {
        const auto parts = split(modules[i]);
        std::size_t k = 0;
        while (k < prefix.size() && k < parts.size() && prefix[k] == parts[k]) ++k;
        prefix.resize(k);
    }
    if (prefix.empty()) return "model";
    std::string out = prefix[0];
    for (std::size_t i = 1; i < prefix.size(); ++i) out += "." + prefix[i];
    return out;
}

}  // namespace

NodeGroups discover_node_groups(const TraceGraph& graph, const std::vector<ComposedSpan>& spans) {
    const std::size_t n = graph.nodes.size();
    Dsu dsu(n);
    std::vector<std::set<std::string>> reasons(n);
    std::vector<std::size_t> head_dim(n, 0);

    for (auto id : graph.topological_order()) {
        const TraceNode& node = graph.node(id);
        auto unite_inputs = [&]() {
            for (auto in : node.inputs) dsu.unite(id, in);
        };
        switch (node.kind) {
            case OpKind::kEmbedding:
                reasons[id].insert("hidden");
                break;
            case OpKind::kAdd:
            case OpKind::kSilu:
            case OpKind::kSoftmax:
                unite_inputs();
                break;
            case OpKind::kMul:
                if (node.detail != "qk" && node.detail != "av" && node.detail != "gate_up") {
                    throw AnalysisError("cannot classify mul node '" + node.name + "' (detail '" + node.detail + "')");
                }
                unite_inputs();
                break;
            case OpKind::kReshape:
                if (node.detail == "split_heads") {
                    head_dim[id] = node.head_dim;
                } else if (node.detail != "merge_heads") {
                    throw AnalysisError("cannot classify reshape node '" + node.name + "' (detail '" + node.detail +
                                        "')");
                }
                unite_inputs();
                break;
            case OpKind::kRmsnorm:
                unite_inputs();
                reasons[id].insert("normalized");
                break;
            case OpKind::kLoraA:
                reasons[id].insert("rank");
                break;
            case OpKind::kHead:
                reasons[id].insert("vocab");
                break;
            case OpKind::kLinear:
            case OpKind::kLoraB:
                break;
            default:
                throw AnalysisError("cannot classify node '" + node.name + "'");
        }
    }

    struct Space {
        std::vector<NodeGroupMember> members;
        std::set<std::string> reasons;
        std::size_t head_dim = 0;
        bool parameterized = false;
        bool rank = false;
    };
    std::map<std::size_t, Space> spaces;
    for (const auto& node : graph.nodes) {
        auto& sp = spaces[dsu.find(node.id)];
        sp.members.push_back({node.id, Axis::kPrimary});
        sp.reasons.insert(reasons[node.id].begin(), reasons[node.id].end());
        if (head_dim[node.id]) sp.head_dim = head_dim[node.id];
        if (!node.param.empty()) sp.parameterized = true;
        if (node.kind == OpKind::kLoraA) sp.rank = true;
    }
    for (const auto& node : graph.nodes) {
        if (!consumes_input_columns(node.kind) && node.kind != OpKind::kLoraB) continue;
        auto& sp = spaces[dsu.find(node.inputs.at(0))];
        sp.members.push_back({node.id, Axis::kSecondary});
        sp.parameterized = true;
    }

    NodeGroups out;
    for (auto& [root, sp] : spaces) {
        if (sp.rank || !sp.parameterized) continue;
        NodeGroup g;
        g.kind = NodeGroupKind::kBasic;
        std::sort(sp.members.begin(), sp.members.end(), [](const auto& a, const auto& b) {
            return a.node != b.node ? a.node < b.node : a.axis < b.axis;
        });
        g.members = sp.members;
        std::vector<std::string> modules;
        for (const auto& m : g.members) modules.push_back(graph.node(m.node).module);
        g.name = common_module(modules);
        if (!sp.reasons.empty()) {
            g.prunable = false;
            for (const auto& r : sp.reasons) g.unprunable_reason += (g.unprunable_reason.empty() ? "" : ",") + r;
        } else {
            g.prunable = true;
        }
        std::size_t channels = 0;
        for (const auto& m : g.members) {
            const auto& node = graph.node(m.node);
            const bool weight = node.kind == OpKind::kLinear || node.kind == OpKind::kHead ||
                                (node.kind == OpKind::kLoraB && m.axis == Axis::kPrimary) ||
                                (node.kind == OpKind::kLoraA && m.axis == Axis::kSecondary);
            if (!weight) continue;
            const std::size_t c = m.axis == Axis::kPrimary ? node.param_shape[0] : node.param_shape[1];
            if (channels && c != channels) {
                throw AnalysisError("node group '" + g.name + "': inconsistent channel count at node '" + node.name +
                                    "'");
            }
            channels = c;
        }
        g.channels = channels;
        g.granularity = sp.head_dim ? sp.head_dim : 1;
        if (g.prunable && channels % g.granularity != 0) {
            throw AnalysisError("node group '" + g.name + "': channels not divisible by head size");
        }
        out.groups.push_back(std::move(g));
    }
    std::sort(out.groups.begin(), out.groups.end(),
              [](const NodeGroup& a, const NodeGroup& b) { return a.members.front().node < b.members.front().node; });

    for (const auto& s : spans) {
        NodeGroup g;
        g.kind = NodeGroupKind::kComposed;
        g.name = s.path + ".lora";
        g.members = {{s.lora_A, Axis::kPrimary}, {s.lora_B, Axis::kSecondary}};
        g.prunable = false;
        g.unprunable_reason = "rank";
        const auto& a = graph.node(s.lora_A);
        g.channels = a.param_shape.empty() ? 0 : a.param_shape[0];
        out.groups.push_back(std::move(g));
    }
    std::set<std::size_t> covered_rank;
    for (const auto& s : spans) covered_rank.insert(s.lora_A);
    for (const auto& node : graph.nodes) {
        if (node.kind == OpKind::kLoraA && !covered_rank.contains(node.id)) {
            throw AnalysisError("lora_A node '" + node.name + "' is not part of any composed span");
        }
    }
    for (std::size_t i = 0; i < out.groups.size(); ++i) out.groups[i].id = i;
    return out;
}

GroupSet partition_variables(const TraceGraph& graph, const NodeGroups& node_groups) {
    GroupSet set;
    // (tensor, axis) -> covered flags, for prunable tensors only.
    std::map<std::pair<std::string, int>, std::vector<bool>> coverage;
    for (const auto& ng : node_groups.groups) {
        if (!ng.prunable) continue;
        for (const auto& m : ng.members) {
            const auto& node = graph.node(m.node);
            if (node.param.empty()) continue;
            const bool frozen = node.kind == OpKind::kLinear;
            const bool lora = (m.axis == Axis::kPrimary && node.kind == OpKind::kLoraB) ||
                              (m.axis == Axis::kSecondary && node.kind == OpKind::kLoraA);
            if (!frozen && !lora) {
                throw AnalysisError("node group '" + ng.name + "' is prunable but contains unprunable parameter '" +
                                    node.param + "'");
            }
            const std::size_t extent = node.param_shape.at(static_cast<std::size_t>(m.axis));
            coverage[{node.param, static_cast<int>(m.axis)}].assign(extent, false);
        }
        for (std::size_t k = 0; k < ng.structure_count(); ++k) {
            Group g;
            g.id = set.groups.size();
            g.node_group = ng.id;
            g.index = k;
            for (const auto& m : ng.members) {
                const auto& node = graph.node(m.node);
                if (node.param.empty()) continue;
                Slice s;
                s.tensor = node.param;
                s.axis = m.axis;
                s.begin = k * ng.granularity;
                s.end = (k + 1) * ng.granularity;
                s.role = node.kind == OpKind::kLinear ? SliceRole::kFrozen : SliceRole::kLora;
                auto& cov = coverage[{s.tensor, static_cast<int>(s.axis)}];
                for (std::size_t i = s.begin; i < s.end && i < cov.size(); ++i) cov[i] = true;
                g.slices.push_back(std::move(s));
            }
            set.groups.push_back(std::move(g));
        }
    }
    std::string gaps;
    for (const auto& [key, cov] : coverage) {
        for (std::size_t i = 0; i < cov.size(); ++i) {
            if (!cov[i]) gaps += " " + key.first + "[axis " + std::to_string(key.second) + "][" + std::to_string(i) + "]";
        }
    }
    if (!gaps.empty()) throw AnalysisError("coverage gap in group partition:" + gaps);
    check_disjoint(set);
    return set;
}

void check_disjoint(const GroupSet& set) {
    std::map<std::pair<std::string, int>, std::set<std::size_t>> seen;
    for (const auto& g : set.groups) {
        for (const auto& s : g.slices) {
            auto& used = seen[{s.tensor, static_cast<int>(s.axis)}];
            for (std::size_t i = s.begin; i < s.end; ++i) {
                if (!used.insert(i).second) {
                    throw AnalysisError("group " + std::to_string(g.id) + " repeats " + s.tensor + "[axis " +
                                        std::to_string(static_cast<int>(s.axis)) + "][" + std::to_string(i) + "]");
                }
            }
        }
    }
}

std::size_t slice_numel(const Tensor& t, const Slice& s) {
    return s.width() * (s.axis == Axis::kPrimary ? t.cols() : t.rows());
}

void zero_slice(Tensor& t, const Slice& s) {
    if (t.dim() != 2) throw ShapeError("slice target " + s.tensor + " is not a matrix");
    if (s.axis == Axis::kPrimary) {
        for (std::size_t r = s.begin; r < s.end; ++r)
            for (std::size_t c = 0; c < t.cols(); ++c) t.at(r, c) = 0.0;
    } else {
        for (std::size_t r = 0; r < t.rows(); ++r)
            for (std::size_t c = s.begin; c < s.end; ++c) t.at(r, c) = 0.0;
    }
}

namespace {

Tensor& resolve(LoraModel& model, const std::string& name) {
    Tensor* t = find_tensor(model, name);
    if (!t) throw StructureError("group references unknown tensor " + name);
    return *t;
}

const Tensor& resolve(const LoraModel& model, const std::string& name) {
    const Tensor* t = find_tensor(model, name);
    if (!t) throw StructureError("group references unknown tensor " + name);
    return *t;
}

}  // namespace

void zero_group(LoraModel& model, const Group& group) {
    for (const auto& s : group.slices) zero_slice(resolve(model, s.tensor), s);
}

bool group_is_zero(const LoraModel& model, const Group& group) {
    for (const auto& s : group.slices) {
        if (s.role != SliceRole::kFrozen) continue;
        const Tensor& t = resolve(model, s.tensor);
        if (s.axis == Axis::kPrimary) {
            for (std::size_t r = s.begin; r < s.end; ++r)
                for (std::size_t c = 0; c < t.cols(); ++c)
                    if (t.at(r, c) != 0.0) return false;
        } else {
            for (std::size_t r = 0; r < t.rows(); ++r)
                for (std::size_t c = s.begin; c < s.end; ++c)
                    if (t.at(r, c) != 0.0) return false;
        }
    }
    return true;
}

std::size_t frozen_size(const LoraModel& model, const Group& group) {
    std::size_t n = 0;
    for (const auto& s : group.slices) {
        if (s.role == SliceRole::kFrozen) n += slice_numel(resolve(model, s.tensor), s);
    }
    return n;
}

namespace {

const LoraLinear* owning_linear(const LoraModel& model, const std::string& tensor) {
    const auto dot = tensor.rfind('.');
    const std::string path = tensor.substr(0, dot);
    for (const auto& nl : lora_linears(const_cast<LoraModel&>(model))) {
        if (nl.path == path) return nl.linear;
    }
    return nullptr;
}

template <typename Fn>
void for_each_index(const Tensor& t, const Slice& s, Fn&& fn) {
    if (s.axis == Axis::kPrimary) {
        for (std::size_t r = s.begin; r < s.end; ++r)
            for (std::size_t c = 0; c < t.cols(); ++c) fn(r, c);
    } else {
        for (std::size_t r = 0; r < t.rows(); ++r)
            for (std::size_t c = s.begin; c < s.end; ++c) fn(r, c);
    }
}

}  // namespace

std::vector<double> group_values(const LoraModel& model, const Group& group, bool effective) {
    std::vector<double> out;
    for (const auto& s : group.slices) {
        if (s.role != SliceRole::kFrozen) continue;
        const Tensor& t = resolve(model, s.tensor);
        const LoraLinear* lin = effective ? owning_linear(model, s.tensor) : nullptr;
        const bool lora = lin && lin->has_lora();
        for_each_index(t, s, [&](std::size_t r, std::size_t c) {
            double v = t.at(r, c);
            if (lora) {
                double ba = 0.0;
                for (std::size_t k = 0; k < lin->rank(); ++k) ba += lin->lora_B.at(r, k) * lin->lora_A.at(k, c);
                v += lin->gamma * ba;
            }
            out.push_back(v);
        });
    }
    return out;
}

void set_group_values(LoraModel& model, const Group& group, std::span<const double> values) {
    std::size_t i = 0;
    for (const auto& s : group.slices) {
        if (s.role != SliceRole::kFrozen) continue;
        Tensor& t = resolve(model, s.tensor);
        for_each_index(t, s, [&](std::size_t r, std::size_t c) {
            if (i >= values.size()) throw ShapeError("set_group_values: too few values");
            t.at(r, c) = values[i++];
        });
    }
    if (i != values.size()) throw ShapeError("set_group_values: too many values");
}

void zero_group_lora(LoraModel& model, const Group& group) {
    for (const auto& s : group.slices) {
        if (s.role == SliceRole::kLora) zero_slice(resolve(model, s.tensor), s);
    }
}

nlohmann::json node_groups_to_json(const NodeGroups& ng, const TraceGraph& graph) {
    using nlohmann::json;
    json arr = json::array();
    for (const auto& g : ng.groups) {
        json members = json::array();
        for (const auto& m : g.members) {
            members.push_back({{"node", m.node},
                               {"name", graph.node(m.node).name},
                               {"axis", m.axis == Axis::kPrimary ? "primary" : "secondary"}});
        }
        json j = {{"id", g.id},
                  {"kind", g.kind == NodeGroupKind::kBasic ? "basic" : "composed"},
                  {"name", g.name},
                  {"prunable", g.prunable},
                  {"channels", g.channels},
                  {"granularity", g.granularity},
                  {"structures", g.structure_count()},
                  {"members", members}};
        if (!g.prunable) j["unprunable_reason"] = g.unprunable_reason;
        arr.push_back(std::move(j));
    }
    return json{{"schema_version", 1}, {"node_groups", arr}};
}

nlohmann::json group_set_to_json(const GroupSet& set) {
    using nlohmann::json;
    json arr = json::array();
    for (const auto& g : set.groups) {
        json slices = json::array();
        for (const auto& s : g.slices) {
            slices.push_back({{"tensor", s.tensor},
                              {"axis", static_cast<int>(s.axis)},
                              {"begin", s.begin},
                              {"end", s.end},
                              {"role", s.role == SliceRole::kFrozen ? "frozen" : "lora"}});
        }
        arr.push_back({{"id", g.id},
                       {"node_group", g.node_group},
                       {"index", g.index},
                       {"status", status_name(g.status)},
                       {"slices", slices}});
    }
    return json{{"schema_version", 1}, {"groups", arr}};
}

GroupSet group_set_from_json(const nlohmann::json& j) {
    GroupSet set;
    try {
        if (j.at("schema_version").get<int>() != 1) throw FormatError("group set: unsupported schema version");
        for (const auto& gj : j.at("groups")) {
            Group g;
            g.id = gj.at("id").get<std::size_t>();
            g.node_group = gj.at("node_group").get<std::size_t>();
            g.index = gj.at("index").get<std::size_t>();
            g.status = parse_status(gj.at("status").get<std::string>());
            for (const auto& sj : gj.at("slices")) {
                Slice s;
                s.tensor = sj.at("tensor").get<std::string>();
                s.axis = sj.at("axis").get<int>() == 0 ? Axis::kPrimary : Axis::kSecondary;
                s.begin = sj.at("begin").get<std::size_t>();
                s.end = sj.at("end").get<std::size_t>();
                s.role = sj.at("role").get<std::string>() == "frozen" ? SliceRole::kFrozen : SliceRole::kLora;
                g.slices.push_back(std::move(s));
            }
            if (g.id != set.groups.size()) throw FormatError("group set: ids must be dense and ordered");
            set.groups.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("group set: malformed JSON: ") + e.what());
    }
    return set;
}

}  // namespace lorashear
