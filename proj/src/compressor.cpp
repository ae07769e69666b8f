#include "lorashear/compressor.hpp"

#include <algorithm>
#include <set>

#include "lorashear/error.hpp"

namespace lorashear {

namespace {

std::vector<std::size_t> complement(std::size_t n, const std::set<std::size_t>& removed) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i) {
        if (!removed.contains(i)) keep.push_back(i);
    }
    return keep;
}

TensorPlan& tensor_plan(CompressionPlan& plan, const LoraModel& model, const std::string& name) {
    auto it = plan.tensors.find(name);
    if (it != plan.tensors.end()) return it->second;
    const Tensor* t = find_tensor(model, name);
    if (!t || t->dim() != 2) throw PlanError("plan references unknown matrix " + name);
    TensorPlan tp;
    tp.original = t->shape();
    for (std::size_t r = 0; r < t->rows(); ++r) tp.keep_rows.push_back(r);
    for (std::size_t c = 0; c < t->cols(); ++c) tp.keep_cols.push_back(c);
    return plan.tensors.emplace(name, std::move(tp)).first->second;
}

// "blocks.<b>.attn" / "blocks.<b>.mlp"
std::pair<std::size_t, bool> block_of(const std::string& name) {
    const std::string prefix = "blocks.";
    if (name.rfind(prefix, 0) == 0) {
        const auto dot = name.find('.', prefix.size());
        if (dot != std::string::npos) {
            const std::string tail = name.substr(dot + 1);
            if (tail == "attn" || tail == "mlp") {
                return {std::stoul(name.substr(prefix.size(), dot - prefix.size())), tail == "attn"};
            }
        }
    }
    throw PlanError("cannot map node group '" + name + "' to a block");
}

}  // namespace

CompressionPlan plan_compression(const LoraModel& model, const GroupSet& set, const TraceGraph& graph,
                                 const NodeGroups& node_groups) {
    CompressionPlan plan;
    plan.removed_groups = set.ids_with(GroupStatus::kRedundant);
    for (const auto& blk : model.blocks) {
        BlockPlan bp;
        for (std::size_t i = 0; i < blk.attn.heads(); ++i) bp.keep_heads.push_back(i);
        for (std::size_t i = 0; i < blk.mlp.width(); ++i) bp.keep_neurons.push_back(i);
        plan.blocks.push_back(std::move(bp));
    }

    // Pass 1: primary axis. Collect removed channels per node group.
    std::map<std::size_t, std::set<std::size_t>> removed;
    for (auto id : plan.removed_groups) {
        const Group& g = set.groups.at(id);
        const NodeGroup& ng = node_groups.groups.at(g.node_group);
        std::set<std::pair<std::size_t, std::size_t>> ranges;
        for (const auto& s : g.slices) {
            if (s.axis == Axis::kPrimary) ranges.insert({s.begin, s.end});
        }
        if (ranges.size() != 1) throw PlanError("group " + std::to_string(id) + " has inconsistent primary slices");
        const auto [b, e] = *ranges.begin();
        if (e > ng.channels) throw PlanError("group " + std::to_string(id) + " exceeds its node group channels");
        for (std::size_t i = b; i < e; ++i) removed[ng.id].insert(i);
    }
    for (const auto& [ngid, chans] : removed) {
        const NodeGroup& ng = node_groups.groups.at(ngid);
        for (const auto& m : ng.members) {
            const auto& node = graph.node(m.node);
            if (m.axis != Axis::kPrimary || node.param.empty()) continue;
            auto& tp = tensor_plan(plan, model, node.param);
            tp.keep_rows = complement(tp.original[0], chans);
        }
    }

    // Pass 2: secondary axis, following each pruned space to its consumers.
    for (const auto& [ngid, chans] : removed) {
        const NodeGroup& ng = node_groups.groups.at(ngid);
        for (const auto& m : ng.members) {
            const auto& node = graph.node(m.node);
            if (m.axis != Axis::kSecondary || node.param.empty()) continue;
            auto& tp = tensor_plan(plan, model, node.param);
            if (tp.original[1] != ng.channels) {
                throw PlanError("consumer " + node.param + " expects " + std::to_string(tp.original[1]) +
                                " input channels, node group '" + ng.name + "' has " + std::to_string(ng.channels));
            }
            tp.keep_cols = complement(tp.original[1], chans);
        }
        const auto [block, attn] = block_of(ng.name);
        if (block >= plan.blocks.size()) throw PlanError("node group '" + ng.name + "' names a missing block");
        std::set<std::size_t> units;
        for (auto c : chans) units.insert(c / ng.granularity);
        auto& keep = attn ? plan.blocks[block].keep_heads : plan.blocks[block].keep_neurons;
        keep = complement(keep.size(), units);
    }
    for (auto id : plan.removed_groups) {
        const Group& g = set.groups[id];
        for (const auto& s : g.slices) {
            if (s.axis != Axis::kSecondary) continue;
            const auto it = plan.tensors.find(s.tensor);
            for (std::size_t i = s.begin; i < s.end; ++i) {
                if (it == plan.tensors.end() ||
                    std::binary_search(it->second.keep_cols.begin(), it->second.keep_cols.end(), i)) {
                    throw PlanError("group " + std::to_string(id) + " expects column " + std::to_string(i) + " of " +
                                    s.tensor + " to be removed");
                }
            }
        }
    }
    return plan;
}

LoraModel apply_compression(const LoraModel& model, const CompressionPlan& plan) {
    if (plan.blocks.size() != model.blocks.size()) throw PlanError("plan block count does not match the model");
    LoraModel out = model;
    for (const auto& [name, tp] : plan.tensors) {
        Tensor* t = find_tensor(out, name);
        if (!t || t->shape() != tp.original) throw PlanError("plan does not match tensor " + name);
        Tensor next({tp.keep_rows.size(), tp.keep_cols.size()});
        for (std::size_t i = 0; i < tp.keep_rows.size(); ++i)
            for (std::size_t j = 0; j < tp.keep_cols.size(); ++j) next.at(i, j) = t->at(tp.keep_rows[i], tp.keep_cols[j]);
        *t = std::move(next);
    }
    for (std::size_t b = 0; b < out.blocks.size(); ++b) {
        auto pick = [](const std::vector<std::int64_t>& from, const std::vector<std::size_t>& pos) {
            std::vector<std::int64_t> kept;
            for (auto p : pos) {
                if (p >= from.size()) throw PlanError("plan keeps a position beyond the current width");
                kept.push_back(from[p]);
            }
            return kept;
        };
        out.blocks[b].attn.kept_heads = pick(model.blocks[b].attn.kept_heads, plan.blocks[b].keep_heads);
        out.blocks[b].mlp.kept_neurons = pick(model.blocks[b].mlp.kept_neurons, plan.blocks[b].keep_neurons);
    }
    const auto hd = out.config.head_dim();
    for (const auto& blk : out.blocks) {
        if (blk.attn.q.weight.rows() != blk.attn.heads() * hd || blk.attn.o.weight.cols() != blk.attn.heads() * hd ||
            blk.mlp.gate.weight.rows() != blk.mlp.width() || blk.mlp.down.weight.cols() != blk.mlp.width()) {
            throw PlanError("compressed shapes disagree with the surviving heads or neurons");
        }
    }
    return out;
}

std::size_t closed_form_parameters(const ModelConfig& c, const std::vector<std::size_t>& heads,
                                   const std::vector<std::size_t>& neurons) {
    const std::size_t d = c.hidden, r = c.rank, hd = c.head_dim();
    auto lin = [&](std::size_t out, std::size_t in) { return out * in + (r ? r * in + out * r : 0); };
    std::size_t n = c.vocab * d + c.max_seq * d + d + c.vocab * d;
    for (std::size_t b = 0; b < heads.size(); ++b) {
        const std::size_t qd = heads[b] * hd;
        const std::size_t w = neurons.at(b);
        n += 2 * d + 3 * lin(qd, d) + lin(d, qd) + 2 * lin(w, d) + lin(d, w);
    }
    return n;
}

nlohmann::json plan_to_json(const CompressionPlan& plan) {
    using nlohmann::json;
    json tensors = json::object();
    for (const auto& [name, tp] : plan.tensors) {
        tensors[name] = {{"shape", tp.original}, {"keep_rows", tp.keep_rows}, {"keep_cols", tp.keep_cols}};
    }
    json blocks = json::array();
    for (const auto& b : plan.blocks) blocks.push_back({{"keep_heads", b.keep_heads}, {"keep_neurons", b.keep_neurons}});
    return json{{"schema_version", 1}, {"removed_groups", plan.removed_groups}, {"tensors", tensors}, {"blocks", blocks}};
}

CompressionPlan plan_from_json(const nlohmann::json& j) {
    CompressionPlan plan;
    try {
        if (j.at("schema_version").get<int>() != 1) throw FormatError("plan: unsupported schema version");
        plan.removed_groups = j.at("removed_groups").get<std::vector<std::size_t>>();
        for (const auto& [name, tj] : j.at("tensors").items()) {
            TensorPlan tp;
            tp.original = tj.at("shape").get<Shape>();
            tp.keep_rows = tj.at("keep_rows").get<std::vector<std::size_t>>();
            tp.keep_cols = tj.at("keep_cols").get<std::vector<std::size_t>>();
            plan.tensors.emplace(name, std::move(tp));
        }
        for (const auto& bj : j.at("blocks")) {
            plan.blocks.push_back({bj.at("keep_heads").get<std::vector<std::size_t>>(),
                                   bj.at("keep_neurons").get<std::vector<std::size_t>>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("plan: malformed JSON: ") + e.what());
    }
    return plan;
}

}  // namespace lorashear
