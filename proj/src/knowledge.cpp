#include "lorashear/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "lorashear/error.hpp"
#include "lorashear/eval.hpp"
#include "lorashear/hash.hpp"
#include "lorashear/parallel.hpp"

namespace lorashear {

void KnowledgeConfig::validate() const {
    if (ratios.empty()) throw ConfigError("knowledge.ratios must not be empty");
    for (double p : ratios) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("knowledge.ratios entries must lie in [0, 1]");
    }
    if (!(gamma_unprunable >= 0.0 && gamma_unprunable < 1.0)) {
        throw ConfigError("knowledge.gamma_unprunable must lie in [0, 1)");
    }
    saliency_proxy(saliency);
}

ProbeResult probe_deviation(LoraModel& model, const GroupSet& set, std::size_t node_group,
                            std::span<const double> ratios, std::span<const Sequence> eval, double full_ppl,
                            const SaliencyProxy& proxy, const std::function<void(LoraModel&)>& after_restore) {
    if (eval.empty()) throw ConfigError("knowledge analysis: evaluation set is empty");
    ProbeResult res;
    res.hash_before = model_hash(model);
    const auto members = set.in_node_group(node_group);
    const auto scored = score_groups(model, set, members, proxy);

    std::map<std::string, Tensor> snapshot;
    for (auto id : members) {
        for (const auto& s : set.groups[id].slices) {
            if (!snapshot.contains(s.tensor)) snapshot.emplace(s.tensor, *find_tensor(model, s.tensor));
        }
    }
    double total = 0.0;
    for (double p : ratios) {
        const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(members.size()) + 1e-12));
        const auto chosen = least_salient(scored, std::min(k, members.size()));
        for (auto id : chosen) zero_group(model, set.groups[id]);
        const double ppl = chosen.empty() ? full_ppl : perplexity(model, eval);
        for (const auto& [name, t] : snapshot) *find_tensor(model, name) = t;
        res.pruned_perplexity.push_back(ppl);
        total += ppl - full_ppl;
    }
    if (after_restore) after_restore(model);
    res.hash_after = model_hash(model);
    if (res.hash_after != res.hash_before) {
        throw CorruptionError("knowledge probe of node group " + std::to_string(node_group) +
                              " did not restore the model (hash " + res.hash_before + " became " + res.hash_after + ")");
    }
    res.deviation = total / static_cast<double>(ratios.size());
    return res;
}

std::size_t KnowledgeProfile::flagged() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.unprunable; }));
}

KnowledgeProfile analyze_knowledge(const LoraModel& model, GroupSet& set, const NodeGroups& node_groups,
                                   const KnowledgeConfig& config, std::span<const Sequence> eval) {
    config.validate();
    if (eval.empty()) throw ConfigError("knowledge analysis: evaluation set is empty");
    const SaliencyProxy proxy = saliency_proxy(config.saliency);
    KnowledgeProfile profile;
    profile.ratios = config.ratios;
    profile.gamma_unprunable = config.gamma_unprunable;
    profile.full_perplexity = perplexity(model, eval);

    for (const auto* ng : node_groups.prunable()) {
        NodeGroupDeviation e;
        e.node_group = ng->id;
        e.name = ng->name;
        e.structures = ng->structure_count();
        profile.entries.push_back(e);
    }
    parallel_for(profile.entries.size(), [&](std::size_t i) {
        LoraModel clone = model;
        auto& e = profile.entries[i];
        auto r = probe_deviation(clone, set, e.node_group, config.ratios, eval, profile.full_perplexity, proxy);
        e.deviation = r.deviation;
        e.pruned_perplexity = std::move(r.pruned_perplexity);
        e.hash_before = std::move(r.hash_before);
        e.hash_after = std::move(r.hash_after);
    });

    std::vector<std::size_t> order(profile.entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& x = profile.entries[a];
        const auto& y = profile.entries[b];
        return x.deviation != y.deviation ? x.deviation > y.deviation : x.node_group < y.node_group;
    });
    const auto flag = static_cast<std::size_t>(
        std::ceil(config.gamma_unprunable * static_cast<double>(profile.entries.size()) - 1e-9));
    for (std::size_t r = 0; r < order.size(); ++r) {
        auto& e = profile.entries[order[r]];
        e.rank = r + 1;
        e.unprunable = r < flag;
        if (e.unprunable) {
            for (auto id : set.in_node_group(e.node_group)) set.groups[id].status = GroupStatus::kUnprunable;
        }
    }
    return profile;
}

nlohmann::json knowledge_profile_to_json(const KnowledgeProfile& profile) {
    using nlohmann::json;
    json entries = json::array();
    for (const auto& e : profile.entries) {
        entries.push_back({{"node_group", e.node_group},
                           {"name", e.name},
                           {"structures", e.structures},
                           {"deviation", e.deviation},
                           {"pruned_perplexity", e.pruned_perplexity},
                           {"rank", e.rank},
                           {"unprunable", e.unprunable},
                           {"hash_before", e.hash_before},
                           {"hash_after", e.hash_after}});
    }
    return json{{"schema_version", 1},
                {"full_perplexity", profile.full_perplexity},
                {"ratios", profile.ratios},
                {"gamma_unprunable", profile.gamma_unprunable},
                {"flagged", profile.flagged()},
                {"node_groups", entries}};
}

std::string knowledge_profile_csv(const KnowledgeProfile& profile) {
    std::ostringstream out;
    out.precision(17);
    out << "node_group,name,structures,deviation,rank,unprunable\n";
    for (const auto& e : profile.entries) {
        out << e.node_group << ',' << e.name << ',' << e.structures << ',' << e.deviation << ',' << e.rank << ','
            << (e.unprunable ? 1 : 0) << '\n';
    }
    return out.str();
}

}  // namespace lorashear
