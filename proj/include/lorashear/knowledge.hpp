#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/corpus.hpp"
#include "lorashear/groups.hpp"
#include "lorashear/saliency.hpp"

namespace lorashear {

struct KnowledgeConfig {
    std::vector<double> ratios = {0.25, 0.5};
    double gamma_unprunable = 0.1;
    std::string saliency = "effective_l2";

    void validate() const;
};

struct ProbeResult {
    double deviation = 0.0;
    std::vector<double> pruned_perplexity;  // one per ratio
    std::string hash_before;
    std::string hash_after;
};

// Zeroes the floor(p * n) least salient groups of the node group for every
// ratio p, measures perplexity, and restores the model. Deviation is the mean
// of (ppl_pruned - full_ppl). Throws CorruptionError if the model hash after
// restoring differs from the hash before. `after_restore` is a test seam that
// runs between restoring and the final hash.
ProbeResult probe_deviation(LoraModel& model, const GroupSet& set, std::size_t node_group,
                            std::span<const double> ratios, std::span<const Sequence> eval, double full_ppl,
                            const SaliencyProxy& proxy, const std::function<void(LoraModel&)>& after_restore = {});

struct NodeGroupDeviation {
    std::size_t node_group = 0;
    std::string name;
    std::size_t structures = 0;
    double deviation = 0.0;
    std::vector<double> pruned_perplexity;
    std::size_t rank = 0;  // 1 = largest deviation
    bool unprunable = false;
    std::string hash_before;
    std::string hash_after;
};

struct KnowledgeProfile {
    double full_perplexity = 0.0;
    std::vector<double> ratios;
    double gamma_unprunable = 0.0;
    std::vector<NodeGroupDeviation> entries;  // node group id order

    std::size_t flagged() const;
};

// Probes every node group that owns prunable structures (independently, on
// model clones), flags the ceil(gamma * n) largest deviations and marks all of
// their groups unprunable in `set`.
KnowledgeProfile analyze_knowledge(const LoraModel& model, GroupSet& set, const NodeGroups& node_groups,
                                   const KnowledgeConfig& config, std::span<const Sequence> eval);

nlohmann::json knowledge_profile_to_json(const KnowledgeProfile& profile);
std::string knowledge_profile_csv(const KnowledgeProfile& profile);

}  // namespace lorashear
