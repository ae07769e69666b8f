#include "lorashear/saliency.hpp"

#include <algorithm>
#include <cmath>

#include "lorashear/error.hpp"

namespace lorashear {

namespace {

double normalized_norm(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double ss = 0.0;
    for (double x : v) ss += x * x;
    return std::sqrt(ss) / std::sqrt(static_cast<double>(v.size()));
}

}  // namespace

double effective_l2_saliency(const LoraModel& model, const Group& group) {
    return normalized_norm(group_values(model, group, true));
}

double frozen_l2_saliency(const LoraModel& model, const Group& group) {
    return normalized_norm(group_values(model, group, false));
}

std::vector<std::string> saliency_ids() { return {"effective_l2", "frozen_l2"}; }

SaliencyProxy saliency_proxy(const std::string& id) {
    if (id == "effective_l2") return effective_l2_saliency;
    if (id == "frozen_l2") return frozen_l2_saliency;
    throw ConfigError("unknown saliency proxy '" + id + "'");
}

std::vector<ScoredGroup> score_groups(const LoraModel& model, const GroupSet& set, const std::vector<std::size_t>& ids,
                                      const SaliencyProxy& proxy) {
    std::vector<ScoredGroup> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back({id, proxy(model, set.groups.at(id))});
    return out;
}

std::vector<std::size_t> least_salient(std::vector<ScoredGroup> scored, std::size_t k) {
    if (k > scored.size()) throw Error("least_salient: asked for " + std::to_string(k) + " of " + std::to_string(scored.size()));
    std::stable_sort(scored.begin(), scored.end(), [](const ScoredGroup& a, const ScoredGroup& b) {
        return a.score != b.score ? a.score < b.score : a.id < b.id;
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(scored[i].id);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace lorashear
