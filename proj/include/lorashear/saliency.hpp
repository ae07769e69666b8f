#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lorashear/groups.hpp"

namespace lorashear {

using SaliencyProxy = std::function<double(const LoraModel&, const Group&)>;

// ||[x + gamma B A]_g|| / sqrt(|g|)
double effective_l2_saliency(const LoraModel& model, const Group& group);
// ||[x]_g|| / sqrt(|g|), ignoring the adaptor
double frozen_l2_saliency(const LoraModel& model, const Group& group);

// Registered proxies: "effective_l2" (default), "frozen_l2".
std::vector<std::string> saliency_ids();
SaliencyProxy saliency_proxy(const std::string& id);

struct ScoredGroup {
    std::size_t id = 0;
    double score = 0.0;
};

std::vector<ScoredGroup> score_groups(const LoraModel& model, const GroupSet& set, const std::vector<std::size_t>& ids,
                                      const SaliencyProxy& proxy);

// Ids of the k lowest scores; equal scores go to the lower id.
std::vector<std::size_t> least_salient(std::vector<ScoredGroup> scored, std::size_t k);

}  // namespace lorashear
