#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/corpus.hpp"
#include "lorashear/groups.hpp"
#include "lorashear/optim.hpp"
#include "lorashear/saliency.hpp"

namespace lorashear {

struct LhspgConfig {
    double lr = 0.02;
    std::size_t warmup_steps = 100;
    std::size_t periods = 5;
    std::size_t period_steps = 40;
    std::size_t target = 0;  // K: groups that must end exactly zero
    double eps_hs = 0.0;
    std::string saliency = "effective_l2";
    std::size_t batch = 8;
    OptimizerConfig optimizer;
    bool cosine = false;
    std::uint64_t seed = 0;

    void validate() const;
};

// Per-period budgets: ceil(K / P) each, the last period takes what is left.
std::vector<std::size_t> period_budgets(std::size_t target, std::size_t periods);

struct LhspgState {
    std::size_t period = 0;
    std::vector<std::size_t> redundant;  // sorted
    std::vector<std::size_t> important;  // sorted
    std::vector<std::size_t> current;    // selected in this period
    std::map<std::size_t, double> lambda;
    std::map<std::size_t, double> saliency;
};

// Moves the k least salient important groups to redundant and returns them.
// Throws Error when fewer than k important groups remain.
std::vector<std::size_t> select_redundant(LhspgState& state, const std::vector<ScoredGroup>& scores, std::size_t k);

// Penalty magnitude ||[x]_g|| / T_p for every group of the current period.
void set_period_penalties(LhspgState& state, const LoraModel& model, const GroupSet& set, std::size_t period_steps);

// Trial iterate and half-space projection for the current period's groups,
// then zeroing of the LoRA slices of every redundant group. Assumes the LoRA
// step for this iteration has already been taken. Returns projected ids.
std::vector<std::size_t> project_current(LoraModel& model, const LhspgState& state, const GroupSet& set, double eps_hs);

// Zeroes the LoRA slices of redundant groups and folds gamma B A into x;
// forward output is unchanged.
void end_of_period_merge(LoraModel& model, const LhspgState& state, const GroupSet& set);

std::size_t count_zero_groups(const LoraModel& model, const GroupSet& set);

struct StepRecord {
    std::string phase;  // "warmup" or "prune"
    std::size_t step = 0;
    std::size_t period = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t zero_groups = 0;
    std::vector<std::size_t> selected;   // first step of a period only
    std::vector<std::size_t> projected;  // ids mapped to zero this step
    bool merged = false;
};

nlohmann::json step_record_to_json(const StepRecord& r);

struct LhspgResult {
    LhspgState state;
    std::vector<StepRecord> log;
    LoraModel after_warmup;
    std::size_t zero_groups = 0;
};

using StepObserver = std::function<void(const StepRecord&, const LoraModel&)>;

// Full run: warm-up, then P periods of T_p steps. On return exactly K
// prunable groups are zero and `set` statuses are redundant/important.
LhspgResult run_lhspg(LoraModel& model, GroupSet& set, const LhspgConfig& config, std::span<const Sequence> data,
                      const StepObserver& on_step = {});

// Baseline without knowledge transfer: zero the K least salient prunable
// groups of the warmed-up model and merge.
LoraModel one_shot_prune(const LoraModel& warmed, const GroupSet& set, std::size_t target, const std::string& saliency);

}  // namespace lorashear
