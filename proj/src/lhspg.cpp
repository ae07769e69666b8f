#include "lorashear/lhspg.hpp"

#include <algorithm>
#include <cmath>

#include "lorashear/error.hpp"
#include "lorashear/train.hpp"

namespace lorashear {

void LhspgConfig::validate() const {
    if (periods < 1) throw ConfigError("lhspg.periods must be at least 1");
    if (period_steps < 1) throw ConfigError("lhspg.period_steps must be at least 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lhspg.lr must be positive");
    if (!(eps_hs >= 0.0 && eps_hs < 1.0)) throw ConfigError("lhspg.eps_hs must lie in [0, 1)");
    if (batch == 0) throw ConfigError("lhspg.batch must be positive");
    saliency_proxy(saliency);
}

std::vector<std::size_t> period_budgets(std::size_t target, std::size_t periods) {
    if (periods == 0) throw ConfigError("lhspg.periods must be at least 1");
    const std::size_t each = (target + periods - 1) / periods;
    std::vector<std::size_t> out;
    std::size_t left = target;
    for (std::size_t p = 0; p < periods; ++p) {
        const std::size_t k = p + 1 == periods ? left : std::min(each, left);
        out.push_back(k);
        left -= k;
    }
    return out;
}

std::vector<std::size_t> select_redundant(LhspgState& state, const std::vector<ScoredGroup>& scores, std::size_t k) {
    if (state.important.size() < k) {
        throw Error("lhspg: redundant budget exhausted (" + std::to_string(k) + " requested, " +
                    std::to_string(state.important.size()) + " important groups left)");
    }
    std::vector<ScoredGroup> pool;
    for (const auto& s : scores) {
        if (std::binary_search(state.important.begin(), state.important.end(), s.id)) pool.push_back(s);
    }
    const auto chosen = least_salient(pool, k);
    std::vector<std::size_t> rest;
    std::set_difference(state.important.begin(), state.important.end(), chosen.begin(), chosen.end(),
                        std::back_inserter(rest));
    state.important = std::move(rest);
    state.redundant.insert(state.redundant.end(), chosen.begin(), chosen.end());
    std::sort(state.redundant.begin(), state.redundant.end());
    state.current = chosen;
    return chosen;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

void set_period_penalties(LhspgState& state, const LoraModel& model, const GroupSet& set, std::size_t period_steps) {
    state.lambda.clear();
    for (auto id : state.current) {
        const auto x = group_values(model, set.groups[id]);
        state.lambda[id] = std::sqrt(dot(x, x)) / static_cast<double>(period_steps);
    }
}

std::vector<std::size_t> project_current(LoraModel& model, const LhspgState& state, const GroupSet& set, double eps_hs) {
    std::vector<std::size_t> projected;
    for (auto id : state.current) {
        const Group& g = set.groups[id];
        const auto x = group_values(model, g);
        const double sq = dot(x, x);
        if (sq == 0.0) continue;  // already projected earlier in the period
        const double norm = std::sqrt(sq);
        auto trial = group_values(model, g, true);
        const double lam = state.lambda.at(id);
        for (std::size_t i = 0; i < trial.size(); ++i) trial[i] -= lam * x[i] / norm;
        if (dot(trial, x) < eps_hs * sq) {
            std::fill(trial.begin(), trial.end(), 0.0);
            projected.push_back(id);
        }
        set_group_values(model, g, trial);
    }
    for (auto id : state.redundant) zero_group_lora(model, set.groups[id]);
    return projected;
}

void end_of_period_merge(LoraModel& model, const LhspgState& state, const GroupSet& set) {
    for (auto id : state.redundant) zero_group_lora(model, set.groups[id]);
    merge_lora(model);
}

std::size_t count_zero_groups(const LoraModel& model, const GroupSet& set) {
    std::size_t n = 0;
    for (const auto& g : set.groups) {
        if (g.prunable() && group_is_zero(model, g)) ++n;
    }
    return n;
}

nlohmann::json step_record_to_json(const StepRecord& r) {
    return nlohmann::json{{"phase", r.phase},         {"step", r.step},
                          {"period", r.period},       {"loss", r.loss},
                          {"lr", r.lr},               {"zero_groups", r.zero_groups},
                          {"selected", r.selected},   {"projected", r.projected},
                          {"merged", r.merged}};
}

LhspgResult run_lhspg(LoraModel& model, GroupSet& set, const LhspgConfig& config, std::span<const Sequence> data,
                      const StepObserver& on_step) {
    config.validate();
    const auto prunable = set.prunable_ids();
    if (config.target > prunable.size()) {
        throw ConfigError("lhspg.target K=" + std::to_string(config.target) + " exceeds the " +
                          std::to_string(prunable.size()) + " prunable groups");
    }
    const SaliencyProxy proxy = saliency_proxy(config.saliency);
    LhspgResult res;
    res.state.important = prunable;

    TrainConfig warm;
    warm.steps = config.warmup_steps;
    warm.batch = config.batch;
    warm.lr = config.lr;
    warm.optimizer = config.optimizer;
    warm.seed = config.seed;
    train(model, Trainable::kLoraOnly, data, warm, [&](std::size_t step, double loss) {
        StepRecord r;
        r.phase = "warmup";
        r.step = step;
        r.loss = loss;
        r.lr = config.lr;
        if (on_step) on_step(r, model);
        res.log.push_back(std::move(r));
    });
    res.after_warmup = model;

    set_trainable(model, Trainable::kLoraOnly);
    Optimizer opt(trainable_tensors(model), config.optimizer);
    BatchSampler sampler(data, config.batch, config.seed + 1);
    const auto budgets = period_budgets(config.target, config.periods);
    const long total = static_cast<long>(config.periods * config.period_steps);
    std::size_t step = 0;
    for (std::size_t p = 0; p < config.periods; ++p) {
        auto& st = res.state;
        st.period = p;
        const auto scores = score_groups(model, set, st.important, proxy);
        st.saliency.clear();
        for (const auto& s : scores) st.saliency[s.id] = s.score;
        const auto selected = select_redundant(st, scores, budgets[p]);
        set_period_penalties(st, model, set, config.period_steps);
        for (std::size_t t = 0; t < config.period_steps; ++t, ++step) {
            StepRecord r;
            r.phase = "prune";
            r.step = step;
            r.period = p;
            r.lr = scheduled_lr(config.lr, static_cast<long>(step), total, config.cosine);
            if (t == 0) r.selected = selected;
            opt.zero_grad();
            const auto batch = sampler.next();
            try {
                r.loss = loss_and_grad(model, batch);
            } catch (const NumericError& e) {
                throw TrainingError("lhspg step " + std::to_string(step) + ": " + e.what());
            }
            opt.step(r.lr);
            r.projected = project_current(model, st, set, config.eps_hs);
            if (t + 1 == config.period_steps) {
                // The penalty leaves at most rounding-level residue; close the period exactly.
                for (auto id : st.current) {
                    if (!group_is_zero(model, set.groups[id])) {
                        zero_group(model, set.groups[id]);
                        r.projected.push_back(id);
                    }
                }
                std::sort(r.projected.begin(), r.projected.end());
                end_of_period_merge(model, st, set);
                r.merged = true;
            }
            r.zero_groups = count_zero_groups(model, set);
            if (on_step) on_step(r, model);
            res.log.push_back(std::move(r));
        }
        res.state.current.clear();
    }
    opt.zero_grad();
    set_trainable(model, Trainable::kNone);

    for (auto id : res.state.redundant) set.groups[id].status = GroupStatus::kRedundant;
    for (auto id : res.state.important) set.groups[id].status = GroupStatus::kImportant;
    res.zero_groups = count_zero_groups(model, set);
    if (res.zero_groups != config.target) {
        throw Error("lhspg: finished with " + std::to_string(res.zero_groups) + " zero groups, expected " +
                    std::to_string(config.target));
    }
    return res;
}

LoraModel one_shot_prune(const LoraModel& warmed, const GroupSet& set, std::size_t target, const std::string& saliency) {
    const auto prunable = set.prunable_ids();
    if (target > prunable.size()) throw ConfigError("one-shot target exceeds prunable groups");
    LoraModel out = warmed;
    const auto chosen = least_salient(score_groups(out, set, prunable, saliency_proxy(saliency)), target);
    for (auto id : chosen) zero_group(out, set.groups[id]);
    merge_lora(out);
    return out;
}

}  // namespace lorashear
