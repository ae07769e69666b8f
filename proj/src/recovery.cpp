#include "lorashear/recovery.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lorashear/error.hpp"
#include "lorashear/eval.hpp"
#include "lorashear/parallel.hpp"
#include "lorashear/train.hpp"

namespace lorashear {

void RecoveryConfig::validate() const {
    if (budget == 0) throw ConfigError("recovery.budget must be positive");
    if (!(floor >= 0.0 && floor < 1.0)) throw ConfigError("recovery.floor must lie in [0, 1)");
    if (!(lr > 0.0)) throw ConfigError("recovery.lr must be positive");
    if (batch == 0) throw ConfigError("recovery.batch must be positive");
    if (patience == 0) throw ConfigError("recovery.patience must be at least 1");
    if (!(tol >= 0.0)) throw ConfigError("recovery.tol must be nonnegative");
    if (max_rounds == 0) throw ConfigError("recovery.max_rounds must be at least 1");
}

std::vector<std::size_t> allocate_budget(const std::vector<double>& degradation, std::size_t budget, double floor) {
    const std::size_t n = degradation.size();
    if (n == 0) throw ConfigError("recovery: no sources to allocate over");
    if (!(floor >= 0.0) || floor * static_cast<double>(n) >= 1.0) {
        throw ConfigError("recovery.floor times the number of sources must be below 1");
    }
    if (floor > 0.0 && budget < n) throw ConfigError("recovery.budget is smaller than the number of sources");
    const auto base = static_cast<std::size_t>(std::floor(floor * static_cast<double>(budget)));
    std::vector<std::size_t> alloc(n, base);
    const std::size_t rest = budget - base * n;

    std::vector<double> w(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(degradation[i])) throw NumericError("recovery: degradation is not finite");
        w[i] = std::max(degradation[i], 0.0);
        total += w[i];
    }
    if (total == 0.0) {
        std::fill(w.begin(), w.end(), 1.0);
        total = static_cast<double>(n);
    }
    std::vector<double> frac(n);
    std::size_t given = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double q = static_cast<double>(rest) * w[i] / total;
        const auto whole = static_cast<std::size_t>(std::floor(q));
        alloc[i] += whole;
        given += whole;
        frac[i] = q - static_cast<double>(whole);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; given < rest; ++k, ++given) alloc[order[k % n]] += 1;
    return alloc;
}

Subset build_subset(const SourceTaggedCorpus& corpus, const std::vector<std::size_t>& sources,
                    const std::vector<double>& degradation, std::size_t budget, double floor, std::uint64_t seed) {
    if (sources.size() != degradation.size()) throw ConfigError("recovery: one degradation per source required");
    Subset out;
    out.sources = sources;
    out.allocation = allocate_budget(degradation, budget, floor);
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const Source& src = corpus.sources.at(sources[i]);
        if (out.allocation[i] > src.train.size()) {
            throw ConfigError("recovery: allocation " + std::to_string(out.allocation[i]) + " exceeds the " +
                              std::to_string(src.train.size()) + " training sequences of " + src.name);
        }
        std::vector<std::size_t> idx(src.train.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 rng(seed * 0x100000001B3ULL + sources[i]);
        for (std::size_t k = 0; k < out.allocation[i]; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
            std::swap(idx[k], idx[pick(rng)]);
            out.sequences.push_back(src.train[idx[k]]);
            out.origin.push_back(sources[i]);
        }
    }
    return out;
}

std::vector<double> source_perplexities(const LoraModel& model, const SourceTaggedCorpus& corpus) {
    std::vector<double> out;
    for (const auto& s : corpus.sources) {
        if (s.val.empty()) throw ConfigError("recovery: source " + s.name + " has no validation split");
        out.push_back(perplexity(model, s.val));
    }
    return out;
}

std::vector<double> measure_degradation(const LoraModel& compact, const std::vector<double>& reference,
                                        const SourceTaggedCorpus& corpus, const std::vector<std::size_t>& sources) {
    std::vector<double> out;
    for (auto i : sources) {
        const Source& s = corpus.sources.at(i);
        if (s.val.empty()) throw ConfigError("recovery: source " + s.name + " has no validation split");
        out.push_back(perplexity(compact, s.val) - reference.at(i));
    }
    return out;
}

bool ConvergenceTracker::update(double value) {
    if (value < best_ - tol_) {
        best_ = value;
        stale_ = 0;
    } else {
        best_ = std::min(best_, value);
        ++stale_;
    }
    return stale_ >= patience_;
}

nlohmann::json round_record_to_json(const RoundRecord& r) {
    return nlohmann::json{{"phase", r.phase},
                          {"round", r.round},
                          {"sources", r.sources},
                          {"degradation", r.degradation},
                          {"allocation", r.allocation},
                          {"subset_histogram", r.subset_histogram},
                          {"val_loss", r.val_loss},
                          {"best", r.best},
                          {"converged", r.converged}};
}

namespace {

double val_loss_over(const LoraModel& model, const SourceTaggedCorpus& corpus, const std::vector<std::size_t>& sources) {
    double total = 0.0;
    for (auto i : sources) total += mean_loss(model, corpus.sources[i].val);
    return total / static_cast<double>(sources.size());
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

RecoveryResult run_recovery(LoraModel& compact, const std::vector<double>& reference, const SourceTaggedCorpus& corpus,
                            const RecoveryConfig& config) {
    config.validate();
    if (reference.size() != corpus.sources.size()) throw ConfigError("recovery: reference scores do not match the corpus");
    if (!compact.config.rank) throw ConfigError("recovery: the compact model carries no LoRA factors");
    RecoveryResult res;
    res.pre_perplexity = source_perplexities(compact, corpus);
    res.pre_mean = mean_of(res.pre_perplexity);
    std::size_t round_seed = 0;
    for (Phase phase : {Phase::kPretraining, Phase::kInstruct}) {
        const auto sources = corpus.phase_sources(phase);
        if (sources.empty()) continue;
        std::vector<std::size_t> every(corpus.sources.size());
        std::iota(every.begin(), every.end(), 0);
        ConvergenceTracker tracker(val_loss_over(compact, corpus, every), config.patience, config.tol);
        LoraModel best = compact;
        for (std::size_t round = 0; round < config.max_rounds; ++round, ++round_seed) {
            RoundRecord r;
            r.phase = phase_name(phase);
            r.round = round;
            for (auto i : sources) r.sources.push_back(corpus.sources[i].name);
            r.degradation = measure_degradation(compact, reference, corpus, sources);
            const std::uint64_t seed = config.seed * 1000003ULL + round_seed;
            const Subset sub = build_subset(corpus, sources, r.degradation, config.budget, config.floor, seed);
            r.allocation = sub.allocation;
            r.subset_histogram.assign(sources.size(), 0);
            for (auto o : sub.origin) {
                r.subset_histogram[static_cast<std::size_t>(std::find(sources.begin(), sources.end(), o) - sources.begin())]++;
            }
            TrainConfig tc;
            tc.steps = config.steps_per_round;
            tc.batch = config.batch;
            tc.lr = config.lr;
            tc.optimizer = config.optimizer;
            tc.seed = seed;
            try {
                train(compact, Trainable::kLoraOnly, sub.sequences, tc);
            } catch (const TrainingError& e) {
                throw TrainingError(r.phase + " round " + std::to_string(round) + ": " + e.what());
            }
            r.val_loss = val_loss_over(compact, corpus, every);
            const double before = tracker.best();
            r.converged = tracker.update(r.val_loss);
            r.best = tracker.best();
            if (r.val_loss < before) best = compact;
            res.log.push_back(r);
            if (r.converged) break;
        }
        compact = std::move(best);
        merge_lora(compact);
    }
    res.post_perplexity = source_perplexities(compact, corpus);
    res.post_mean = mean_of(res.post_perplexity);
    return res;
}

}  // namespace lorashear
