#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorashear/corpus.hpp"
#include "lorashear/model.hpp"
#include "lorashear/optim.hpp"

namespace lorashear {

struct RecoveryConfig {
    std::size_t budget = 256;  // N, sequences per round
    double floor = 0.1;        // phi, per-source share reserved up front
    double lr = 1e-3;
    std::size_t steps_per_round = 40;
    std::size_t batch = 8;
    std::size_t patience = 3;
    double tol = 1e-3;
    std::size_t max_rounds = 8;
    OptimizerConfig optimizer{OptimizerKind::kAdamW};
    std::uint64_t seed = 0;

    void validate() const;
};

// floor(phi * N) per source, the rest split in proportion to max(d, 0)
// (uniformly when no source degraded) with largest-remainder rounding; ties
// go to the lower source index. Sums to N exactly.
std::vector<std::size_t> allocate_budget(const std::vector<double>& degradation, std::size_t budget, double floor);

struct Subset {
    std::vector<std::size_t> sources;     // corpus source indices
    std::vector<std::size_t> allocation;  // per entry of `sources`
    std::vector<Sequence> sequences;
    std::vector<std::size_t> origin;  // corpus source index per sequence
};

// Draws allocation[i] training sequences from each source without replacement.
Subset build_subset(const SourceTaggedCorpus& corpus, const std::vector<std::size_t>& sources,
                    const std::vector<double>& degradation, std::size_t budget, double floor, std::uint64_t seed);

// Validation perplexity of every corpus source.
std::vector<double> source_perplexities(const LoraModel& model, const SourceTaggedCorpus& corpus);

// ppl_s(compact) - ref[s] for each listed source.
std::vector<double> measure_degradation(const LoraModel& compact, const std::vector<double>& reference,
                                        const SourceTaggedCorpus& corpus, const std::vector<std::size_t>& sources);

// Running best of a validation loss. Converged once `patience` consecutive
// updates fail to beat the best by more than tol.
class ConvergenceTracker {
   public:
    ConvergenceTracker(double initial, std::size_t patience, double tol)
        : best_(initial), patience_(patience), tol_(tol) {}
    bool update(double value);
    double best() const { return best_; }
    std::size_t stale() const { return stale_; }

   private:
    double best_;
    std::size_t patience_;
    double tol_;
    std::size_t stale_ = 0;
};

struct RoundRecord {
    std::string phase;
    std::size_t round = 0;
    std::vector<std::string> sources;
    std::vector<double> degradation;
    std::vector<std::size_t> allocation;
    std::vector<std::size_t> subset_histogram;
    double val_loss = 0.0;
    double best = 0.0;
    bool converged = false;
};

nlohmann::json round_record_to_json(const RoundRecord& r);

struct RecoveryResult {
    std::vector<RoundRecord> log;
    std::vector<double> pre_perplexity;   // per corpus source
    std::vector<double> post_perplexity;  // per corpus source
    double pre_mean = 0.0;
    double post_mean = 0.0;
};

// Pretraining-style phase, then instruction-style phase. Each round measures
// degradation against `reference`, builds a subset, and fine-tunes the LoRA
// factors. Convergence is tracked on the mean validation loss over all
// sources; at the end of each phase the best state is kept and merged.
RecoveryResult run_recovery(LoraModel& compact, const std::vector<double>& reference, const SourceTaggedCorpus& corpus,
                            const RecoveryConfig& config);

}  // namespace lorashear
