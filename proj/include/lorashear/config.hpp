#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "lorashear/corpus.hpp"
#include "lorashear/knowledge.hpp"
#include "lorashear/lhspg.hpp"
#include "lorashear/model.hpp"
#include "lorashear/recovery.hpp"

namespace lorashear {

struct PretrainConfig {
    std::size_t steps = 1500;
    std::size_t batch = 8;
    double lr = 3e-3;
    OptimizerConfig optimizer{OptimizerKind::kAdamW};
    bool cosine = true;
};

struct PipelineConfig {
    std::uint64_t seed = 7;
    ModelConfig model;
    CorpusConfig corpus;
    PretrainConfig pretrain;
    KnowledgeConfig knowledge;
    std::size_t knowledge_eval = 64;  // validation sequences used for probing
    double pruning_ratio = 0.2;       // fraction of prunable groups, K derived
    LhspgConfig lhspg;                // `target` is filled in by the prune stage
    RecoveryConfig recovery;

    void validate() const;
};

// Per-stage seeds derived from the single run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage);

// Copy with every stage seed fanned out from `seed`.
PipelineConfig resolve_seeds(PipelineConfig config);

nlohmann::json config_to_json(const PipelineConfig& config);

// Strict reader: unknown keys, wrong types and invalid values raise
// ConfigError naming the JSON path. Missing keys keep their defaults.
PipelineConfig config_from_json(const nlohmann::json& j);

std::size_t derive_target(double ratio, std::size_t prunable);

}  // namespace lorashear
