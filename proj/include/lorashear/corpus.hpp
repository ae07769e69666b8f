#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace lorashear {

using Sequence = std::vector<int>;

// 64-symbol character vocabulary shared by every synthetic source.
const std::string& vocabulary();
int encode_char(char c);
Sequence encode(const std::string& text);
std::string decode(const Sequence& tokens);

enum class Phase { kPretraining, kInstruct };
std::string phase_name(Phase p);

struct Source {
    std::string name;
    Phase phase = Phase::kPretraining;
    std::vector<Sequence> train;
    std::vector<Sequence> val;
};

struct CorpusConfig {
    std::size_t train_per_source = 256;
    std::size_t val_per_source = 48;
    std::size_t seq_len = 33;  // model context + 1 target
};

// Every sequence belongs to exactly one source; train and val are disjoint
// within and across sources.
struct SourceTaggedCorpus {
    std::vector<Source> sources;

    std::vector<std::size_t> phase_sources(Phase p) const;
    const Source& source(const std::string& name) const;
    std::vector<Sequence> pooled_train(Phase p) const;
    std::vector<Sequence> pooled_val(Phase p) const;
    std::vector<Sequence> all_train() const;
    std::vector<Sequence> all_val() const;
};

// Names of the procedurally generated languages, in corpus order.
std::vector<std::string> source_names();
Phase source_phase(const std::string& name);

// Draws a stream from the named language and cuts it into length-n windows.
std::string sample_text(const std::string& source, std::size_t n, std::uint64_t seed);

SourceTaggedCorpus generate_corpus(const CorpusConfig& config, std::uint64_t seed);

nlohmann::json corpus_to_json(const SourceTaggedCorpus& corpus);
SourceTaggedCorpus corpus_from_json(const nlohmann::json& j);

}  // namespace lorashear
