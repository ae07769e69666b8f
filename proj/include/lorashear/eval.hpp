#pragma once

#include <span>
#include <vector>

#include "lorashear/corpus.hpp"
#include "lorashear/model.hpp"

namespace lorashear {

// Mean next-token cross-entropy of one (T+1)-token sequence.
double sequence_loss(const LoraModel& model, const Sequence& seq);

// Mean of per-sequence losses. Sequences are scored in parallel and reduced
// in index order, so the result does not depend on the thread count.
double mean_loss(const LoraModel& model, std::span<const Sequence> seqs);

// exp(mean_loss)
double perplexity(const LoraModel& model, std::span<const Sequence> seqs);

}  // namespace lorashear
