#include "lorashear/eval.hpp"

#include <cmath>

#include "lorashear/error.hpp"
#include "lorashear/parallel.hpp"

namespace lorashear {

double sequence_loss(const LoraModel& model, const Sequence& seq) {
    if (seq.size() < 2) throw ShapeError("sequence_loss: need at least two tokens");
    std::span<const int> all(seq);
    const Tensor logits = forward(model, all.first(seq.size() - 1));
    return kernels::cross_entropy(logits, all.subspan(1));
}

double mean_loss(const LoraModel& model, std::span<const Sequence> seqs) {
    if (seqs.empty()) throw ConfigError("evaluation set is empty");
    std::vector<double> losses(seqs.size());
    parallel_for(seqs.size(), [&](std::size_t i) { losses[i] = sequence_loss(model, seqs[i]); });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(seqs.size());
}

double perplexity(const LoraModel& model, std::span<const Sequence> seqs) { return std::exp(mean_loss(model, seqs)); }

}  // namespace lorashear
