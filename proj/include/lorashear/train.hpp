#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "lorashear/corpus.hpp"
#include "lorashear/model.hpp"
#include "lorashear/optim.hpp"

namespace lorashear {

// Uniform minibatches drawn with replacement from a fixed pool.
class BatchSampler {
   public:
    BatchSampler(std::span<const Sequence> pool, std::size_t batch, std::uint64_t seed);
    std::vector<Sequence> next();

   private:
    std::span<const Sequence> pool_;
    std::size_t batch_;
    std::mt19937_64 rng_;
};

struct TrainConfig {
    std::size_t steps = 0;
    std::size_t batch = 8;
    double lr = 1e-2;
    OptimizerConfig optimizer;
    bool cosine = false;
    std::uint64_t seed = 0;
};

// One forward/backward pass over the batch; gradients land in the trainable
// tensors. Throws TrainingError when the loss is not finite.
double loss_and_grad(LoraModel& model, std::span<const Sequence> batch);

// Plain training loop. Returns the per-step training losses.
std::vector<double> train(LoraModel& model, Trainable which, std::span<const Sequence> data, const TrainConfig& config,
                          const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace lorashear
