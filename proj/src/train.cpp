#include "lorashear/train.hpp"

#include <cmath>

#include "lorashear/error.hpp"

namespace lorashear {

BatchSampler::BatchSampler(std::span<const Sequence> pool, std::size_t batch, std::uint64_t seed)
    : pool_(pool), batch_(batch), rng_(seed) {
    if (pool_.empty()) throw ConfigError("training pool is empty");
    if (batch_ == 0) throw ConfigError("batch size must be positive");
}

std::vector<Sequence> BatchSampler::next() {
    std::uniform_int_distribution<std::size_t> dist(0, pool_.size() - 1);
    std::vector<Sequence> out;
    out.reserve(batch_);
    for (std::size_t i = 0; i < batch_; ++i) out.push_back(pool_[dist(rng_)]);
    return out;
}

double loss_and_grad(LoraModel& model, std::span<const Sequence> batch) {
    Tape tape;
    const Var loss = batch_loss(tape, model, batch);
    const double value = tape.value(loss).item();
    if (!std::isfinite(value)) throw TrainingError("training loss is not finite");
    tape.backward(loss);
    return value;
}

std::vector<double> train(LoraModel& model, Trainable which, std::span<const Sequence> data, const TrainConfig& config,
                          const std::function<void(std::size_t, double)>& on_step) {
    set_trainable(model, which);
    Optimizer opt(trainable_tensors(model), config.optimizer);
    BatchSampler sampler(data, config.batch, config.seed);
    std::vector<double> losses;
    for (std::size_t step = 0; step < config.steps; ++step) {
        opt.zero_grad();
        const auto batch = sampler.next();
        double loss = 0.0;
        try {
            loss = loss_and_grad(model, batch);
        } catch (const NumericError& e) {
            throw TrainingError("step " + std::to_string(step) + ": " + e.what());
        }
        opt.step(scheduled_lr(config.lr, static_cast<long>(step), static_cast<long>(config.steps), config.cosine));
        losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    opt.zero_grad();
    set_trainable(model, Trainable::kNone);
    return losses;
}

}  // namespace lorashear
