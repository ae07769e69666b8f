#pragma once

#include <string>
#include <vector>

#include "lorashear/tensor.hpp"

namespace lorashear {

enum class OptimizerKind { kSgd, kAdamW };

OptimizerKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerKind kind);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::kSgd;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// First-order optimizer over a fixed list of tensors. Tensors without a
// gradient buffer are skipped for that step.
class Optimizer {
   public:
    Optimizer(std::vector<Tensor*> params, OptimizerConfig config);

    void step(double lr);
    void zero_grad();
    const std::vector<Tensor*>& params() const { return params_; }

   private:
    std::vector<Tensor*> params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    long step_count_ = 0;
};

// Cosine decay from lr to 0 over total steps; constant when cosine is false.
double scheduled_lr(double lr, long step, long total, bool cosine);

}  // namespace lorashear
