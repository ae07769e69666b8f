#include "lorashear/optim.hpp"

#include <cmath>
#include <numbers>

#include "lorashear/error.hpp"

namespace lorashear {

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::kSgd;
    if (name == "adamw") return OptimizerKind::kAdamW;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adamw)");
}

std::string optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adamw"; }

Optimizer::Optimizer(std::vector<Tensor*> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
    if (config_.kind == OptimizerKind::kAdamW) {
        for (auto* p : params_) {
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
    }
}

void Optimizer::step(double lr) {
    ++step_count_;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        if (!p.has_grad()) continue;
        auto w = p.data();
        auto g = p.grad();
        for (double gi : g) {
            if (!std::isfinite(gi)) throw TrainingError("optimizer step: non-finite gradient");
        }
        if (config_.kind == OptimizerKind::kSgd) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + config_.weight_decay * w[i]);
            continue;
        }
        auto& m = m_[k];
        auto& v = v_[k];
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr * (mh / (std::sqrt(vh) + config_.eps) + config_.weight_decay * w[i]);
        }
    }
}

void Optimizer::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

double scheduled_lr(double lr, long step, long total, bool cosine) {
    if (!cosine || total <= 1) return lr;
    const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
    return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace lorashear
