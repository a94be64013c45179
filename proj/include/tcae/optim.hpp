#pragma once

#include <cmath>
#include <vector>

#include "tcae/param.hpp"

namespace tcae {

struct CosineSchedule {
    std::int64_t steps_per_epoch = 1;
    std::int64_t total_epochs = 1;
};

struct OptimizerConfig {
    double base_lr = 1e-3;
    double min_lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.04;
    double eps = 1e-8;
    std::int64_t warmup_epochs = 5;
    CosineSchedule schedule;

    void validate() const {
        TCAE_CHECK(base_lr > 0 && min_lr > 0 && min_lr <= base_lr, "optimizer: need 0 < min_lr <= base_lr");
        TCAE_CHECK(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "optimizer: betas must be in [0,1)");
        TCAE_CHECK(weight_decay >= 0, "optimizer: weight_decay must be >= 0");
        TCAE_CHECK(warmup_epochs >= 0, "optimizer: warmup_epochs must be >= 0");
    }
};

// Linear warmup to base_lr over warmup_epochs, then cosine decay to min_lr.
inline double lr_at_step(const OptimizerConfig& cfg, std::int64_t step) {
    std::int64_t warmup = cfg.warmup_epochs * cfg.schedule.steps_per_epoch;
    std::int64_t total = cfg.schedule.total_epochs * cfg.schedule.steps_per_epoch;
    if (warmup > 0 && step < warmup) return cfg.base_lr * double(step + 1) / double(warmup);
    if (total <= warmup) return cfg.base_lr;
    double t = double(step - warmup) / double(total - warmup);
    t = std::min(1.0, std::max(0.0, t));
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// One AdamW step (decoupled weight decay) over a parameter list. step_index
// counts optimizer calls from 0; bias correction uses step_index+1.
template <class T>
void adamw_step(const std::vector<ParamPtr<T>>& params, const OptimizerConfig& cfg,
                std::int64_t step_index) {
    double lr = lr_at_step(cfg, step_index);
    double t = double(step_index + 1);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& p : params) {
        const auto& g = p->grad();
        auto& w = p->values();
        if (cfg.weight_decay > 0) {
            T decay = T(1.0 - lr * cfg.weight_decay);
            for (auto& x : w) x *= decay;
        }
        if (g.empty()) continue;  // unreached by the last backward: decay only
        if (p->m.empty()) {
            p->m.assign(w.size(), T(0));
            p->v.assign(w.size(), T(0));
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            double gi = double(g[i]);
            double m = cfg.beta1 * double(p->m[i]) + (1.0 - cfg.beta1) * gi;
            double v = cfg.beta2 * double(p->v[i]) + (1.0 - cfg.beta2) * gi * gi;
            p->m[i] = T(m);
            p->v[i] = T(v);
            double mhat = m / bc1;
            double vhat = v / bc2;
            w[i] -= T(lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// teacher <- m * teacher + (1-m) * student, matched by name. The teacher
// list must contain exactly the student names with equal shapes.
template <class T>
void ema_update(const std::vector<ParamPtr<T>>& teacher, const std::vector<ParamPtr<T>>& student,
                double momentum) {
    TCAE_CHECK(teacher.size() == student.size(), "ema_update: parameter count mismatch (",
               teacher.size(), " vs ", student.size(), ")");
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        auto& tp = *teacher[i];
        auto& sp = *student[i];
        TCAE_CHECK(tp.name == sp.name, "ema_update: name mismatch '", tp.name, "' vs '", sp.name, "'");
        TCAE_CHECK(tp.size() == sp.size(), "ema_update: shape mismatch for '", tp.name, "'");
        auto& tv = tp.values();
        const auto& sv = sp.values();
        T m = T(momentum);
        T om = T(1.0 - momentum);
        for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = m * tv[j] + om * sv[j];
    }
}

}  // namespace tcae
