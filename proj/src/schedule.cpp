#include "moelab/schedule.hpp"

#include <cmath>

namespace moelab {

ScheduleShape schedule_shape_from_name(const std::string& name) {
    if (name == "cosine") return ScheduleShape::cosine;
    if (name == "constant") return ScheduleShape::constant;
    if (name == "linear") return ScheduleShape::linear;
    throw ParameterError("schedule: unknown shape '" + name + "' (cosine|constant|linear)");
}

const char* schedule_shape_name(ScheduleShape s) {
    switch (s) {
        case ScheduleShape::cosine: return "cosine";
        case ScheduleShape::constant: return "constant";
        default: return "linear";
    }
}

double scheduled_lr(int64_t tokens_seen, const ScheduleConfig& sched) {
    sched.validate();
    if (tokens_seen < 0) throw ParameterError("schedule: tokens_seen must be >= 0");
    if (sched.shape == ScheduleShape::constant) return sched.peak_lr;
    if (tokens_seen < sched.warmup_tokens) {
        return sched.peak_lr * static_cast<double>(tokens_seen) /
               static_cast<double>(sched.warmup_tokens);
    }
    if (tokens_seen >= sched.total_tokens) return sched.min_lr;
    const double progress = static_cast<double>(tokens_seen - sched.warmup_tokens) /
                            static_cast<double>(sched.total_tokens - sched.warmup_tokens);
    if (sched.shape == ScheduleShape::linear) {
        return sched.peak_lr + (sched.min_lr - sched.peak_lr) * progress;
    }
    return sched.min_lr +
           (sched.peak_lr - sched.min_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace moelab
