#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "moelab/errors.hpp"

namespace moelab {

enum class ScheduleShape { cosine, constant, linear };

ScheduleShape schedule_shape_from_name(const std::string& name);
const char* schedule_shape_name(ScheduleShape s);

struct ScheduleConfig {
    double peak_lr = 3e-3;
    double min_lr = 3e-4;
    int64_t total_tokens = 1'000'000;
    int64_t warmup_tokens = 0;
    ScheduleShape shape = ScheduleShape::cosine;
    // Learning-rate multiplier per parameter group ("expert" / "non_expert").
    std::map<std::string, double> per_group_scale;

    void validate() const {
        if (peak_lr <= 0.0) throw ParameterError("schedule: peak_lr must be positive");
        if (min_lr < 0.0 || min_lr > peak_lr) {
            throw ParameterError("schedule: need 0 <= min_lr <= peak_lr");
        }
        if (total_tokens < 1) throw ParameterError("schedule: total_tokens must be >= 1");
        if (warmup_tokens < 0 || warmup_tokens > total_tokens) {
            throw ParameterError("schedule: warmup_tokens outside [0, total_tokens]");
        }
        for (const auto& [group, scale] : per_group_scale) {
            if (group != "expert" && group != "non_expert") {
                throw ParameterError("schedule: unknown parameter group '" + group + "'");
            }
            if (scale <= 0.0) throw ParameterError("schedule: group multipliers must be positive");
        }
    }

    double group_scale(const std::string& group) const {
        auto it = per_group_scale.find(group);
        return it == per_group_scale.end() ? 1.0 : it->second;
    }
};

// Linear warmup to peak over warmup_tokens, then the configured decay to
// min_lr at total_tokens, clamped at min_lr afterwards.
double scheduled_lr(int64_t tokens_seen, const ScheduleConfig& sched);

// The cosine special case, kept under its own name since it is the default.
inline double cosine_lr(int64_t tokens_seen, const ScheduleConfig& sched) {
    return scheduled_lr(tokens_seen, sched);
}

}  // namespace moelab
