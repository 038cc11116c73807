#include "moelab/controller.hpp"

#include <string>

namespace moelab {

double f_target(double d, const ControllerConfig& cfg) {
    if (d < 0.0 || d > 1.0) {
        throw ParameterError("f_target: drop rate " + std::to_string(d) + " outside [0,1]");
    }
    const double knee = cfg.alpha_max / cfg.xi;
    return d <= knee ? cfg.xi * d : cfg.alpha_max;
}

ControllerState controller_update(const ControllerState& state,
                                  const std::vector<double>& drop_rates,
                                  const ControllerConfig& cfg) {
    cfg.validate();
    if (drop_rates.size() != state.alpha.size()) {
        throw ParameterError("controller_update: " + std::to_string(drop_rates.size()) +
                             " drop rates for " + std::to_string(state.alpha.size()) + " layers");
    }
    ControllerState next = state;
    next.step = state.step + 1;
    if (!cfg.enabled) return next;
    for (size_t l = 0; l < next.alpha.size(); ++l) {
        next.alpha[l] = cfg.beta * state.alpha[l] + (1.0 - cfg.beta) * f_target(drop_rates[l], cfg);
    }
    return next;
}

}  // namespace moelab
