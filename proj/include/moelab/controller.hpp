#pragma once

#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Adaptive per-layer auxiliary-loss coefficients: each layer's coefficient is
// an exponential moving average of a clipped linear function of that layer's
// observed token drop rate.
struct ControllerConfig {
    double xi = 0.2;          // sensitivity of the target to the drop rate
    double alpha_max = 0.01;  // clip on the target
    double beta = 0.99;       // EMA weight on the previous coefficient
    double alpha_init = 0.01;
    bool enabled = true;  // when false, coefficients stay frozen at alpha_init

    void validate() const {
        if (xi <= 0.0) throw ParameterError("controller: xi must be positive");
        if (alpha_max <= 0.0) throw ParameterError("controller: alpha_max must be positive");
        if (beta <= 0.0 || beta >= 1.0) throw ParameterError("controller: beta must be in (0,1)");
        if (alpha_init < 0.0) throw ParameterError("controller: alpha_init must be >= 0");
    }
};

struct ControllerState {
    std::vector<double> alpha;  // one coefficient per MoE layer
    int64_t step = 0;

    static ControllerState init(size_t layers, const ControllerConfig& cfg) {
        ControllerState s;
        s.alpha.assign(layers, cfg.alpha_init);
        return s;
    }
};

// Target coefficient for a drop rate d: xi*d below the knee at alpha_max/xi,
// clipped to alpha_max above it. Continuous and non-decreasing.
double f_target(double d, const ControllerConfig& cfg);

// alpha[l] <- beta*alpha[l] + (1-beta)*f_target(drop_rates[l]); layers are
// fully independent. Returns the new state with step incremented.
ControllerState controller_update(const ControllerState& state,
                                  const std::vector<double>& drop_rates,
                                  const ControllerConfig& cfg);

}  // namespace moelab
