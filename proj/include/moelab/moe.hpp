#pragma once

#include <cstdint>
#include <vector>

#include "moelab/gating.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// One expert's SwiGLU weights.
struct ExpertFfn {
    Tensor w_gate;  // [d x h]
    Tensor w_up;    // [d x h]
    Tensor w_down;  // [h x d]
};

// All experts of one MoE layer; shapes must agree across experts.
struct ExpertBank {
    std::vector<ExpertFfn> experts;

    int64_t size() const { return static_cast<int64_t>(experts.size()); }
};

struct CapacityConfig {
    // Per-expert capacity = ceil(capacity_factor * T * k / n). Overflowing
    // assignments are dropped in token-index order.
    double capacity_factor = 1.25;
};

struct DispatchResult {
    // Kept assignments per expert: (token index, combine weight), in arrival
    // order.
    struct Assignment {
        int64_t token;
        int64_t slot;  // position within the token's selected list
        double weight;
    };
    std::vector<std::vector<Assignment>> routed;  // [n]
    std::vector<std::vector<bool>> dropped;       // [T][k]
    int64_t capacity = 0;
    double drop_rate = 0.0;
};

DispatchResult dispatch(const GateDecision& decision, const CapacityConfig& cfg);

// Combine surviving expert outputs per token, weighted by g_ij / s_i taken
// from the decision's probability tensor so gradients flow into the gate.
// Dropped assignments contribute zero; surviving weights are not renormalized.
Tensor moe_forward(const Tensor& x, const ExpertBank& bank, const GateDecision& decision,
                   const DispatchResult& dispatch_result);

}  // namespace moelab
