#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/checkpoint.hpp"

namespace moelab {

// Expand a dense checkpoint into an MoE checkpoint: every FFN block becomes
// n identical expert copies, everything else is copied verbatim, and the gate
// gets a fresh zero-mean init (the dense model has no gate to inherit).
Checkpoint upcycle_replicate(const Checkpoint& dense, int64_t n_experts,
                             double gate_init_scale = 0.02, uint64_t gate_seed = 0,
                             int64_t moe_layer_frequency = 1);

// Fill the expert slots from several dense checkpoints' FFN weights, in order,
// each contributing `copies` experts. The inputs must agree on all non-FFN
// parameters (they differ only in FFN continued pre-training); non-FFN weights
// come from the first checkpoint.
Checkpoint upcycle_specialized(const std::vector<std::pair<Checkpoint, int64_t>>& sources,
                               double gate_init_scale = 0.02, uint64_t gate_seed = 0,
                               int64_t moe_layer_frequency = 1,
                               double non_ffn_tolerance = 1e-6);

enum class InitDecision { Upcycle, FromScratch, Indeterminate };

inline const char* init_decision_name(InitDecision d) {
    switch (d) {
        case InitDecision::Upcycle: return "upcycle";
        case InitDecision::FromScratch: return "from_scratch";
        default: return "indeterminate";
    }
}

struct BudgetQuery {
    double c_dense = 0.0;  // cost already spent on the dense checkpoint
    double c_moe = 1.0;    // training budget for the MoE, same units
};

struct Recommendation {
    InitDecision decision = InitDecision::Indeterminate;
    std::string rationale;
};

// Budget rules of thumb: no dense checkpoint -> from scratch; budget at least
// twice the dense cost -> from scratch; budget at most r_low of the dense cost
// -> upcycle; in between the evidence is mixed and both trade-offs are stated.
Recommendation recommend_initialization(const BudgetQuery& q, double r_low = 2.0 / 3.0);

}  // namespace moelab
