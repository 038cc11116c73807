#pragma once

#include <optional>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

// Router parameters for one MoE layer: a linear map to per-expert logits,
// optionally standardized per token before the softmax so the distribution
// sharpness is pinned by lambda instead of drifting with the logit scale.
struct GateParams {
    Tensor W;  // [d x n]
    Tensor b;  // [n]
    bool normalize = false;
    double lambda = 1.0;
    double epsilon_sigma = 1e-6;
    // Ablation switch: treat the per-row mean/std as constants instead of
    // differentiating through them.
    bool detach_norm_stats = false;
};

// Routing outcome for a batch of tokens. probs stays on the autodiff graph;
// the integer selections and their normalized combine weights are plain data.
struct GateDecision {
    Tensor probs;  // [T x n]
    // Per token: k expert indices, largest probability first, ties broken by
    // the lower index.
    std::vector<std::vector<int64_t>> selected;
    // Per token: g_ij / s_i over the selected set, aligned with `selected`.
    std::vector<std::vector<double>> combine_weights;
    int64_t k = 0;

    int64_t tokens() const { return static_cast<int64_t>(selected.size()); }
    int64_t experts() const { return probs.dim(1); }
};

struct GateStats {
    double max1_over_max2 = 0.0;
    std::optional<double> max2_over_max3;  // absent when n < 3
    double mean_entropy = 0.0;             // nats
    double mean_top1 = 0.0;
};

// z = x W + b
Tensor gate_logits(const Tensor& x, const GateParams& params);

// Per row: lambda * (z - mean) / (population std + epsilon_sigma). Output rows
// have zero mean; std approaches lambda when the row std dominates the guard.
Tensor normalize_logits(const Tensor& z, double lambda, double epsilon_sigma,
                        bool detach_stats = false);

// softmax over (optionally normalized) gate logits; rows sum to 1.
Tensor gate_probabilities(const Tensor& x, const GateParams& params);

GateDecision top_k_select(const Tensor& probs, int64_t k);

GateStats gate_statistics(const Tensor& probs);

}  // namespace moelab
