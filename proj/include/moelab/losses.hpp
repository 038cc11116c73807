#pragma once

#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

// Load measurements for one MoE layer and batch. p follows the convention
// p_j = k * mean_i(g_ij), so a balanced load means p_j = k/n and the entries
// sum to k. gate_means are the raw per-expert mean gate probabilities.
struct LoadStats {
    std::vector<double> p;
    std::vector<double> gate_means;
};

LoadStats load_stats(const Tensor& gate_probs, int64_t k);

// sum_j (k/n - p_j)^2 over realized proportions; a plain-number oracle, not
// differentiable.
double aux_loss_naive(const std::vector<double>& p, int64_t k, int64_t n);

// sum_j (1/n - mean_i g_ij)^2; zero iff the column means are all 1/n.
Tensor aux_loss_surrogate(const Tensor& gate_probs);

// ce + sum_l alpha[l] * aux[l]; the coefficients are constants under
// differentiation.
Tensor total_loss(const Tensor& ce, const std::vector<Tensor>& aux_per_layer,
                  const std::vector<double>& alpha_per_layer);

}  // namespace moelab
