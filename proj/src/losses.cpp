#include "moelab/losses.hpp"

#include "moelab/ops.hpp"

namespace moelab {

LoadStats load_stats(const Tensor& gate_probs, int64_t k) {
    if (gate_probs.rank() != 2) {
        throw DimensionError("load_stats: gate_probs must be [T x n]");
    }
    const int64_t tokens = gate_probs.dim(0), experts = gate_probs.dim(1);
    LoadStats stats;
    stats.gate_means.assign(static_cast<size_t>(experts), 0.0);
    const auto values = gate_probs.to_doubles();
    for (int64_t t = 0; t < tokens; ++t)
        for (int64_t j = 0; j < experts; ++j)
            stats.gate_means[static_cast<size_t>(j)] += values[static_cast<size_t>(t * experts + j)];
    for (double& m : stats.gate_means) m /= static_cast<double>(tokens);
    stats.p.resize(stats.gate_means.size());
    for (size_t j = 0; j < stats.p.size(); ++j)
        stats.p[j] = static_cast<double>(k) * stats.gate_means[j];
    return stats;
}

double aux_loss_naive(const std::vector<double>& p, int64_t k, int64_t n) {
    if (static_cast<int64_t>(p.size()) != n) {
        throw ParameterError("aux_loss_naive: got " + std::to_string(p.size()) +
                             " proportions for n=" + std::to_string(n));
    }
    const double target = static_cast<double>(k) / static_cast<double>(n);
    double acc = 0.0;
    for (double pj : p) {
        if (pj < 0.0) throw ParameterError("aux_loss_naive: negative proportion");
        const double d = target - pj;
        acc += d * d;
    }
    return acc;
}

Tensor aux_loss_surrogate(const Tensor& gate_probs) {
    if (gate_probs.rank() != 2) {
        throw DimensionError("aux_loss_surrogate: gate_probs must be [T x n]");
    }
    const double inv_n = 1.0 / static_cast<double>(gate_probs.dim(1));
    Tensor gap = ops::sub_from_const(inv_n, ops::col_mean(gate_probs));
    return ops::sum(ops::mul(gap, gap));
}

Tensor total_loss(const Tensor& ce, const std::vector<Tensor>& aux_per_layer,
                  const std::vector<double>& alpha_per_layer) {
    if (aux_per_layer.size() != alpha_per_layer.size()) {
        throw ParameterError("total_loss: " + std::to_string(aux_per_layer.size()) +
                             " aux terms but " + std::to_string(alpha_per_layer.size()) +
                             " coefficients");
    }
    Tensor total = ce;
    for (size_t l = 0; l < aux_per_layer.size(); ++l) {
        total = ops::add(total, ops::scale(aux_per_layer[l], alpha_per_layer[l]));
    }
    return total;
}

}  // namespace moelab
