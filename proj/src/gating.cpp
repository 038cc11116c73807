#include "moelab/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/ops.hpp"

namespace moelab {

Tensor gate_logits(const Tensor& x, const GateParams& params) {
    return ops::add_rowvec(ops::matmul(x, params.W), params.b);
}

Tensor normalize_logits(const Tensor& z, double lambda, double epsilon_sigma,
                        bool detach_stats) {
    if (z.rank() != 2 || z.dim(1) < 2) {
        throw DimensionError("normalize_logits: need [T x n] with n >= 2, got " +
                             shape_str(z.shape()));
    }
    if (lambda <= 0.0 || epsilon_sigma <= 0.0) {
        throw ParameterError("normalize_logits: lambda and epsilon_sigma must be positive");
    }
    Tensor mu, sigma;
    if (detach_stats) {
        NoGradGuard guard;
        mu = ops::row_mean(z);
        Tensor centered = ops::sub_colvec(z, mu);
        sigma = ops::sqrt(ops::row_mean(ops::mul(centered, centered)));
    } else {
        mu = ops::row_mean(z);
        Tensor centered = ops::sub_colvec(z, mu);
        sigma = ops::sqrt(ops::row_mean(ops::mul(centered, centered)));
    }
    Tensor centered = ops::sub_colvec(z, mu);
    return ops::scale(ops::div_colvec(centered, ops::add_const(sigma, epsilon_sigma)), lambda);
}

Tensor gate_probabilities(const Tensor& x, const GateParams& params) {
    Tensor z = gate_logits(x, params);
    if (params.normalize) {
        z = normalize_logits(z, params.lambda, params.epsilon_sigma, params.detach_norm_stats);
    }
    return ops::softmax(z);
}

GateDecision top_k_select(const Tensor& probs, int64_t k) {
    if (probs.rank() != 2) {
        throw DimensionError("top_k_select: probs must be [T x n], got " +
                             shape_str(probs.shape()));
    }
    const int64_t tokens = probs.dim(0), experts = probs.dim(1);
    if (k < 1 || k > experts) {
        throw ParameterError("top_k_select: k=" + std::to_string(k) +
                             " outside [1, n=" + std::to_string(experts) + "]");
    }
    GateDecision decision;
    decision.probs = probs;
    decision.k = k;
    decision.selected.resize(static_cast<size_t>(tokens));
    decision.combine_weights.resize(static_cast<size_t>(tokens));

    const auto values = probs.to_doubles();
    std::vector<int64_t> order(static_cast<size_t>(experts));
    for (int64_t t = 0; t < tokens; ++t) {
        const double* row = values.data() + t * experts;
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [row](int64_t a, int64_t b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;
        });
        auto& sel = decision.selected[static_cast<size_t>(t)];
        auto& wts = decision.combine_weights[static_cast<size_t>(t)];
        sel.assign(order.begin(), order.begin() + k);
        double s = 0.0;
        for (int64_t j : sel) s += row[j];
        wts.resize(sel.size());
        for (size_t i = 0; i < sel.size(); ++i) wts[i] = row[sel[i]] / s;
    }
    return decision;
}

GateStats gate_statistics(const Tensor& probs) {
    if (probs.rank() != 2 || probs.dim(1) < 2) {
        throw DimensionError("gate_statistics: probs must be [T x n] with n >= 2");
    }
    const int64_t tokens = probs.dim(0), experts = probs.dim(1);
    const auto values = probs.to_doubles();

    GateStats stats;
    double sum_r12 = 0.0, sum_r23 = 0.0, sum_entropy = 0.0, sum_top1 = 0.0;
    for (int64_t t = 0; t < tokens; ++t) {
        const double* row = values.data() + t * experts;
        double m1 = -1.0, m2 = -1.0, m3 = -1.0;
        double entropy = 0.0;
        for (int64_t j = 0; j < experts; ++j) {
            const double p = row[j];
            if (p > 0.0) entropy -= p * std::log(p);
            if (p > m1) {
                m3 = m2;
                m2 = m1;
                m1 = p;
            } else if (p > m2) {
                m3 = m2;
                m2 = p;
            } else if (p > m3) {
                m3 = p;
            }
        }
        sum_r12 += m1 / std::max(m2, 1e-300);
        if (experts >= 3) sum_r23 += m2 / std::max(m3, 1e-300);
        sum_entropy += entropy;
        sum_top1 += m1;
    }
    const double inv = 1.0 / static_cast<double>(tokens);
    stats.max1_over_max2 = sum_r12 * inv;
    if (experts >= 3) stats.max2_over_max3 = sum_r23 * inv;
    stats.mean_entropy = sum_entropy * inv;
    stats.mean_top1 = sum_top1 * inv;
    return stats;
}

}  // namespace moelab
