#include "moelab/moe.hpp"

#include <cmath>

#include "moelab/ops.hpp"

namespace moelab {

DispatchResult dispatch(const GateDecision& decision, const CapacityConfig& cfg) {
    if (cfg.capacity_factor <= 0.0) {
        throw ParameterError("dispatch: capacity_factor must be positive");
    }
    const int64_t tokens = decision.tokens();
    const int64_t experts = decision.experts();
    const int64_t k = decision.k;

    DispatchResult result;
    result.capacity = static_cast<int64_t>(std::ceil(
        cfg.capacity_factor * static_cast<double>(tokens * k) / static_cast<double>(experts)));
    result.routed.resize(static_cast<size_t>(experts));
    result.dropped.assign(static_cast<size_t>(tokens),
                          std::vector<bool>(static_cast<size_t>(k), false));

    int64_t dropped_count = 0;
    std::vector<int64_t> load(static_cast<size_t>(experts), 0);
    for (int64_t t = 0; t < tokens; ++t) {
        const auto& sel = decision.selected[static_cast<size_t>(t)];
        const auto& wts = decision.combine_weights[static_cast<size_t>(t)];
        for (size_t slot = 0; slot < sel.size(); ++slot) {
            const int64_t e = sel[slot];
            if (load[static_cast<size_t>(e)] < result.capacity) {
                ++load[static_cast<size_t>(e)];
                result.routed[static_cast<size_t>(e)].push_back(
                    {t, static_cast<int64_t>(slot), wts[slot]});
            } else {
                result.dropped[static_cast<size_t>(t)][slot] = true;
                ++dropped_count;
            }
        }
    }
    result.drop_rate =
        static_cast<double>(dropped_count) / static_cast<double>(tokens * k);
    return result;
}

Tensor moe_forward(const Tensor& x, const ExpertBank& bank, const GateDecision& decision,
                   const DispatchResult& dispatch_result) {
    if (x.rank() != 2) {
        throw DimensionError("moe_forward: x must be [T x d], got " + shape_str(x.shape()));
    }
    const int64_t tokens = x.dim(0);
    const int64_t experts = bank.size();
    if (decision.tokens() != tokens) {
        throw DimensionError("moe_forward: decision covers " + std::to_string(decision.tokens()) +
                             " tokens, x has " + std::to_string(tokens));
    }
    if (decision.experts() != experts) {
        throw DimensionError("moe_forward: decision has " + std::to_string(decision.experts()) +
                             " experts, bank has " + std::to_string(experts));
    }
    const int64_t k = decision.k;
    const int64_t n = experts;

    // Differentiable combine weights rebuilt from the probability tensor:
    // w[t,slot] = g_{t,sel} / sum over the token's selected gates. The sum
    // includes dropped assignments, so drops are a pure capacity effect.
    std::vector<int64_t> sel_flat;
    sel_flat.reserve(static_cast<size_t>(tokens * k));
    for (int64_t t = 0; t < tokens; ++t) {
        for (int64_t e : decision.selected[static_cast<size_t>(t)]) sel_flat.push_back(t * n + e);
    }
    Tensor gates = ops::gather_elems(decision.probs, sel_flat);          // [T*k]
    Tensor denom = ops::repeat_interleave(ops::sum_groups(gates, k), k);  // [T*k]
    Tensor weights = ops::div(gates, denom);                              // [T*k]

    Tensor out = Tensor::zeros({tokens, x.dim(1)}, x.dtype());
    for (int64_t e = 0; e < n; ++e) {
        const auto& routed = dispatch_result.routed[static_cast<size_t>(e)];
        if (routed.empty()) continue;
        std::vector<int64_t> token_rows;
        std::vector<int64_t> weight_pos;
        token_rows.reserve(routed.size());
        weight_pos.reserve(routed.size());
        for (const auto& a : routed) {
            token_rows.push_back(a.token);
            weight_pos.push_back(a.token * k + a.slot);
        }
        const ExpertFfn& ffn = bank.experts[static_cast<size_t>(e)];
        Tensor inputs = ops::gather_rows(x, token_rows);
        Tensor expert_out = ops::swiglu_ffn(inputs, ffn.w_gate, ffn.w_up, ffn.w_down);
        Tensor w = ops::gather_elems(weights, weight_pos);
        out = ops::add(out, ops::scatter_rows_scaled(expert_out, token_rows, w, tokens));
    }
    return out;
}

}  // namespace moelab
