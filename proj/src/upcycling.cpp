#include "moelab/upcycling.hpp"

#include <cmath>
#include <sstream>

#include "moelab/rng.hpp"

namespace moelab {

namespace {

Tensor clone_tensor(const Tensor& t) {
    Tensor c = Tensor::zeros(t.shape(), t.dtype(), false);
    detail::dispatch_dtype(t.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto src = t.raw().values<S>();
        auto dst = c.raw().values<S>();
        std::copy(src.begin(), src.end(), dst.begin());
    });
    return c;
}

bool is_dense_ffn_param(const std::string& name) {
    return name.find(".ffn.") != std::string::npos;
}

std::string expert_name_for(const std::string& dense_ffn_name, int64_t expert) {
    // layers.{l}.ffn.w_gate -> layers.{l}.moe.experts.{e}.w_gate
    const size_t pos = dense_ffn_name.find(".ffn.");
    return dense_ffn_name.substr(0, pos) + ".moe.experts." + std::to_string(expert) + "." +
           dense_ffn_name.substr(pos + 5);
}

void check_dense(const Checkpoint& ckpt, const char* op) {
    if (ckpt.meta.kind != CheckpointKind::dense) {
        throw ConsistencyError(std::string(op) + ": input checkpoint is not dense");
    }
}

// Builds the MoE checkpoint skeleton from a dense source: copies non-FFN
// parameters, reshapes meta, and initializes the gate. Expert slots are filled
// by the caller.
Checkpoint moe_skeleton(const Checkpoint& dense, int64_t n_experts, double gate_init_scale,
                        uint64_t gate_seed, int64_t moe_layer_frequency) {
    if (n_experts < 1) throw ParameterError("upcycle: n_experts must be >= 1");
    Checkpoint out;
    out.meta.kind = CheckpointKind::moe;
    out.meta.model = dense.meta.model;
    out.meta.model.n_experts = n_experts;
    out.meta.model.top_k = std::min<int64_t>(2, n_experts);
    out.meta.model.moe_layer_frequency = moe_layer_frequency;
    out.meta.model.validate();
    out.meta.tokens_trained = dense.meta.tokens_trained;

    for (const auto& [name, tensor] : dense.params) {
        if (!is_dense_ffn_param(name) || !out.meta.model.layer_is_moe(
                                             std::stoll(name.substr(7)))) {
            out.params.emplace(name, clone_tensor(tensor));
        }
    }

    Rng rng(Rng::derive_seed(gate_seed, 0x67617465));  // gate stream
    const int64_t d = out.meta.model.hidden_dim;
    const DType dt = dense.params.empty() ? DType::f64 : dense.params.begin()->second.dtype();
    for (int64_t l = 0; l < out.meta.model.layers; ++l) {
        if (!out.meta.model.layer_is_moe(l)) continue;
        const std::string prefix = "layers." + std::to_string(l) + ".moe.gate.";
        Tensor w = Tensor::zeros({d, n_experts}, dt);
        for (int64_t i = 0; i < w.numel(); ++i) w.set(i, rng.normal(0.0, gate_init_scale));
        out.params.emplace(prefix + "w", std::move(w));
        out.params.emplace(prefix + "b", Tensor::zeros({n_experts}, dt));
    }
    return out;
}

void fill_experts_from(Checkpoint& moe, const Checkpoint& source,
                       const std::vector<int64_t>& expert_slots) {
    for (const auto& [name, tensor] : source.params) {
        if (!is_dense_ffn_param(name)) continue;
        const int64_t layer = std::stoll(name.substr(7));
        if (!moe.meta.model.layer_is_moe(layer)) continue;
        for (int64_t slot : expert_slots) {
            moe.params.emplace(expert_name_for(name, slot), clone_tensor(tensor));
        }
    }
}

}  // namespace

Checkpoint upcycle_replicate(const Checkpoint& dense, int64_t n_experts, double gate_init_scale,
                             uint64_t gate_seed, int64_t moe_layer_frequency) {
    check_dense(dense, "upcycle_replicate");
    Checkpoint out =
        moe_skeleton(dense, n_experts, gate_init_scale, gate_seed, moe_layer_frequency);
    std::vector<int64_t> slots(static_cast<size_t>(n_experts));
    for (int64_t e = 0; e < n_experts; ++e) slots[static_cast<size_t>(e)] = e;
    fill_experts_from(out, dense, slots);
    return out;
}

Checkpoint upcycle_specialized(const std::vector<std::pair<Checkpoint, int64_t>>& sources,
                               double gate_init_scale, uint64_t gate_seed,
                               int64_t moe_layer_frequency, double non_ffn_tolerance) {
    if (sources.empty()) throw ParameterError("upcycle_specialized: no source checkpoints");
    int64_t n_experts = 0;
    for (const auto& [ckpt, copies] : sources) {
        check_dense(ckpt, "upcycle_specialized");
        if (copies < 1) throw ParameterError("upcycle_specialized: copies must be >= 1");
        n_experts += copies;
    }

    const Checkpoint& first = sources.front().first;
    // The specialization protocol trains only the FFN blocks, so everything
    // else must still agree across the inputs.
    for (size_t s = 1; s < sources.size(); ++s) {
        const Checkpoint& other = sources[s].first;
        if (other.params.size() != first.params.size()) {
            throw ConsistencyError("upcycle_specialized: checkpoint " + std::to_string(s) +
                                   " has a different parameter set");
        }
        for (const auto& [name, tensor] : first.params) {
            auto it = other.params.find(name);
            if (it == other.params.end() || it->second.shape() != tensor.shape()) {
                throw ConsistencyError("upcycle_specialized: parameter '" + name +
                                       "' missing or reshaped in checkpoint " + std::to_string(s));
            }
            if (is_dense_ffn_param(name)) continue;
            const auto a = tensor.to_doubles();
            const auto b = it->second.to_doubles();
            for (size_t i = 0; i < a.size(); ++i) {
                if (std::abs(a[i] - b[i]) > non_ffn_tolerance) {
                    std::ostringstream os;
                    os << "upcycle_specialized: non-FFN parameter '" << name
                       << "' diverges between checkpoint 0 and " << s << " (|" << a[i] << " - "
                       << b[i] << "| > " << non_ffn_tolerance << ")";
                    throw ConsistencyError(os.str());
                }
            }
        }
    }

    Checkpoint out = moe_skeleton(first, n_experts, gate_init_scale, gate_seed,
                                  moe_layer_frequency);
    int64_t next_slot = 0;
    for (const auto& [ckpt, copies] : sources) {
        std::vector<int64_t> slots;
        for (int64_t c = 0; c < copies; ++c) slots.push_back(next_slot++);
        fill_experts_from(out, ckpt, slots);
    }
    return out;
}

Recommendation recommend_initialization(const BudgetQuery& q, double r_low) {
    if (q.c_dense < 0.0 || q.c_moe <= 0.0) {
        throw ParameterError("recommend_initialization: budgets must satisfy c_dense >= 0, "
                             "c_moe > 0");
    }
    std::ostringstream os;
    Recommendation rec;
    if (q.c_dense == 0.0) {
        rec.decision = InitDecision::FromScratch;
        os << "no dense checkpoint exists to upcycle from, so train the MoE from scratch";
    } else if (q.c_moe >= 2.0 * q.c_dense) {
        rec.decision = InitDecision::FromScratch;
        os << "the MoE budget (" << q.c_moe << ") is at least twice the dense cost (" << q.c_dense
           << "); from-scratch training avoids the diversification drag of identical experts";
    } else if (q.c_moe <= r_low * q.c_dense) {
        rec.decision = InitDecision::Upcycle;
        os << "the MoE budget (" << q.c_moe << ") is small next to the dense cost (" << q.c_dense
           << "); upcycling exploits the sunk cost already invested in the dense model";
    } else {
        rec.decision = InitDecision::Indeterminate;
        os << "the budget sits between " << r_low << "x and 2x the dense cost; upcycling "
           << "converges from a lower initial loss while from-scratch training diversifies "
           << "experts more easily, and the evidence covers only the two endpoints";
    }
    rec.rationale = os.str();
    return rec;
}

}  // namespace moelab
