#include "moelab/model.hpp"

#include <array>
#include <cmath>

#include "moelab/losses.hpp"
#include "moelab/ops.hpp"

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

std::string layer_prefix(int64_t l) { return "layers." + std::to_string(l) + "."; }

}  // namespace

TransformerModel::TransformerModel(ModelConfig cfg, DType dtype)
    : cfg_(std::move(cfg)), dtype_(dtype) {
    cfg_.validate();
    build_layout();
}

void TransformerModel::build_layout() {
    const int64_t d = cfg_.hidden_dim, h = cfg_.ffn_dim, V = cfg_.vocab_size, S = cfg_.seq_len;
    auto add = [&](const std::string& name, Shape shape) {
        params_.emplace(name, Tensor::zeros(std::move(shape), dtype_, true));
    };
    add("embed.tok", {V, d});
    add("embed.pos", {S, d});
    for (int64_t l = 0; l < cfg_.layers; ++l) {
        const std::string p = layer_prefix(l);
        add(p + "attn_norm.w", {d});
        add(p + "attn.wq", {d, d});
        add(p + "attn.wk", {d, d});
        add(p + "attn.wv", {d, d});
        add(p + "attn.wo", {d, d});
        add(p + "ffn_norm.w", {d});
        if (cfg_.layer_is_moe(l)) {
            add(p + "moe.gate.w", {d, cfg_.n_experts});
            add(p + "moe.gate.b", {cfg_.n_experts});
            for (int64_t e = 0; e < cfg_.n_experts; ++e) {
                const std::string ep = p + "moe.experts." + std::to_string(e) + ".";
                add(ep + "w_gate", {d, h});
                add(ep + "w_up", {d, h});
                add(ep + "w_down", {h, d});
            }
        } else {
            add(p + "ffn.w_gate", {d, h});
            add(p + "ffn.w_up", {d, h});
            add(p + "ffn.w_down", {h, d});
        }
    }
    add("final_norm.w", {d});
    add("lm_head.w", {d, V});
}

void TransformerModel::init_random(uint64_t seed, double init_std) {
    Rng rng(seed);
    for (auto& [name, tensor] : params_) {
        const bool is_norm = name.ends_with("norm.w");
        const bool is_bias = name.ends_with("gate.b");
        for (int64_t i = 0; i < tensor.numel(); ++i) {
            if (is_norm) {
                tensor.set(i, 1.0);
            } else if (is_bias) {
                tensor.set(i, 0.0);
            } else {
                tensor.set(i, rng.normal(0.0, init_std));
            }
        }
    }
}

Tensor& TransformerModel::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ParameterError("model: no parameter named '" + name + "'");
    }
    return it->second;
}

bool TransformerModel::is_expert_param(const std::string& name) {
    return name.find(".moe.experts.") != std::string::npos;
}

bool TransformerModel::is_no_decay_param(const std::string& name) {
    return name.ends_with("norm.w") || name.ends_with("gate.b");
}

void TransformerModel::load_params(const Checkpoint& ckpt) {
    if (ckpt.params.size() != params_.size()) {
        throw ConsistencyError("model: checkpoint has " + std::to_string(ckpt.params.size()) +
                               " tensors, layout expects " + std::to_string(params_.size()));
    }
    for (auto& [name, tensor] : params_) {
        auto it = ckpt.params.find(name);
        if (it == ckpt.params.end()) {
            throw ConsistencyError("model: checkpoint is missing parameter '" + name + "'");
        }
        if (it->second.shape() != tensor.shape()) {
            throw ConsistencyError("model: parameter '" + name + "' has shape " +
                                   shape_str(it->second.shape()) + ", layout expects " +
                                   shape_str(tensor.shape()));
        }
        const auto values = it->second.to_doubles();
        for (int64_t i = 0; i < tensor.numel(); ++i) tensor.set(i, values[static_cast<size_t>(i)]);
    }
}

Checkpoint TransformerModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta.kind = cfg_.is_moe() ? CheckpointKind::moe : CheckpointKind::dense;
    ckpt.meta.model = cfg_;
    for (const auto& [name, tensor] : params_) ckpt.params.emplace(name, clone_tensor(tensor));
    return ckpt;
}

Tensor TransformerModel::embed(const std::vector<int64_t>& tokens, int64_t batch) {
    const int64_t total = static_cast<int64_t>(tokens.size());
    const int64_t seq = total / batch;
    for (int64_t t : tokens) {
        if (t < 0 || t >= cfg_.vocab_size) {
            throw IndexError("model: token id " + std::to_string(t) + " outside vocabulary");
        }
    }
    std::vector<int64_t> positions(tokens.size());
    for (int64_t i = 0; i < total; ++i) positions[static_cast<size_t>(i)] = i % seq;
    return ops::add(ops::gather_rows(param("embed.tok"), tokens),
                    ops::gather_rows(param("embed.pos"), positions));
}

ForwardResult TransformerModel::forward(const std::vector<int64_t>& tokens,
                                        const std::vector<int64_t>& targets, int64_t batch) {
    if (tokens.size() != targets.size() || tokens.empty()) {
        throw DimensionError("model: tokens and targets must be equal-length and non-empty");
    }
    if (static_cast<int64_t>(tokens.size()) % batch != 0) {
        throw DimensionError("model: token count not divisible by batch");
    }
    const int64_t seq = static_cast<int64_t>(tokens.size()) / batch;
    if (seq > cfg_.seq_len) {
        throw DimensionError("model: sequence length " + std::to_string(seq) +
                             " exceeds configured maximum " + std::to_string(cfg_.seq_len));
    }

    ForwardResult result;
    Tensor x = embed(tokens, batch);
    for (int64_t l = 0; l < cfg_.layers; ++l) {
        const std::string p = layer_prefix(l);
        Tensor xn = ops::rmsnorm(x, param(p + "attn_norm.w"));
        Tensor att = ops::causal_attention(ops::matmul(xn, param(p + "attn.wq")),
                                           ops::matmul(xn, param(p + "attn.wk")),
                                           ops::matmul(xn, param(p + "attn.wv")), batch, seq,
                                           cfg_.heads);
        x = ops::add(x, ops::matmul(att, param(p + "attn.wo")));

        Tensor fn = ops::rmsnorm(x, param(p + "ffn_norm.w"));
        if (cfg_.layer_is_moe(l)) {
            GateParams gp;
            gp.W = param(p + "moe.gate.w");
            gp.b = param(p + "moe.gate.b");
            gp.normalize = cfg_.gating.normalize;
            gp.lambda = cfg_.gating.lambda;
            gp.epsilon_sigma = cfg_.gating.epsilon_sigma;
            gp.detach_norm_stats = cfg_.gating.detach_norm_stats;

            Tensor probs = gate_probabilities(fn, gp);
            GateDecision decision = top_k_select(probs, cfg_.top_k);
            DispatchResult dr = dispatch(decision, {cfg_.capacity_factor});

            ExpertBank bank;
            bank.experts.reserve(static_cast<size_t>(cfg_.n_experts));
            for (int64_t e = 0; e < cfg_.n_experts; ++e) {
                const std::string ep = p + "moe.experts." + std::to_string(e) + ".";
                bank.experts.push_back(
                    {param(ep + "w_gate"), param(ep + "w_up"), param(ep + "w_down")});
            }
            x = ops::add(x, moe_forward(fn, bank, decision, dr));

            LayerDiagnostics diag;
            diag.aux_loss = aux_loss_surrogate(probs);
            diag.drop_rate = dr.drop_rate;
            if (cfg_.n_experts >= 2) {
                diag.gate_stats = gate_statistics(probs);
            } else {
                // single-expert degenerate gate: everything routes to expert 0
                diag.gate_stats = GateStats{1.0, std::nullopt, 0.0, 1.0};
            }
            diag.gate_means = load_stats(probs, cfg_.top_k).gate_means;
            result.layers.push_back(std::move(diag));
        } else {
            x = ops::add(x, ops::swiglu_ffn(fn, param(p + "ffn.w_gate"), param(p + "ffn.w_up"),
                                            param(p + "ffn.w_down")));
        }
    }
    Tensor final = ops::rmsnorm(x, param("final_norm.w"));
    result.ce_loss = ops::cross_entropy(ops::matmul(final, param("lm_head.w")), targets);
    return result;
}

SimilarityReport expert_similarity(const Checkpoint& ckpt) {
    if (ckpt.meta.kind != CheckpointKind::moe) {
        throw ConsistencyError("expert_similarity: checkpoint is not an MoE checkpoint");
    }
    const ModelConfig& cfg = ckpt.meta.model;
    SimilarityReport report;
    report.mean = 0.0;

    const std::array<const char*, 3> parts{"w_gate", "w_up", "w_down"};
    for (int64_t l = 0; l < cfg.layers; ++l) {
        if (!cfg.layer_is_moe(l)) continue;
        // flatten each expert's FFN weights into one vector
        std::vector<std::vector<double>> flat(static_cast<size_t>(cfg.n_experts));
        for (int64_t e = 0; e < cfg.n_experts; ++e) {
            for (const char* part : parts) {
                const std::string name = layer_prefix(l) + "moe.experts." + std::to_string(e) +
                                         "." + part;
                auto it = ckpt.params.find(name);
                if (it == ckpt.params.end()) {
                    throw ConsistencyError("expert_similarity: missing tensor '" + name + "'");
                }
                auto values = it->second.to_doubles();
                auto& dst = flat[static_cast<size_t>(e)];
                dst.insert(dst.end(), values.begin(), values.end());
            }
        }
        std::vector<double> norms(flat.size());
        for (size_t e = 0; e < flat.size(); ++e) {
            double acc = 0.0;
            for (double v : flat[e]) acc += v * v;
            norms[e] = std::sqrt(acc);
        }
        double layer_sum = 0.0;
        int64_t pairs = 0;
        for (size_t a = 0; a < flat.size(); ++a) {
            for (size_t b = a + 1; b < flat.size(); ++b) {
                ++pairs;
                if (norms[a] == 0.0 || norms[b] == 0.0) {
                    ++report.zero_norm_pairs;  // cosine undefined; scored as 0
                    continue;
                }
                double dot = 0.0;
                for (size_t i = 0; i < flat[a].size(); ++i) dot += flat[a][i] * flat[b][i];
                layer_sum += dot / (norms[a] * norms[b]);
            }
        }
        report.per_layer.push_back(pairs > 0 ? layer_sum / static_cast<double>(pairs) : 1.0);
    }
    if (report.per_layer.empty()) {
        throw ConsistencyError("expert_similarity: checkpoint has no MoE layers");
    }
    for (double v : report.per_layer) report.mean += v;
    report.mean /= static_cast<double>(report.per_layer.size());
    return report;
}

}  // namespace moelab
