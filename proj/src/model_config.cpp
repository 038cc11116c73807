#include "moelab/model_config.hpp"

namespace moelab {

void ModelConfig::validate() const {
    if (layers < 1) throw ParameterError("model: layers must be >= 1");
    if (hidden_dim < 1 || ffn_dim < 1) throw ParameterError("model: dims must be >= 1");
    if (heads < 1 || hidden_dim % heads != 0) {
        throw ParameterError("model: hidden_dim " + std::to_string(hidden_dim) +
                             " must be divisible by heads " + std::to_string(heads));
    }
    if (vocab_size < 2) throw ParameterError("model: vocab_size must be >= 2");
    if (seq_len < 1) throw ParameterError("model: seq_len must be >= 1");
    if (n_experts < 0) throw ParameterError("model: n_experts must be >= 0");
    if (is_moe() && (top_k < 1 || top_k > n_experts)) {
        throw ParameterError("model: top_k " + std::to_string(top_k) + " outside [1, n_experts=" +
                             std::to_string(n_experts) + "]");
    }
    if (moe_layer_frequency < 1) throw ParameterError("model: moe_layer_frequency must be >= 1");
    if (capacity_factor <= 0.0) throw ParameterError("model: capacity_factor must be positive");
    if (gating.lambda <= 0.0) throw ParameterError("model: gating.lambda must be positive");
    if (gating.epsilon_sigma <= 0.0) {
        throw ParameterError("model: gating.epsilon_sigma must be positive");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"layers", layers},
            {"hidden_dim", hidden_dim},
            {"ffn_dim", ffn_dim},
            {"heads", heads},
            {"vocab_size", vocab_size},
            {"seq_len", seq_len},
            {"n_experts", n_experts},
            {"top_k", top_k},
            {"moe_layer_frequency", moe_layer_frequency},
            {"capacity_factor", capacity_factor},
            {"gating",
             {{"normalize", gating.normalize},
              {"lambda", gating.lambda},
              {"epsilon_sigma", gating.epsilon_sigma},
              {"detach_norm_stats", gating.detach_norm_stats}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<int64_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<int64_t>();
    cfg.ffn_dim = j.at("ffn_dim").get<int64_t>();
    cfg.heads = j.at("heads").get<int64_t>();
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.seq_len = j.at("seq_len").get<int64_t>();
    cfg.n_experts = j.at("n_experts").get<int64_t>();
    cfg.top_k = j.at("top_k").get<int64_t>();
    cfg.moe_layer_frequency = j.at("moe_layer_frequency").get<int64_t>();
    cfg.capacity_factor = j.at("capacity_factor").get<double>();
    if (j.contains("gating")) {
        const auto& g = j.at("gating");
        cfg.gating.normalize = g.value("normalize", false);
        cfg.gating.lambda = g.value("lambda", 1.0);
        cfg.gating.epsilon_sigma = g.value("epsilon_sigma", 1e-6);
        cfg.gating.detach_norm_stats = g.value("detach_norm_stats", false);
    }
    cfg.validate();
    return cfg;
}

uint64_t ModelConfig::hash() const {
    const std::string dump = to_json().dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace moelab
