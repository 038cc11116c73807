#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "moelab/errors.hpp"

namespace moelab {

struct GatingConfig {
    bool normalize = false;
    double lambda = 1.0;
    double epsilon_sigma = 1e-6;
    bool detach_norm_stats = false;
};

// Architecture of the desk-scale transformer. n_experts == 0 means a dense
// model (plain SwiGLU FFN in every layer); n_experts >= 1 replaces the FFN of
// every moe_layer_frequency-th layer with an expert bank.
struct ModelConfig {
    int64_t layers = 4;
    int64_t hidden_dim = 64;
    int64_t ffn_dim = 128;
    int64_t heads = 4;
    int64_t vocab_size = 256;
    int64_t seq_len = 128;
    int64_t n_experts = 8;
    int64_t top_k = 2;
    int64_t moe_layer_frequency = 1;
    double capacity_factor = 1.25;
    GatingConfig gating;

    bool is_moe() const { return n_experts >= 1; }
    // Layer l hosts an expert bank iff it closes a frequency window, so
    // frequency 1 makes every layer an MoE layer.
    bool layer_is_moe(int64_t l) const {
        return is_moe() && ((l + 1) % moe_layer_frequency == 0);
    }
    int64_t moe_layer_count() const {
        int64_t count = 0;
        for (int64_t l = 0; l < layers; ++l)
            if (layer_is_moe(l)) ++count;
        return count;
    }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    uint64_t hash() const;
};

}  // namespace moelab
