#pragma once

#include <map>
#include <string>
#include <vector>

#include "moelab/checkpoint.hpp"
#include "moelab/gating.hpp"
#include "moelab/model_config.hpp"
#include "moelab/moe.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Per-MoE-layer observations from one forward pass.
struct LayerDiagnostics {
    Tensor aux_loss;  // scalar, on the graph
    double drop_rate = 0.0;
    GateStats gate_stats;
    std::vector<double> gate_means;  // per expert
};

struct ForwardResult {
    Tensor ce_loss;                         // scalar, on the graph
    std::vector<LayerDiagnostics> layers;   // one entry per MoE layer
};

// Decoder-only transformer: token+position embedding, pre-norm causal
// attention, pre-norm SwiGLU FFN (dense or expert bank per layer), final norm,
// untied output head. Parameters live in a name->tensor map so checkpoints,
// the optimizer, and upcycling all share one addressing scheme.
class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, DType dtype);

    // Fresh random initialization (weights N(0, init_std), norms 1).
    void init_random(uint64_t seed, double init_std = 0.02);

    // Adopt parameters from a checkpoint (shapes and names must match the
    // config-derived layout exactly).
    void load_params(const Checkpoint& ckpt);
    Checkpoint to_checkpoint() const;

    // Cross-entropy on next-token prediction plus per-MoE-layer diagnostics.
    // tokens has batch*seq entries, targets the same length.
    ForwardResult forward(const std::vector<int64_t>& tokens,
                          const std::vector<int64_t>& targets, int64_t batch);

    const ModelConfig& config() const { return cfg_; }
    DType dtype() const { return dtype_; }
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor& param(const std::string& name);

    // True for parameters that belong to expert FFNs (the "expert" LR group).
    static bool is_expert_param(const std::string& name);
    // Parameters exempt from weight decay (rank-1: norms and biases).
    static bool is_no_decay_param(const std::string& name);

private:
    ModelConfig cfg_;
    DType dtype_;
    std::map<std::string, Tensor> params_;

    void build_layout();
    Tensor embed(const std::vector<int64_t>& tokens, int64_t batch);
};

// Expert-similarity measurement over a checkpoint's expert FFN weights: mean
// pairwise cosine of the flattened per-expert weights, averaged over layers.
struct SimilarityReport {
    double mean = 1.0;
    int64_t zero_norm_pairs = 0;  // pairs involving an all-zero expert, scored 0
    std::vector<double> per_layer;
};

SimilarityReport expert_similarity(const Checkpoint& ckpt);

}  // namespace moelab
