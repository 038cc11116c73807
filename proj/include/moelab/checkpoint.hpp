#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "moelab/model_config.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

enum class CheckpointKind { dense, moe };

inline const char* checkpoint_kind_name(CheckpointKind k) {
    return k == CheckpointKind::dense ? "dense" : "moe";
}

struct CheckpointMeta {
    CheckpointKind kind = CheckpointKind::dense;
    ModelConfig model;
    int64_t tokens_trained = 0;
    // Controller state carried along so interrupted runs resume exactly.
    std::vector<double> controller_alpha;
    int64_t controller_step = 0;
};

// A model snapshot: named parameter tensors plus (optionally) the optimizer's
// moment estimates under the same names. Serialized as a JSON manifest with
// byte offsets next to a little-endian raw blob; round-trips bit-exactly.
struct Checkpoint {
    CheckpointMeta meta;
    std::map<std::string, Tensor> params;
    std::map<std::string, std::map<std::string, Tensor>> opt_state;  // slot -> name -> tensor
};

uint64_t fnv1a64(const void* data, size_t size);
std::string to_hex(uint64_t value);

// dir gets manifest.json + weights.bin; created if missing.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Checksum of the serialized blob as written by save_checkpoint, usable as a
// reproducibility fingerprint without keeping the bytes around.
uint64_t checkpoint_blob_checksum(const std::filesystem::path& dir);

}  // namespace moelab
