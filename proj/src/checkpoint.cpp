#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian raw values");

namespace moelab {

namespace {

using nlohmann::json;

struct BlobEntry {
    std::string name;
    std::string group;  // "model" or "optimizer/<slot>"
    const TensorImpl* impl;
};

size_t tensor_bytes(const TensorImpl& impl) {
    return static_cast<size_t>(impl.numel()) * dtype_size(impl.dtype);
}

void append_tensor_bytes(std::string& blob, const TensorImpl& impl) {
    const size_t bytes = tensor_bytes(impl);
    const size_t offset = blob.size();
    blob.resize(offset + bytes);
    detail::dispatch_dtype(impl.dtype, [&](auto tag) {
        using S = decltype(tag);
        std::memcpy(blob.data() + offset, impl.values<S>().data(), bytes);
    });
}

DType dtype_from_name(const std::string& name) {
    if (name == "f32") return DType::f32;
    if (name == "f64") return DType::f64;
    throw IoError("checkpoint: unknown dtype '" + name + "'");
}

}  // namespace

uint64_t fnv1a64(const void* data, size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string to_hex(uint64_t value) {
    std::ostringstream os;
    os << std::hex << value;
    return os.str();
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("checkpoint: cannot create " + dir.string() + ": " + ec.message());

    std::vector<BlobEntry> entries;
    for (const auto& [name, tensor] : ckpt.params) {
        entries.push_back({name, "model", tensor.impl().get()});
    }
    for (const auto& [slot, tensors] : ckpt.opt_state) {
        for (const auto& [name, tensor] : tensors) {
            entries.push_back({name, "optimizer/" + slot, tensor.impl().get()});
        }
    }

    std::string blob;
    json manifest_tensors = json::array();
    for (const BlobEntry& e : entries) {
        const size_t offset = blob.size();
        append_tensor_bytes(blob, *e.impl);
        manifest_tensors.push_back({{"name", e.name},
                                    {"group", e.group},
                                    {"shape", e.impl->shape},
                                    {"dtype", dtype_name(e.impl->dtype)},
                                    {"byte_offset", offset},
                                    {"byte_length", tensor_bytes(*e.impl)}});
    }

    json manifest;
    manifest["format"] = "moelab-checkpoint";
    manifest["version"] = 1;
    manifest["kind"] = checkpoint_kind_name(ckpt.meta.kind);
    manifest["model"] = ckpt.meta.model.to_json();
    manifest["config_hash"] = to_hex(ckpt.meta.model.hash());
    manifest["tokens_trained"] = ckpt.meta.tokens_trained;
    if (!ckpt.meta.controller_alpha.empty() || ckpt.meta.controller_step > 0) {
        manifest["controller"] = {{"alpha", ckpt.meta.controller_alpha},
                                  {"step", ckpt.meta.controller_step}};
    }
    manifest["checksum_fnv1a64"] = to_hex(fnv1a64(blob.data(), blob.size()));
    manifest["tensors"] = manifest_tensors;

    {
        std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("checkpoint: cannot write " + (dir / "weights.bin").string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    {
        std::ofstream out(dir / "manifest.json", std::ios::trunc);
        if (!out) throw IoError("checkpoint: cannot write " + (dir / "manifest.json").string());
        out << manifest.dump(2) << "\n";
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("checkpoint: cannot open " + (dir / "manifest.json").string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw IoError("checkpoint: bad manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "moelab-checkpoint") {
        throw IoError("checkpoint: " + dir.string() + " is not a moelab checkpoint");
    }

    std::ifstream bf(dir / "weights.bin", std::ios::binary);
    if (!bf) throw IoError("checkpoint: cannot open " + (dir / "weights.bin").string());
    std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    const std::string want_sum = manifest.at("checksum_fnv1a64").get<std::string>();
    const std::string got_sum = to_hex(fnv1a64(blob.data(), blob.size()));
    if (want_sum != got_sum) {
        throw ConsistencyError("checkpoint: checksum mismatch in " + dir.string() + " (manifest " +
                               want_sum + ", blob " + got_sum + ")");
    }

    Checkpoint ckpt;
    const std::string kind = manifest.value("kind", "dense");
    ckpt.meta.kind = (kind == "moe") ? CheckpointKind::moe : CheckpointKind::dense;
    ckpt.meta.model = ModelConfig::from_json(manifest.at("model"));
    ckpt.meta.tokens_trained = manifest.value("tokens_trained", int64_t{0});
    if (manifest.contains("controller")) {
        ckpt.meta.controller_alpha =
            manifest["controller"].at("alpha").get<std::vector<double>>();
        ckpt.meta.controller_step = manifest["controller"].value("step", int64_t{0});
    }

    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string group = entry.value("group", "model");
        Shape shape = entry.at("shape").get<Shape>();
        const DType dt = dtype_from_name(entry.at("dtype").get<std::string>());
        const size_t offset = entry.at("byte_offset").get<size_t>();
        const size_t length = entry.at("byte_length").get<size_t>();
        if (offset + length > blob.size()) {
            throw ConsistencyError("checkpoint: tensor '" + name + "' overruns the blob");
        }
        Tensor t = Tensor::zeros(shape, dt);
        if (static_cast<size_t>(t.numel()) * dtype_size(dt) != length) {
            throw ConsistencyError("checkpoint: tensor '" + name + "' length disagrees with shape");
        }
        detail::dispatch_dtype(dt, [&](auto tag) {
            using S = decltype(tag);
            std::memcpy(t.raw().values<S>().data(), blob.data() + offset, length);
        });
        if (group == "model") {
            ckpt.params.emplace(name, std::move(t));
        } else if (group.rfind("optimizer/", 0) == 0) {
            ckpt.opt_state[group.substr(10)].emplace(name, std::move(t));
        } else {
            throw ConsistencyError("checkpoint: unknown tensor group '" + group + "'");
        }
    }
    return ckpt;
}

uint64_t checkpoint_blob_checksum(const std::filesystem::path& dir) {
    std::ifstream bf(dir / "weights.bin", std::ios::binary);
    if (!bf) throw IoError("checkpoint: cannot open " + (dir / "weights.bin").string());
    std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    return fnv1a64(blob.data(), blob.size());
}

}  // namespace moelab
