#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "moelab/model.hpp"
#include "moelab/upcycling.hpp"
#include "test_util.hpp"

using namespace moelab;

namespace {

ModelConfig small_dense_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 16;
    cfg.ffn_dim = 24;
    cfg.heads = 2;
    cfg.vocab_size = 32;
    cfg.seq_len = 8;
    cfg.n_experts = 0;
    cfg.top_k = 0;
    return cfg;
}

Checkpoint make_dense_checkpoint(uint64_t seed, const ModelConfig& cfg) {
    TransformerModel model(cfg, DType::f64);
    model.init_random(seed, 0.05);
    return model.to_checkpoint();
}

std::vector<int64_t> random_tokens(Rng& rng, int64_t count, int64_t vocab) {
    std::vector<int64_t> out(static_cast<size_t>(count));
    for (auto& t : out) t = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vocab)));
    return out;
}

}  // namespace

TEST_CASE("upcycle_replicate forward-equivalence with the dense model") {
    ModelConfig dense_cfg = small_dense_config();
    Checkpoint dense = make_dense_checkpoint(7, dense_cfg);

    Checkpoint moe = upcycle_replicate(dense, 4, 0.02, 3);
    CHECK(moe.meta.kind == CheckpointKind::moe);
    CHECK(moe.meta.model.n_experts == 4);

    TransformerModel dense_model(dense_cfg, DType::f64);
    dense_model.load_params(dense);
    ModelConfig moe_cfg = moe.meta.model;
    moe_cfg.capacity_factor = 64.0;  // forward equivalence needs zero drops
    TransformerModel moe_model(moe_cfg, DType::f64);
    moe_model.load_params(moe);

    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        auto tokens = random_tokens(rng, 2 * 8, dense_cfg.vocab_size);
        auto targets = random_tokens(rng, 2 * 8, dense_cfg.vocab_size);
        NoGradGuard guard;
        double dense_ce = dense_model.forward(tokens, targets, 2).ce_loss.item();
        double moe_ce = moe_model.forward(tokens, targets, 2).ce_loss.item();
        CHECK(moe_ce == doctest::Approx(dense_ce).epsilon(1e-5));
    }
}

TEST_CASE("upcycle_replicate similarity is exactly one") {
    Checkpoint dense = make_dense_checkpoint(13, small_dense_config());
    Checkpoint moe = upcycle_replicate(dense, 4);
    SimilarityReport report = expert_similarity(moe);
    CHECK(report.mean == 1.0);
    CHECK(report.zero_norm_pairs == 0);
}

TEST_CASE("upcycle_replicate rejects non-dense input") {
    Checkpoint dense = make_dense_checkpoint(17, small_dense_config());
    Checkpoint moe = upcycle_replicate(dense, 2);
    CHECK_THROWS_AS(upcycle_replicate(moe, 4), ConsistencyError);
}

TEST_CASE("upcycle with a single expert stays functionally dense") {
    ModelConfig dense_cfg = small_dense_config();
    Checkpoint dense = make_dense_checkpoint(19, dense_cfg);
    Checkpoint moe = upcycle_replicate(dense, 1);
    CHECK(moe.meta.model.top_k == 1);

    TransformerModel dense_model(dense_cfg, DType::f64);
    dense_model.load_params(dense);
    TransformerModel moe_model(moe.meta.model, DType::f64);
    moe_model.load_params(moe);

    Rng rng(23);
    auto tokens = random_tokens(rng, 8, dense_cfg.vocab_size);
    auto targets = random_tokens(rng, 8, dense_cfg.vocab_size);
    NoGradGuard guard;
    CHECK(moe_model.forward(tokens, targets, 1).ce_loss.item() ==
          doctest::Approx(dense_model.forward(tokens, targets, 1).ce_loss.item()).epsilon(1e-6));
}

TEST_CASE("upcycle_specialized with identical inputs reduces to replicate") {
    Checkpoint dense = make_dense_checkpoint(29, small_dense_config());
    Checkpoint a = upcycle_replicate(dense, 4, 0.02, 42);
    Checkpoint b = upcycle_specialized({{dense, 2}, {dense, 2}}, 0.02, 42);
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, tensor] : a.params) {
        auto it = b.params.find(name);
        REQUIRE(it != b.params.end());
        CHECK(tensor.to_doubles() == it->second.to_doubles());  // bit-identical
    }
}

TEST_CASE("upcycle_specialized fills slots in order and lowers similarity") {
    ModelConfig cfg = small_dense_config();
    Checkpoint base = make_dense_checkpoint(31, cfg);
    // continued FFN-only pre-training stand-in: scale the FFN weights
    Checkpoint tuned = base;
    tuned.params = {};
    for (const auto& [name, tensor] : base.params) {
        Tensor copy = Tensor::from_doubles(tensor.shape(), tensor.to_doubles());
        if (name.find(".ffn.") != std::string::npos) {
            for (int64_t i = 0; i < copy.numel(); ++i) copy.set(i, -copy.at(i));
        }
        tuned.params.emplace(name, std::move(copy));
    }

    Checkpoint moe = upcycle_specialized({{base, 3}, {tuned, 1}});
    CHECK(moe.meta.model.n_experts == 4);
    SimilarityReport report = expert_similarity(moe);
    CHECK(report.mean < 1.0);

    // slot 3 carries the tuned weights (negated FFN of slot 0)
    const auto w0 = moe.params.at("layers.0.moe.experts.0.w_gate").to_doubles();
    const auto w3 = moe.params.at("layers.0.moe.experts.3.w_gate").to_doubles();
    for (size_t i = 0; i < w0.size(); ++i) CHECK(w3[i] == -w0[i]);
}

TEST_CASE("upcycle_specialized validates copies and non-FFN agreement") {
    Checkpoint base = make_dense_checkpoint(37, small_dense_config());
    CHECK_THROWS_AS(upcycle_specialized({{base, 0}}), ParameterError);

    Checkpoint drifted = base;
    drifted.params = {};
    for (const auto& [name, tensor] : base.params) {
        Tensor copy = Tensor::from_doubles(tensor.shape(), tensor.to_doubles());
        drifted.params.emplace(name, std::move(copy));
    }
    Tensor& attn = drifted.params.at("layers.0.attn.wq");
    attn.set(0, attn.at(0) + 1.0);
    CHECK_THROWS_AS(upcycle_specialized({{base, 2}, {drifted, 2}}), ConsistencyError);
}

TEST_CASE("expert_similarity anchors: orthogonal and antipodal experts") {
    ModelConfig cfg = small_dense_config();
    cfg.n_experts = 2;
    cfg.top_k = 1;
    TransformerModel model(cfg, DType::f64);
    model.init_random(41, 0.05);

    // orthogonal: expert 0 nonzero only in w_gate, expert 1 only in w_up
    for (int64_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".moe.experts.";
        for (const char* part : {"w_gate", "w_up", "w_down"}) {
            for (int64_t e = 0; e < 2; ++e) {
                Tensor& t = model.param(p + std::to_string(e) + "." + part);
                for (int64_t i = 0; i < t.numel(); ++i) t.set(i, 0.0);
            }
        }
        Tensor& a = model.param(p + "0.w_gate");
        Tensor& b = model.param(p + "1.w_up");
        a.set(0, 1.0);
        b.set(0, 1.0);
    }
    CHECK(expert_similarity(model.to_checkpoint()).mean == doctest::Approx(0.0));

    // antipodal: expert 1 = -expert 0
    for (int64_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".moe.experts.";
        Tensor& b = model.param(p + "1.w_up");
        b.set(0, 0.0);
        for (const char* part : {"w_gate", "w_up", "w_down"}) {
            Tensor& src = model.param(p + "0." + part);
            Tensor& dst = model.param(p + "1." + part);
            for (int64_t i = 0; i < src.numel(); ++i) {
                src.set(i, 0.3 + 0.1 * static_cast<double>(i % 7));
                dst.set(i, -src.at(i));
            }
        }
    }
    CHECK(expert_similarity(model.to_checkpoint()).mean == doctest::Approx(-1.0));
}

TEST_CASE("expert_similarity flags zero-norm experts") {
    ModelConfig cfg = small_dense_config();
    cfg.n_experts = 2;
    cfg.top_k = 1;
    TransformerModel model(cfg, DType::f64);
    model.init_random(43, 0.05);
    for (int64_t l = 0; l < cfg.layers; ++l) {
        for (const char* part : {"w_gate", "w_up", "w_down"}) {
            Tensor& t = model.param("layers." + std::to_string(l) + ".moe.experts.1." +
                                    std::string(part));
            for (int64_t i = 0; i < t.numel(); ++i) t.set(i, 0.0);
        }
    }
    SimilarityReport report = expert_similarity(model.to_checkpoint());
    CHECK(report.zero_norm_pairs == 2);  // one pair per layer
    CHECK(report.mean == 0.0);
}

TEST_CASE("expert_similarity invariant under expert permutation and positive scaling") {
    ModelConfig cfg = small_dense_config();
    cfg.n_experts = 3;
    cfg.top_k = 2;
    TransformerModel model(cfg, DType::f64);
    model.init_random(47, 0.05);
    Checkpoint base = model.to_checkpoint();
    const double base_sim = expert_similarity(base).mean;

    Checkpoint permuted = base;
    permuted.params = {};
    const std::vector<int64_t> perm{2, 0, 1};
    for (const auto& [name, tensor] : base.params) {
        std::string new_name = name;
        const auto pos = name.find(".moe.experts.");
        if (pos != std::string::npos) {
            const size_t estart = pos + 13;
            const size_t eend = name.find('.', estart);
            const int64_t e = std::stoll(name.substr(estart, eend - estart));
            new_name = name.substr(0, estart) +
                       std::to_string(perm[static_cast<size_t>(e)]) + name.substr(eend);
        }
        Tensor copy = Tensor::from_doubles(tensor.shape(), tensor.to_doubles());
        if (pos != std::string::npos) {
            for (int64_t i = 0; i < copy.numel(); ++i) copy.set(i, 3.7 * copy.at(i));
        }
        permuted.params.emplace(new_name, std::move(copy));
    }
    CHECK(expert_similarity(permuted).mean == doctest::Approx(base_sim).epsilon(1e-12));
}

TEST_CASE("recommendation rules") {
    CHECK(recommend_initialization({0.0, 5.0}).decision == InitDecision::FromScratch);
    CHECK(recommend_initialization({1.0, 2.0}).decision == InitDecision::FromScratch);
    CHECK(recommend_initialization({1.0, 2.5}).decision == InitDecision::FromScratch);
    CHECK(recommend_initialization({1.0, 0.5}).decision == InitDecision::Upcycle);
    CHECK(recommend_initialization({3.0, 2.0}).decision == InitDecision::Upcycle);  // 2/3 * 3
    CHECK(recommend_initialization({1.0, 1.0}).decision == InitDecision::Indeterminate);
    CHECK_FALSE(recommend_initialization({1.0, 1.0}).rationale.empty());
    CHECK_THROWS_AS(recommend_initialization({-1.0, 1.0}), ParameterError);
    CHECK_THROWS_AS(recommend_initialization({1.0, 0.0}), ParameterError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    ModelConfig cfg = small_dense_config();
    cfg.n_experts = 2;
    cfg.top_k = 2;
    TransformerModel model(cfg, DType::f32);
    model.init_random(53, 0.02);
    Checkpoint ckpt = model.to_checkpoint();
    ckpt.meta.tokens_trained = 12345;
    ckpt.meta.controller_alpha = {0.01, 0.003};
    ckpt.meta.controller_step = 99;
    ckpt.opt_state["adam_m"].emplace("lm_head.w",
                                     Tensor::from_doubles({4}, {1, 2, 3, 4}, DType::f64));

    const auto dir = std::filesystem::temp_directory_path() / "moelab_test_ckpt";
    std::filesystem::remove_all(dir);
    save_checkpoint(ckpt, dir);
    Checkpoint loaded = load_checkpoint(dir);

    CHECK(loaded.meta.kind == CheckpointKind::moe);
    CHECK(loaded.meta.tokens_trained == 12345);
    CHECK(loaded.meta.controller_alpha == std::vector<double>{0.01, 0.003});
    CHECK(loaded.meta.controller_step == 99);
    REQUIRE(loaded.params.size() == ckpt.params.size());
    for (const auto& [name, tensor] : ckpt.params) {
        CHECK(loaded.params.at(name).dtype() == tensor.dtype());
        CHECK(loaded.params.at(name).to_doubles() == tensor.to_doubles());
    }
    CHECK(loaded.opt_state.at("adam_m").at("lm_head.w").to_doubles() ==
          std::vector<double>{1, 2, 3, 4});

    // saving the loaded checkpoint reproduces the blob byte-for-byte
    const auto dir2 = std::filesystem::temp_directory_path() / "moelab_test_ckpt2";
    std::filesystem::remove_all(dir2);
    save_checkpoint(loaded, dir2);
    CHECK(checkpoint_blob_checksum(dir) == checkpoint_blob_checksum(dir2));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("checkpoint load detects corruption") {
    ModelConfig cfg = small_dense_config();
    TransformerModel model(cfg, DType::f64);
    model.init_random(59, 0.02);
    const auto dir = std::filesystem::temp_directory_path() / "moelab_test_ckpt3";
    std::filesystem::remove_all(dir);
    save_checkpoint(model.to_checkpoint(), dir);
    {
        std::fstream f(dir / "weights.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(10);
        char c = 0x5a;
        f.write(&c, 1);
    }
    CHECK_THROWS_AS(load_checkpoint(dir), ConsistencyError);
    std::filesystem::remove_all(dir);
}
