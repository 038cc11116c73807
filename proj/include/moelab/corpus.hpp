#pragma once

#include <cstdint>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Deterministic synthetic pre-training data. Each domain is a small sparse
// first-order Markov chain over its own disjoint slice of the vocabulary, so
// the stream is learnable (per-token entropy is bounded by the chain's
// branching) and domains are distinguishable by their token ranges. Documents
// are independent walks; domains interleave per document under a greedy
// deficit scheduler that tracks the target token ratios exactly.
struct CorpusConfig {
    uint64_t seed = 0;
    int64_t n_domains = 3;
    std::vector<double> ratios;  // defaults to 7:2:1 for 3 domains, uniform otherwise
    int64_t vocab_size = 256;
    int64_t doc_min_tokens = 32;
    int64_t doc_max_tokens = 128;
    int64_t branching = 4;  // successors per token within a domain chain

    void validate() const;
    std::vector<double> normalized_ratios() const;
    // Vocabulary slice [begin, end) owned by one domain.
    std::pair<int64_t, int64_t> domain_range(int64_t domain) const;
};

class SyntheticCorpus {
public:
    explicit SyntheticCorpus(CorpusConfig cfg);

    // Next `count` tokens of the stream. Identical configs produce identical
    // streams regardless of the chunking of calls.
    std::vector<int64_t> take(int64_t count);

    // Tokens emitted per domain so far.
    const std::vector<int64_t>& domain_token_counts() const { return emitted_; }

    const CorpusConfig& config() const { return cfg_; }

    // Cursor for exact resume: (document index, offset inside that document).
    std::pair<int64_t, int64_t> cursor() const { return {doc_index_, doc_offset_}; }
    void seek(int64_t doc_index, int64_t doc_offset);

private:
    CorpusConfig cfg_;
    std::vector<double> ratios_;
    std::vector<int64_t> emitted_;
    int64_t total_emitted_ = 0;
    int64_t doc_index_ = 0;
    int64_t doc_offset_ = 0;
    std::vector<int64_t> current_doc_;

    int64_t pick_domain() const;
    void generate_doc();
};

// Convenience: materialize `tokens` tokens of the stream in one call.
std::vector<int64_t> synth_corpus(uint64_t seed, int64_t n_domains, int64_t tokens,
                                  std::vector<double> ratios = {}, int64_t vocab_size = 256);

}  // namespace moelab
