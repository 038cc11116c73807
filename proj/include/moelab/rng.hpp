#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace moelab {

// Deterministic RNG used for everything: weight init, synthetic data, seeds for
// sub-streams. Wraps std::mt19937_64 (whose raw output sequence is fixed by the
// standard) but does all value mapping itself, because the std distribution
// objects are not guaranteed to produce identical sequences across standard
// library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Modulo reduction; bias is negligible for the
    // small n used here and keeps the mapping trivially portable.
    uint64_t uniform_int(uint64_t n) {
        return engine_() % n;
    }

    // Standard normal via Box-Muller, no cached spare (keeps the stream a pure
    // function of the number of draws).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Stable stream-splitting: derive an independent seed from (seed, tag).
    // FNV-1a over the two words, used e.g. to give every synthetic document its
    // own generator so the corpus is random-access.
    static uint64_t derive_seed(uint64_t seed, uint64_t tag) {
        uint64_t h = 1469598103934665603ull;
        auto mix = [&h](uint64_t w) {
            for (int i = 0; i < 8; ++i) {
                h ^= (w >> (8 * i)) & 0xffull;
                h *= 1099511628211ull;
            }
        };
        mix(seed);
        mix(tag);
        return h;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace moelab
