#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ensembledown {

// Splittable seeding: every stochastic stage derives its own seed from a
// parent seed plus a label (stage name) or an index (ensemble member,
// sample number). Derivation is pure arithmetic on uint64, so seed trees
// are reproducible across platforms and independent of evaluation order.

uint64_t splitmix64(uint64_t x);

uint64_t derive_seed(uint64_t parent, std::string_view label);
uint64_t derive_seed(uint64_t parent, uint64_t index);

// Deterministic random stream. Wraps std::mt19937_64 (whose output
// sequence is fixed by the standard) and converts to doubles with
// explicit arithmetic; std::normal_distribution is implementation
// defined, so the Gaussian draw is a hand-rolled Box-Muller.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t uniform_index(uint64_t n);

    double normal();

    void fill_normal(float* dst, size_t n);
    void fill_normal(double* dst, size_t n);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Deterministic in-place Fisher-Yates shuffle of indices [0, n).
std::vector<size_t> shuffled_indices(size_t n, RngStream& rng);

}  // namespace ensembledown
