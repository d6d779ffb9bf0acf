#pragma once

#include <cstdint>
#include <string_view>

namespace pseg {

// Deterministic xoshiro256++ generator. Every consumer derives its own
// stream from one master seed via substream(name), so replay never depends
// on call ordering between unrelated components.
class Rng {
public:
    explicit Rng(uint64_t seed);

    // Derived generator whose state depends only on (seed, name).
    Rng substream(std::string_view name) const;
    Rng substream(std::string_view name, uint64_t index) const;

    uint64_t next_u64();
    double uniform();                              // [0, 1)
    double uniform(double lo, double hi);          // [lo, hi)
    int64_t uniform_int(int64_t lo, int64_t hi);   // inclusive bounds
    double normal();                               // standard normal, Box-Muller
    double normal(double mean, double stddev);
    bool bernoulli(double p);

    uint64_t seed_value() const { return seed_; }

private:
    uint64_t seed_ = 0;
    uint64_t s_[4] = {0, 0, 0, 0};
    void init_state(uint64_t seed);
};

// FNV-1a 64-bit, used for substream derivation and content fingerprints.
uint64_t fnv1a64(std::string_view bytes);

}  // namespace pseg
