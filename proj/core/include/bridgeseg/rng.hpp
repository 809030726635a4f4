#pragma once

#include <cstdint>

namespace bridgeseg {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// reproducible across platforms and standard-library versions.
//
// fork(stream) derives an independent generator from the *construction* seed
// and a stream id, not from the current draw position. Parallel consumers
// (one stream per region, per tile, ...) therefore see identical noise no
// matter the order or thread count.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // Uniform double in [0, 1) with 53 random bits.
    double uniform();

    // Standard normal via Box-Muller; the second value of each pair is cached.
    double normal();

    // Uniform integer in [0, n), n >= 1. Rejection sampling, bias-free.
    uint64_t below(uint64_t n);

    Rng fork(uint64_t stream) const;

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

// splitmix64 mixing step, also used for seeded coordinate hashing.
uint64_t mix64(uint64_t x);

// Order-independent hash of a (seed, a, b) triple; deterministic split
// assignment and stream derivation build on this.
uint64_t hash_coords(uint64_t seed, uint64_t a, uint64_t b);

}  // namespace bridgeseg
