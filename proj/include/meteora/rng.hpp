// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "meteora/tensor.hpp"

namespace meteora {

/// Counter-based generator: the i-th draw is splitmix64(key + (i + 1) * golden),
/// where key is derived from the seed. No hidden platform state, so streams are
/// bit-identical everywhere. Distinct substreams come from `fork`.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (one draw per call, two counters consumed).
    double normal();

    /// Independent generator keyed by (seed, stream).
    Rng fork(std::uint64_t stream) const;

private:
    std::uint64_t seed_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

template <typename T>
BasicTensor<T> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
    return t;
}

template <typename T>
BasicTensor<T> random_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

} // namespace meteora
