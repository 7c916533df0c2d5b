// SPDX-License-Identifier: Apache-2.0
//
// Three interchangeable forward passes for a multi-LoRA MoE layer:
//
//   loop     per adapter, gather the tokens that selected it, run (X A) B,
//            scatter back weighted (Mixtral-style expert loop).
//   batched  gather one (A, B) copy per (token, slot) pair and run two batched
//            matrix multiplies, then a weighted sum over the k slots.
//   blocked  fused per-token kernel: blockize x and A, multiply, reconstruct
//            with two 01 masks, multiply by B and column-sum at the end. Reads
//            the bank in place, no per-token operand copies.
//
// All three share the same gating and routing code so their RoutingDecisions
// are identical.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "meteora/lora_bank.hpp"
#include "meteora/routing.hpp"
#include "meteora/tensor.hpp"

namespace meteora {

enum class Strategy { loop, batched, blocked };

Strategy parse_strategy(std::string_view name);
const char* to_string(Strategy s) noexcept;
inline constexpr std::array<Strategy, 3> kAllStrategies{Strategy::loop, Strategy::batched, Strategy::blocked};

template <typename T>
struct MeteoraLayer {
    BasicTensor<T> base_weight;  // d x h
    LoraBank<T> bank;
    GatingNetwork<T> gate;
    RoutingConfig routing;
    double scale = 2.0;

    std::size_t in_dim() const { return base_weight.dim(0); }
    std::size_t out_dim() const { return base_weight.dim(1); }
    std::size_t num_adapters() const { return bank.size(); }

    /// Throws ConfigurationError/DimensionError/ParameterError on any inconsistency.
    void validate() const;
};

template <typename T>
struct TokenBatch {
    BasicTensor<T> x;  // b x s x d

    std::size_t batch() const { return x.dim(0); }
    std::size_t seq() const { return x.dim(1); }
    std::size_t dim() const { return x.dim(2); }
    std::size_t tokens() const { return batch() * seq(); }
};

/// Counts floats allocated by a forward call, by category. "Adapter operand"
/// floats are the resident bank plus any copies of adapter matrices.
class AllocationAccountant {
public:
    enum class Category { bank, operand_copy, scratch };

    void record(Category c, std::size_t floats) { totals_[static_cast<std::size_t>(c)] += floats; }
    std::size_t total(Category c) const { return totals_[static_cast<std::size_t>(c)]; }
    std::size_t adapter_operand_floats() const { return total(Category::bank) + total(Category::operand_copy); }
    void reset() { totals_.fill(0); }

private:
    std::array<std::size_t, 3> totals_{};
};

/// The two 01 masks of the blocked kernel for m blocks and rank r.
///   M1 (m x r*m):   M1[i][j] = 1 iff j / r == i
///   M2 (r*m x r):   M2[g*r + c][c] = 1
struct BlockedKernelConfig {
    std::size_t m = 1;
    std::size_t r = 1;
    std::vector<std::uint8_t> m1;  // row-major m x (r*m)
    std::vector<std::uint8_t> m2;  // row-major (r*m) x r
    // Nonzero column lists derived from the masks; the kernel iterates these.
    std::vector<std::vector<std::uint32_t>> m1_cols;  // per M1 row
    std::vector<std::vector<std::uint32_t>> m2_cols;  // per M2 row

    std::uint8_t mask1(std::size_t i, std::size_t j) const { return m1[i * r * m + j]; }
    std::uint8_t mask2(std::size_t i, std::size_t c) const { return m2[i * r + c]; }
    std::size_t popcount_m1() const;
    std::size_t popcount_m2() const;
    /// d rounded up to a multiple of m.
    std::size_t padded_dim(std::size_t d) const { return (d + m - 1) / m * m; }
};

BlockedKernelConfig build_masks(std::size_t m, std::size_t r);

/// Default block count: 16, the smallest operand dimension the original GPU
/// kernel accepts. d is zero-padded up to a multiple of it.
inline constexpr std::size_t kDefaultBlockCount = 16;

template <typename T>
struct Blockized {
    BasicTensor<T> x_blk;  // m x (d_pad/m)
    BasicTensor<T> a_blk;  // (d_pad/m) x (r*m)
};

/// Split x into m row blocks and A into m column groups (zero-padding d).
/// a_blk[t][g*r + c] = A[g*(d_pad/m) + t][c].
template <typename T>
Blockized<T> blockize(const BasicTensor<T>& x, const BasicTensor<T>& a, std::size_t m);

/// Dense evaluation of colsum((X_blk A_blk (.) M1) M2) -> [r]. Reference for the
/// reconstruction identity; the kernel itself never builds these dense products.
template <typename T>
BasicTensor<T> blocked_reconstruct(const Blockized<T>& blk, const BlockedKernelConfig& cfg);

struct ForwardOptions {
    /// Block count for the blocked strategy; 0 selects kDefaultBlockCount.
    std::size_t block_m = 0;
    /// Worker threads for token-parallel strategies (batched, blocked).
    std::size_t threads = 1;
    AllocationAccountant* accountant = nullptr;
    /// Replaces the layer's own routing config (k, temperature) when set.
    std::optional<RoutingConfig> routing;
    /// Upper bound on gathered operand floats for the batched strategy.
    std::size_t max_gathered_floats = std::size_t{1} << 31;
};

template <typename T>
struct ForwardResult {
    BasicTensor<T> output;                 // b x s x h
    std::vector<RoutingDecision> routing;  // b*s, row-major (batch, seq)
};

template <typename T>
ForwardResult<T> forward_loop(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch,
                              const ForwardOptions& opts = {});

template <typename T>
ForwardResult<T> forward_batched(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch,
                                 const ForwardOptions& opts = {});

template <typename T>
ForwardResult<T> forward_blocked(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch,
                                 const ForwardOptions& opts = {});

template <typename T>
ForwardResult<T> forward(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch, Strategy strategy,
                         const ForwardOptions& opts = {});

/// Closed-form gathered operand floats of the batched strategy: b*s*k*(d*r + r*h).
std::size_t batched_operand_floats(std::size_t tokens, std::size_t k, std::size_t d, std::size_t r, std::size_t h);

/// Per-worker scratch floats of the blocked kernel.
std::size_t blocked_scratch_floats(std::size_t d, std::size_t r, std::size_t h, std::size_t m);

} // namespace meteora
