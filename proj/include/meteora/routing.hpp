// SPDX-License-Identifier: Apache-2.0
//
// Per-token gating: logits from a bias-free linear gate, top-k selection on the
// raw logits, and a temperature softmax restricted to the selected set.

#pragma once

#include <cstdint>
#include <vector>

#include "meteora/tensor.hpp"

namespace meteora {

template <typename T>
struct GatingNetwork {
    BasicTensor<T> weight;  // d x n, no bias

    std::size_t in_dim() const { return weight.dim(0); }
    std::size_t num_adapters() const { return weight.dim(1); }
};

struct RoutingConfig {
    std::size_t k = 1;
    double temperature = 1.0;

    /// Throws ParameterError unless 1 <= k <= n and temperature > 0.
    void validate(std::size_t num_adapters) const;
};

struct RoutingDecision {
    std::vector<std::uint32_t> indices;  // k adapter ids, descending logit
    std::vector<double> weights;         // k weights summing to 1
    std::vector<double> logits;          // all n raw logits

    bool operator==(const RoutingDecision&) const = default;
};

/// logits = x * Wg.
template <typename T>
BasicTensor<T> gate_logits(const GatingNetwork<T>& gate, const BasicTensor<T>& x);

/// Select top-k on raw logits, then softmax(logits[I] / tau) over the selected set only.
template <typename T>
RoutingDecision route(std::span<const T> logits, const RoutingConfig& cfg);

template <typename T>
RoutingDecision route(const BasicTensor<T>& logits, const RoutingConfig& cfg) {
    return route<T>(logits.data(), cfg);
}

/// Gate and route every row of X (p x d).
template <typename T>
std::vector<RoutingDecision> route_rows(const GatingNetwork<T>& gate, std::span<const T> rows, std::size_t count,
                                        const RoutingConfig& cfg);

} // namespace meteora
