// SPDX-License-Identifier: Apache-2.0
#include "meteora/routing.hpp"

#include <cmath>

namespace meteora {

void RoutingConfig::validate(std::size_t num_adapters) const {
    if (k < 1 || k > num_adapters) {
        throw ParameterError("routing k must satisfy 1 <= k <= n, got k=" + std::to_string(k) +
                             " n=" + std::to_string(num_adapters));
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ParameterError("routing temperature must be a positive finite value, got " +
                             std::to_string(temperature));
    }
}

template <typename T>
BasicTensor<T> gate_logits(const GatingNetwork<T>& gate, const BasicTensor<T>& x) {
    if (x.rank() != 1 || x.dim(0) != gate.in_dim()) {
        throw DimensionError("gate expects input of dim " + std::to_string(gate.in_dim()) + ", got " +
                             shape_to_string(x.shape()));
    }
    return vecmat(x, gate.weight);
}

template <typename T>
RoutingDecision route(std::span<const T> logits, const RoutingConfig& cfg) {
    cfg.validate(logits.size());
    RoutingDecision d;
    const auto sel = topk<T>(logits, cfg.k);
    d.logits.assign(logits.begin(), logits.end());
    d.indices.reserve(sel.size());
    Tensor64 picked({sel.size()});
    for (std::size_t j = 0; j < sel.size(); ++j) {
        d.indices.push_back(static_cast<std::uint32_t>(sel[j]));
        picked[j] = static_cast<double>(logits[sel[j]]);
    }
    const auto w = softmax(picked, cfg.temperature);
    d.weights.assign(w.data().begin(), w.data().end());
    return d;
}

template <typename T>
std::vector<RoutingDecision> route_rows(const GatingNetwork<T>& gate, std::span<const T> rows, std::size_t count,
                                        const RoutingConfig& cfg) {
    const std::size_t d = gate.in_dim(), n = gate.num_adapters();
    if (rows.size() != count * d) {
        throw DimensionError("route_rows expects " + std::to_string(count) + " rows of dim " + std::to_string(d));
    }
    cfg.validate(n);
    std::vector<T> logits(count * n, T{0});
    detail::gemm_accumulate<T, T>(rows.data(), gate.weight.raw(), logits.data(), count, d, n);
    std::vector<RoutingDecision> out;
    out.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        out.push_back(route<T>(std::span<const T>(logits).subspan(t * n, n), cfg));
    }
    return out;
}

template Tensor gate_logits(const GatingNetwork<float>&, const Tensor&);
template Tensor64 gate_logits(const GatingNetwork<double>&, const Tensor64&);
template RoutingDecision route<float>(std::span<const float>, const RoutingConfig&);
template RoutingDecision route<double>(std::span<const double>, const RoutingConfig&);
template std::vector<RoutingDecision> route_rows(const GatingNetwork<float>&, std::span<const float>, std::size_t,
                                                 const RoutingConfig&);
template std::vector<RoutingDecision> route_rows(const GatingNetwork<double>&, std::span<const double>,
                                                 std::size_t, const RoutingConfig&);

} // namespace meteora
