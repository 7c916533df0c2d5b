// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and independent reference implementations for the tests.
// The oracles below are written directly from the layer definition with
// plain loops in double precision and share no code with the library's
// forward passes.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "meteora/moe_forward.hpp"
#include "meteora/rng.hpp"
#include "meteora/toy_model.hpp"

namespace testing {

using namespace meteora;

struct LayerShape {
    std::size_t n = 4, k = 2, r = 4, d = 32, h = 32;
};

template <typename T>
MeteoraLayer<T> random_layer(const LayerShape& s, std::uint64_t seed, double temperature = 1.0) {
    Rng rng(seed);
    MeteoraLayer<T> layer;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < s.n; ++i) names.push_back("a" + std::to_string(i));
    layer.base_weight = random_normal<T>({s.d, s.h}, rng, 0.2);
    layer.bank = LoraBank<T>(random_normal<T>({s.n, s.d, s.r}, rng, 0.3), random_normal<T>({s.n, s.r, s.h}, rng, 0.3),
                             names, 2.0 * double(s.r));
    layer.gate.weight = random_normal<T>({s.d, s.n}, rng);
    layer.routing = RoutingConfig{s.k, temperature};
    layer.scale = layer.bank.default_scale();
    return layer;
}

template <typename T>
TokenBatch<T> random_batch(std::size_t b, std::size_t s, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    return TokenBatch<T>{random_normal<T>({b, s, d}, rng)};
}

/// Indices of the k largest values, ties to the lowest index, by repeated scan.
inline std::vector<std::size_t> naive_topk(const std::vector<double>& v, std::size_t k) {
    std::vector<std::size_t> out;
    std::vector<bool> used(v.size(), false);
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t best = v.size();
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!used[i] && (best == v.size() || v[i] > v[best])) best = i;
        used[best] = true;
        out.push_back(best);
    }
    return out;
}

struct OracleToken {
    std::vector<double> output;
    std::vector<std::size_t> indices;
    std::vector<double> weights;
};

/// o = x W + sum_{i in topk} softmax(l_I / tau)_i * scale * (x A_i) B_i, in f64.
template <typename T>
OracleToken oracle_token(const MeteoraLayer<T>& layer, const T* x, const RoutingConfig& rc) {
    const std::size_t d = layer.in_dim(), h = layer.out_dim(), n = layer.num_adapters(), r = layer.bank.rank();
    std::vector<double> logits(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < d; ++t) logits[i] += double(x[t]) * double(layer.gate.weight(t, i));
    OracleToken tok;
    tok.indices = naive_topk(logits, rc.k);
    double mx = -1e300;
    for (auto i : tok.indices) mx = std::max(mx, logits[i] / rc.temperature);
    double z = 0.0;
    for (auto i : tok.indices) z += std::exp(logits[i] / rc.temperature - mx);
    for (auto i : tok.indices) tok.weights.push_back(std::exp(logits[i] / rc.temperature - mx) / z);

    tok.output.assign(h, 0.0);
    for (std::size_t c = 0; c < h; ++c)
        for (std::size_t t = 0; t < d; ++t) tok.output[c] += double(x[t]) * double(layer.base_weight(t, c));
    for (std::size_t j = 0; j < tok.indices.size(); ++j) {
        const auto a = layer.bank.a_slice(tok.indices[j]);
        const auto b = layer.bank.b_slice(tok.indices[j]);
        std::vector<double> mid(r, 0.0);
        for (std::size_t q = 0; q < r; ++q)
            for (std::size_t t = 0; t < d; ++t) mid[q] += double(x[t]) * double(a[t * r + q]);
        for (std::size_t c = 0; c < h; ++c) {
            double acc = 0.0;
            for (std::size_t q = 0; q < r; ++q) acc += mid[q] * double(b[q * h + c]);
            tok.output[c] += tok.weights[j] * layer.scale * acc;
        }
    }
    return tok;
}

template <typename T>
double max_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

/// Small model shape that keeps the tape-based tests fast.
inline ToyModelConfig small_config() {
    ToyModelConfig cfg;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.ffn = 48;
    cfg.max_seq = 64;
    return cfg;
}

/// Random (non-zero B) adapters for every site.
inline AdapterSet random_adapter_set(const ToyModelConfig& cfg, std::uint64_t seed, const std::string& name,
                                     std::size_t rank = 4, double stddev = 0.15) {
    Rng rng(seed);
    AdapterSet set(cfg.blocks);
    for (auto& block : set)
        for (Site s : kAllSites) {
            auto& ad = block[static_cast<std::size_t>(s)];
            ad.a = random_normal<float>({cfg.site_in(s), rank}, rng, stddev);
            ad.b = random_normal<float>({rank, cfg.site_out(s)}, rng, stddev);
            ad.alpha = 2.0 * double(rank);
            ad.name = name;
        }
    return set;
}

/// Base model with n random adapters per site and fresh gates.
inline ToyModel random_moe_model(const ToyModelConfig& cfg, std::size_t n, const RoutingConfig& routing,
                                 std::uint64_t seed, double gate_std = 0.5) {
    std::vector<AdapterSet> sets;
    for (std::size_t i = 0; i < n; ++i) sets.push_back(random_adapter_set(cfg, seed * 100 + i, "t" + std::to_string(i)));
    auto model = build_base_model(cfg, seed);
    attach_banks(model, stack_adapter_sets(sets), routing, seed + 1, gate_std);
    return model;
}

} // namespace testing
