// SPDX-License-Identifier: Apache-2.0
#include "meteora/moe_forward.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <thread>

namespace meteora {

namespace {

using Cat = AllocationAccountant::Category;

void account(const ForwardOptions& opts, Cat c, std::size_t floats) {
    if (opts.accountant) opts.accountant->record(c, floats);
}

/// Run fn(begin, end) over [0, count) split into contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        fn(std::size_t{0}, count);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    const std::size_t chunk = (count + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
}

template <typename T>
void check_batch(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch, const RoutingConfig& rc) {
    layer.validate();
    rc.validate(layer.num_adapters());
    if (batch.x.rank() != 3 || batch.dim() != layer.in_dim()) {
        throw DimensionError("token batch must be (b, s, " + std::to_string(layer.in_dim()) + "), got " +
                             shape_to_string(batch.x.shape()));
    }
}

/// Shared prologue: base term x W_base and the routing decisions.
template <typename T>
ForwardResult<T> base_and_route(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch,
                                const ForwardOptions& opts) {
    const RoutingConfig& rc = opts.routing ? *opts.routing : layer.routing;
    check_batch(layer, batch, rc);
    const std::size_t tokens = batch.tokens(), d = layer.in_dim(), h = layer.out_dim();
    ForwardResult<T> res{BasicTensor<T>({batch.batch(), batch.seq(), h}), {}};
    detail::gemm_accumulate<T, T>(batch.x.raw(), layer.base_weight.raw(), res.output.raw(), tokens, d, h);
    res.routing = route_rows(layer.gate, batch.x.data(), tokens, rc);
    return res;
}

template <typename T>
void record_bank(const MeteoraLayer<T>& layer, const ForwardOptions& opts) {
    account(opts, Cat::bank, layer.bank.a_stack().size() + layer.bank.b_stack().size());
}

} // namespace

Strategy parse_strategy(std::string_view name) {
    if (name == "loop") return Strategy::loop;
    if (name == "batched") return Strategy::batched;
    if (name == "blocked") return Strategy::blocked;
    throw ParameterError("unknown strategy '" + std::string(name) + "' (expected loop, batched or blocked)");
}

const char* to_string(Strategy s) noexcept {
    switch (s) {
    case Strategy::loop: return "loop";
    case Strategy::batched: return "batched";
    case Strategy::blocked: return "blocked";
    }
    return "?";
}

template <typename T>
void MeteoraLayer<T>::validate() const {
    if (base_weight.rank() != 2) throw DimensionError("base weight must be a matrix");
    if (bank.size() == 0) throw ConfigurationError("layer has an empty adapter bank");
    if (bank.in_dim() != in_dim() || bank.out_dim() != out_dim()) {
        throw DimensionError("bank (d=" + std::to_string(bank.in_dim()) + ", h=" + std::to_string(bank.out_dim()) +
                             ") does not match base weight " + shape_to_string(base_weight.shape()));
    }
    if (gate.weight.rank() != 2 || gate.in_dim() != in_dim() || gate.num_adapters() != bank.size()) {
        throw ConfigurationError("gate " + shape_to_string(gate.weight.shape()) + " does not match d=" +
                                 std::to_string(in_dim()) + ", n=" + std::to_string(bank.size()));
    }
    routing.validate(bank.size());
}

std::size_t BlockedKernelConfig::popcount_m1() const {
    return static_cast<std::size_t>(std::count(m1.begin(), m1.end(), std::uint8_t{1}));
}

std::size_t BlockedKernelConfig::popcount_m2() const {
    return static_cast<std::size_t>(std::count(m2.begin(), m2.end(), std::uint8_t{1}));
}

BlockedKernelConfig build_masks(std::size_t m, std::size_t r) {
    if (m < 1 || r < 1) throw ParameterError("build_masks requires m >= 1 and r >= 1");
    BlockedKernelConfig cfg;
    cfg.m = m;
    cfg.r = r;
    cfg.m1.assign(m * r * m, 0);
    cfg.m2.assign(r * m * r, 0);
    cfg.m1_cols.resize(m);
    cfg.m2_cols.resize(r * m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < r * m; ++j) {
            if (j / r == i) {
                cfg.m1[i * r * m + j] = 1;
                cfg.m1_cols[i].push_back(static_cast<std::uint32_t>(j));
            }
        }
    }
    for (std::size_t g = 0; g < m; ++g) {
        for (std::size_t c = 0; c < r; ++c) {
            cfg.m2[(g * r + c) * r + c] = 1;
            cfg.m2_cols[g * r + c].push_back(static_cast<std::uint32_t>(c));
        }
    }
    return cfg;
}

template <typename T>
Blockized<T> blockize(const BasicTensor<T>& x, const BasicTensor<T>& a, std::size_t m) {
    if (m < 1) throw ParameterError("block count must be >= 1");
    if (x.rank() != 1 || a.rank() != 2 || x.dim(0) != a.dim(0)) {
        throw DimensionError("blockize expects x[d] and A[d x r], got " + shape_to_string(x.shape()) + " and " +
                             shape_to_string(a.shape()));
    }
    const std::size_t d = x.dim(0), r = a.dim(1);
    const std::size_t bs = (d + m - 1) / m;
    Blockized<T> out{BasicTensor<T>({m, bs}), BasicTensor<T>({bs, r * m})};
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < bs; ++t) {
            const std::size_t row = i * bs + t;
            if (row < d) out.x_blk(i, t) = x[row];
        }
    }
    for (std::size_t t = 0; t < bs; ++t) {
        for (std::size_t g = 0; g < m; ++g) {
            const std::size_t row = g * bs + t;
            if (row >= d) continue;
            for (std::size_t c = 0; c < r; ++c) out.a_blk(t, g * r + c) = a(row, c);
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> blocked_reconstruct(const Blockized<T>& blk, const BlockedKernelConfig& cfg) {
    const std::size_t m = cfg.m, r = cfg.r;
    if (blk.x_blk.dim(0) != m || blk.a_blk.dim(1) != r * m) {
        throw DimensionError("blockized operands do not match mask config (m=" + std::to_string(m) +
                             ", r=" + std::to_string(r) + ")");
    }
    auto oa1 = matmul(blk.x_blk, blk.a_blk);  // m x r*m
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < r * m; ++j) oa1(i, j) *= static_cast<T>(cfg.mask1(i, j));
    BasicTensor<T> m2({r * m, r});
    for (std::size_t i = 0; i < r * m; ++i)
        for (std::size_t c = 0; c < r; ++c) m2(i, c) = static_cast<T>(cfg.mask2(i, c));
    const auto oa2 = matmul(oa1, m2);  // m x r
    BasicTensor<T> out({r});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < r; ++c) out[c] += oa2(i, c);
    return out;
}

std::size_t batched_operand_floats(std::size_t tokens, std::size_t k, std::size_t d, std::size_t r, std::size_t h) {
    return tokens * k * (d * r + r * h);
}

std::size_t blocked_scratch_floats(std::size_t d, std::size_t r, std::size_t h, std::size_t m) {
    const std::size_t bs = (d + m - 1) / m;
    return m * bs + m * r * m + m * r + m * h + h;
}

// loop: one pass per adapter over the tokens that picked it.
template <typename T>
ForwardResult<T> forward_loop(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch, const ForwardOptions& opts) {
    auto res = base_and_route(layer, batch, opts);
    record_bank(layer, opts);
    const std::size_t tokens = batch.tokens(), k = res.routing.front().indices.size(), n = layer.num_adapters();
    const std::size_t d = layer.in_dim(), r = layer.bank.rank(), h = layer.out_dim();

    // One-hot expert mask, (n, k, tokens).
    std::vector<std::uint8_t> expert_mask(n * k * tokens, 0);
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t j = 0; j < k; ++j) expert_mask[(res.routing[t].indices[j] * k + j) * tokens + t] = 1;
    account(opts, Cat::scratch, expert_mask.size());

    T* out = res.output.raw();
    const T* x = batch.x.raw();
    std::vector<std::uint32_t> top_x, slot;
    for (std::size_t i = 0; i < n; ++i) {
        top_x.clear();
        slot.clear();
        for (std::size_t j = 0; j < k; ++j) {
            const std::uint8_t* row = expert_mask.data() + (i * k + j) * tokens;
            for (std::size_t t = 0; t < tokens; ++t) {
                if (row[t]) {
                    top_x.push_back(static_cast<std::uint32_t>(t));
                    slot.push_back(static_cast<std::uint32_t>(j));
                }
            }
        }
        const std::size_t p = top_x.size();
        if (p == 0) continue;
        std::vector<T> xi(p * d);
        for (std::size_t q = 0; q < p; ++q) std::memcpy(&xi[q * d], x + top_x[q] * d, d * sizeof(T));
        std::vector<T> hid(p * r, T{0});
        std::vector<T> oi(p * h, T{0});
        account(opts, Cat::scratch, xi.size() + hid.size() + oi.size());
        detail::gemm_accumulate<T, T>(xi.data(), layer.bank.a_slice(i).data(), hid.data(), p, d, r);
        detail::gemm_accumulate<T, T>(hid.data(), layer.bank.b_slice(i).data(), oi.data(), p, r, h);
        for (std::size_t q = 0; q < p; ++q) {
            const T coef = static_cast<T>(res.routing[top_x[q]].weights[slot[q]] * layer.scale);
            T* orow = out + top_x[q] * h;
            const T* src = &oi[q * h];
            for (std::size_t c = 0; c < h; ++c) orow[c] += coef * src[c];
        }
    }
    return res;
}

// batched: gather per-(token, slot) operand copies, then two batched multiplies.
template <typename T>
ForwardResult<T> forward_batched(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch,
                                 const ForwardOptions& opts) {
    auto res = base_and_route(layer, batch, opts);
    record_bank(layer, opts);
    const std::size_t tokens = batch.tokens(), k = res.routing.front().indices.size();
    const std::size_t d = layer.in_dim(), r = layer.bank.rank(), h = layer.out_dim();
    const std::size_t pairs = tokens * k;

    const std::size_t per_pair = d * r + r * h;
    if (per_pair != 0 && pairs > std::numeric_limits<std::size_t>::max() / per_pair) {
        throw ResourceError("batched operand size overflows size_t");
    }
    const std::size_t gathered = pairs * per_pair;
    if (gathered > opts.max_gathered_floats) {
        throw ResourceError("batched strategy would gather " + std::to_string(gathered) +
                            " operand floats, limit is " + std::to_string(opts.max_gathered_floats));
    }

    std::vector<T> a_g(pairs * d * r);
    std::vector<T> b_g(pairs * r * h);
    std::vector<T> hid(pairs * r, T{0});
    std::vector<T> o(pairs * h, T{0});
    account(opts, Cat::operand_copy, a_g.size() + b_g.size());
    account(opts, Cat::scratch, hid.size() + o.size());

    const T* x = batch.x.raw();
    parallel_for(pairs, opts.threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            const std::size_t adapter = res.routing[p / k].indices[p % k];
            std::ranges::copy(layer.bank.a_slice(adapter), a_g.begin() + static_cast<std::ptrdiff_t>(p * d * r));
            std::ranges::copy(layer.bank.b_slice(adapter), b_g.begin() + static_cast<std::ptrdiff_t>(p * r * h));
        }
        for (std::size_t p = begin; p < end; ++p) {
            detail::gemm_accumulate<T, T>(x + (p / k) * d, &a_g[p * d * r], &hid[p * r], 1, d, r);
        }
        for (std::size_t p = begin; p < end; ++p) {
            detail::gemm_accumulate<T, T>(&hid[p * r], &b_g[p * r * h], &o[p * h], 1, r, h);
        }
    });

    T* out = res.output.raw();
    parallel_for(tokens, opts.threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t) {
            T* orow = out + t * h;
            for (std::size_t j = 0; j < k; ++j) {
                const T coef = static_cast<T>(res.routing[t].weights[j] * layer.scale);
                const T* src = &o[(t * k + j) * h];
                for (std::size_t c = 0; c < h; ++c) orow[c] += coef * src[c];
            }
        }
    });
    return res;
}

namespace {

/// Per-worker buffers of the blocked kernel (the analog of on-chip SRAM tiles).
template <typename T>
struct BlockedScratch {
    std::vector<T> x_blk, oa1, oa2, ob, o;

    BlockedScratch(std::size_t m, std::size_t bs, std::size_t r, std::size_t h)
        : x_blk(m * bs), oa1(m * r * m), oa2(m * r), ob(m * h), o(h) {}

    std::size_t floats() const { return x_blk.size() + oa1.size() + oa2.size() + ob.size() + o.size(); }
};

/// One (token, adapter) pair through the blocked kernel; result lands in s.o.
/// A' is addressed as a view over the bank's d x r block: A'[t][g*r + c] = A[g*bs + t][c].
template <typename T>
void blocked_kernel(const T* x, const T* a, const T* b, std::size_t d, std::size_t h,
                    const BlockedKernelConfig& cfg, BlockedScratch<T>& s) {
    const std::size_t m = cfg.m, r = cfg.r, rm = r * m;
    const std::size_t bs = s.x_blk.size() / m;

    // Blockize x into m rows of width bs, zero padded.
    std::fill(s.x_blk.begin(), s.x_blk.end(), T{0});
    std::copy(x, x + d, s.x_blk.begin());

    // oA' = X x A', evaluated on the entries M1 keeps; the rest are annihilated by (.) M1.
    for (std::size_t i = 0; i < m; ++i) {
        T* oa_row = &s.oa1[i * rm];
        for (auto j : cfg.m1_cols[i]) oa_row[j] = T{0};
        const std::size_t g = i;  // only column group i survives M1 on row i
        const std::size_t rows = std::min(bs, d > g * bs ? d - g * bs : 0);
        T* dst = oa_row + g * r;
        for (std::size_t t = 0; t < rows; ++t) {
            const T xv = s.x_blk[i * bs + t];
            const T* arow = a + (g * bs + t) * r;
            for (std::size_t c = 0; c < r; ++c) dst[c] += xv * arow[c];
        }
    }

    // oA'' = (oA' (.) M1) x M2.
    std::fill(s.oa2.begin(), s.oa2.end(), T{0});
    for (std::size_t i = 0; i < m; ++i) {
        for (auto j : cfg.m1_cols[i]) {
            const T v = s.oa1[i * rm + j];
            for (auto c : cfg.m2_cols[j]) s.oa2[i * r + c] += v;
        }
    }

    // oB' = oA'' x B, then the deferred column sum.
    std::fill(s.ob.begin(), s.ob.end(), T{0});
    detail::gemm_accumulate<T, T>(s.oa2.data(), b, s.ob.data(), m, r, h);
    std::fill(s.o.begin(), s.o.end(), T{0});
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = &s.ob[i * h];
        for (std::size_t c = 0; c < h; ++c) s.o[c] += row[c];
    }
}

} // namespace

template <typename T>
ForwardResult<T> forward_blocked(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch,
                                 const ForwardOptions& opts) {
    auto res = base_and_route(layer, batch, opts);
    record_bank(layer, opts);
    const std::size_t tokens = batch.tokens(), k = res.routing.front().indices.size();
    const std::size_t d = layer.in_dim(), r = layer.bank.rank(), h = layer.out_dim();
    const std::size_t m = opts.block_m ? opts.block_m : kDefaultBlockCount;
    thread_local BlockedKernelConfig cached;
    if (cached.m != m || cached.r != r || cached.m1.empty()) cached = build_masks(m, r);
    const auto& cfg = cached;
    const std::size_t bs = cfg.padded_dim(d) / m;

    const std::size_t workers = std::max<std::size_t>(1, std::min(opts.threads, tokens));
    account(opts, Cat::scratch, workers * blocked_scratch_floats(d, r, h, m));

    const T* x = batch.x.raw();
    T* out = res.output.raw();
    parallel_for(tokens, workers, [&](std::size_t begin, std::size_t end) {
        BlockedScratch<T> s(m, bs, r, h);
        for (std::size_t t = begin; t < end; ++t) {
            T* orow = out + t * h;
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t adapter = res.routing[t].indices[j];
                blocked_kernel(x + t * d, layer.bank.a_slice(adapter).data(), layer.bank.b_slice(adapter).data(),
                               d, h, cfg, s);
                const T coef = static_cast<T>(res.routing[t].weights[j] * layer.scale);
                for (std::size_t c = 0; c < h; ++c) orow[c] += coef * s.o[c];
            }
        }
    });
    return res;
}

template <typename T>
ForwardResult<T> forward(const MeteoraLayer<T>& layer, const TokenBatch<T>& batch, Strategy strategy,
                         const ForwardOptions& opts) {
    switch (strategy) {
    case Strategy::loop: return forward_loop(layer, batch, opts);
    case Strategy::batched: return forward_batched(layer, batch, opts);
    case Strategy::blocked: return forward_blocked(layer, batch, opts);
    }
    throw ParameterError("unknown strategy");
}

#define METEORA_INSTANTIATE(T)                                                                             \
    template struct MeteoraLayer<T>;                                                                       \
    template Blockized<T> blockize(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);            \
    template BasicTensor<T> blocked_reconstruct(const Blockized<T>&, const BlockedKernelConfig&);         \
    template ForwardResult<T> forward_loop(const MeteoraLayer<T>&, const TokenBatch<T>&, const ForwardOptions&); \
    template ForwardResult<T> forward_batched(const MeteoraLayer<T>&, const TokenBatch<T>&,              \
                                              const ForwardOptions&);                                      \
    template ForwardResult<T> forward_blocked(const MeteoraLayer<T>&, const TokenBatch<T>&,              \
                                              const ForwardOptions&);                                      \
    template ForwardResult<T> forward(const MeteoraLayer<T>&, const TokenBatch<T>&, Strategy, const ForwardOptions&);

METEORA_INSTANTIATE(float)
METEORA_INSTANTIATE(double)

#undef METEORA_INSTANTIATE

} // namespace meteora
