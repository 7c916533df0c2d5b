// SPDX-License-Identifier: Apache-2.0
//
// Benchmark harness: runtime and allocated adapter-operand floats per
// generated token for each forward strategy over a parameter sweep.
//
// A cell runs g decode steps, each one forward call on a (b, s, d) batch.
// "Per token" means per step: ms_per_token is the wall time of g steps
// divided by g; floats_per_token is the accountant's adapter-operand total
// (resident bank plus copies) divided by g.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "meteora/moe_forward.hpp"

namespace meteora {

struct BenchCell {
    std::size_t b = 1, s = 1, k = 2, r = 8, n = 28, d = 64, h = 64, g = 64;

    bool operator==(const BenchCell&) const = default;
};

struct BenchConfig {
    std::vector<std::size_t> b{1}, s{1}, k{2}, r{8}, n{28}, g{64}, d{64}, h{64};
    std::vector<Strategy> strategies{kAllStrategies.begin(), kAllStrategies.end()};
    std::size_t repetitions = 5;
    std::size_t warmup = 1;
    std::size_t threads = 1;
    std::size_t block_m = 0;
    std::uint64_t seed = 0;
    /// Also time lora_forward with one fixed adapter and no gate.
    bool baseline = true;
    /// Re-measure a cell this many times while its spread exceeds half its median.
    std::size_t max_retries = 2;

    /// Throws ParameterError on repetitions < 3, warmup < 1, zero dims or k > n.
    void validate() const;
    /// Cartesian product in b, s, k, r, n, d, h, g order (g varies fastest).
    std::vector<BenchCell> cells() const;
};

inline constexpr const char* kBaselineName = "single-lora";

struct BenchRow {
    BenchCell cell;
    std::string strategy;  // loop, batched, blocked or single-lora
    double ms_per_token = 0.0;      // median over repetitions
    double spread_ms = 0.0;         // max - min over repetitions
    double floats_per_token = 0.0;
    double product = 0.0;           // ms_per_token * floats_per_token
    bool flagged = false;           // spread > 50% of median after retries

    bool operator==(const BenchRow&) const = default;
};

struct BenchReport {
    std::size_t threads = 1;
    std::vector<BenchRow> rows;

    const BenchRow* find(const BenchCell& cell, const std::string& strategy) const;
};

BenchReport run_bench(const BenchConfig& cfg);

/// Header b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product,spread_ms,flagged; LF endings.
std::string report_csv(const BenchReport& report);
void emit_report(const BenchReport& report, const std::filesystem::path& path);
/// Throws CorruptFileError on a malformed header or row.
BenchReport parse_report(const std::string& csv);

} // namespace meteora
