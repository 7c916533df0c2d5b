// SPDX-License-Identifier: Apache-2.0
#include "meteora/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "meteora/rng.hpp"

namespace meteora {

namespace {

constexpr const char* kHeader =
    "b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product,spread_ms,flagged";

using Clock = std::chrono::steady_clock;

MeteoraLayer<float> random_layer(const BenchCell& c, Rng& rng) {
    MeteoraLayer<float> layer;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < c.n; ++i) names.push_back("adapter" + std::to_string(i));
    layer.base_weight = random_normal<float>({c.d, c.h}, rng, 1.0 / std::sqrt(double(c.d)));
    layer.bank = LoraBank<float>(random_normal<float>({c.n, c.d, c.r}, rng, 1.0 / std::sqrt(double(c.d))),
                                 random_normal<float>({c.n, c.r, c.h}, rng, 0.1), std::move(names), 16.0);
    layer.gate.weight = random_normal<float>({c.d, c.n}, rng);
    layer.routing = RoutingConfig{c.k, 1.0};
    layer.scale = layer.bank.default_scale();
    layer.validate();
    return layer;
}

struct Timing {
    double median = 0.0, spread = 0.0;
};

template <typename Step>
Timing time_steps(const Step& step, std::size_t g, std::size_t reps, std::size_t warmup) {
    for (std::size_t w = 0; w < warmup; ++w)
        for (std::size_t i = 0; i < g; ++i) step(i);
    std::vector<double> ms;
    for (std::size_t rep = 0; rep < reps; ++rep) {
        const auto t0 = Clock::now();
        for (std::size_t i = 0; i < g; ++i) step(i);
        ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / double(g));
    }
    std::sort(ms.begin(), ms.end());
    const std::size_t mid = ms.size() / 2;
    const double median = ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
    return {median, ms.back() - ms.front()};
}

template <typename Step>
Timing stable_timing(const Step& step, const BenchConfig& cfg, std::size_t g, bool& flagged) {
    Timing t = time_steps(step, g, cfg.repetitions, cfg.warmup);
    for (std::size_t retry = 0; retry < cfg.max_retries && t.spread > 0.5 * t.median; ++retry)
        t = time_steps(step, g, cfg.repetitions, cfg.warmup);
    flagged = t.spread > 0.5 * t.median;
    return t;
}

void append_number(std::string& out, double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& field, std::size_t line) {
    T v{};
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
        throw CorruptFileError("bench report line " + std::to_string(line) + ": bad number '" + field + "'");
    }
    return v;
}

} // namespace

void BenchConfig::validate() const {
    if (repetitions < 3) throw ParameterError("bench needs at least 3 repetitions");
    if (warmup < 1) throw ParameterError("bench needs at least 1 warmup run");
    if (threads == 0) throw ParameterError("bench needs at least one thread");
    for (const auto* list : {&b, &s, &k, &r, &n, &g, &d, &h})
        for (std::size_t v : *list)
            if (v == 0) throw ParameterError("bench sweep values must be positive");
    for (std::size_t kk : k)
        for (std::size_t nn : n)
            if (kk > nn) {
                throw ParameterError("bench sweep has k=" + std::to_string(kk) + " > n=" + std::to_string(nn));
            }
}

std::vector<BenchCell> BenchConfig::cells() const {
    std::vector<BenchCell> out;
    for (auto vb : b)
        for (auto vs : s)
            for (auto vk : k)
                for (auto vr : r)
                    for (auto vn : n)
                        for (auto vd : d)
                            for (auto vh : h)
                                for (auto vg : g) out.push_back({vb, vs, vk, vr, vn, vd, vh, vg});
    return out;
}

const BenchRow* BenchReport::find(const BenchCell& cell, const std::string& strategy) const {
    for (const auto& row : rows)
        if (row.cell == cell && row.strategy == strategy) return &row;
    return nullptr;
}

BenchReport run_bench(const BenchConfig& cfg) {
    cfg.validate();
    BenchReport report;
    report.threads = cfg.threads;
    const Rng root(cfg.seed);
    std::size_t index = 0;
    for (const auto& cell : cfg.cells()) {
        Rng rng = root.fork(index++);
        const auto layer = random_layer(cell, rng);
        std::vector<TokenBatch<float>> inputs;
        for (std::size_t i = 0; i < cell.g; ++i) inputs.push_back({random_normal<float>({cell.b, cell.s, cell.d}, rng)});

        for (Strategy strategy : cfg.strategies) {
            AllocationAccountant acct;
            ForwardOptions opts;
            opts.threads = cfg.threads;
            opts.block_m = cfg.block_m;
            for (std::size_t i = 0; i < cell.g; ++i) {
                opts.accountant = &acct;
                (void)forward(layer, inputs[i], strategy, opts);
            }
            opts.accountant = nullptr;
            BenchRow row{cell, to_string(strategy)};
            const auto t = stable_timing([&](std::size_t i) { (void)forward(layer, inputs[i], strategy, opts); }, cfg,
                                         cell.g, row.flagged);
            row.ms_per_token = t.median;
            row.spread_ms = t.spread;
            row.floats_per_token = double(acct.adapter_operand_floats()) / double(cell.g);
            row.product = row.ms_per_token * row.floats_per_token;
            report.rows.push_back(row);
        }

        if (!cfg.baseline) continue;
        const auto adapter = layer.bank.adapter(0);
        std::vector<Tensor> rows;
        for (const auto& in : inputs)
            for (std::size_t t = 0; t < cell.b * cell.s; ++t)
                rows.push_back(Tensor({cell.d}, std::vector<float>(in.x.data().begin() + t * cell.d,
                                                                    in.x.data().begin() + (t + 1) * cell.d)));
        BenchRow row{cell, kBaselineName};
        const std::size_t per_step = cell.b * cell.s;
        const auto t = stable_timing(
            [&](std::size_t i) {
                for (std::size_t j = 0; j < per_step; ++j) (void)lora_forward(rows[i * per_step + j], layer.base_weight, adapter);
            },
            cfg, cell.g, row.flagged);
        row.ms_per_token = t.median;
        row.spread_ms = t.spread;
        row.floats_per_token = double(adapter.a.size() + adapter.b.size());
        row.product = row.ms_per_token * row.floats_per_token;
        report.rows.push_back(row);
    }
    return report;
}

std::string report_csv(const BenchReport& report) {
    std::string out = kHeader;
    out += '\n';
    for (const auto& row : report.rows) {
        const auto& c = row.cell;
        for (std::size_t v : {c.b, c.s, c.k, c.r, c.n, c.d, c.h, c.g}) out += std::to_string(v) + ',';
        out += row.strategy + ',';
        append_number(out, row.ms_per_token);
        out += ',';
        append_number(out, row.floats_per_token);
        out += ',';
        append_number(out, row.product);
        out += ',';
        append_number(out, row.spread_ms);
        out += row.flagged ? ",1\n" : ",0\n";
    }
    return out;
}

void emit_report(const BenchReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << report_csv(report);
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

BenchReport parse_report(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw CorruptFileError("bench report has an unexpected header");
    BenchReport report;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 14) throw CorruptFileError("bench report line " + std::to_string(lineno) + ": expected 14 fields");
        BenchRow row;
        std::size_t* dims[] = {&row.cell.b, &row.cell.s, &row.cell.k, &row.cell.r,
                               &row.cell.n, &row.cell.d, &row.cell.h, &row.cell.g};
        for (std::size_t i = 0; i < 8; ++i) *dims[i] = parse_number<std::size_t>(f[i], lineno);
        row.strategy = f[8];
        row.ms_per_token = parse_number<double>(f[9], lineno);
        row.floats_per_token = parse_number<double>(f[10], lineno);
        row.product = parse_number<double>(f[11], lineno);
        row.spread_ms = parse_number<double>(f[12], lineno);
        if (f[13] != "0" && f[13] != "1") throw CorruptFileError("bench report line " + std::to_string(lineno) + ": bad flag");
        row.flagged = f[13] == "1";
        report.rows.push_back(std::move(row));
    }
    return report;
}

} // namespace meteora
