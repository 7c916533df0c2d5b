// SPDX-License-Identifier: Apache-2.0
//
// meteora: train adapters and gates on the toy model, generate, trace,
// evaluate composite prompts, benchmark the forward strategies and inspect
// artifacts.
//
// Exit codes: 0 success, 1 usage, 2 data or validation error, 3 numeric or
// training failure.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meteora/artifact.hpp"
#include "meteora/bench.hpp"
#include "meteora/training.hpp"

using namespace meteora;

namespace {

struct Common {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct InferenceFlags {
    std::string strategy = "loop";
    std::size_t k = 0;      // 0 keeps the artifact's value
    double tau = 0.0;       // 0 keeps the artifact's value
    std::size_t block_m = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--strategy", strategy, "Forward strategy: loop, batched or blocked")
            ->check(CLI::IsMember({"loop", "batched", "blocked"}))
            ->capture_default_str();
        cmd->add_option("--k", k, "Top-k override (0 keeps the artifact's k)")->capture_default_str();
        cmd->add_option("--tau", tau, "Routing temperature override (0 keeps the artifact's)")->capture_default_str();
        cmd->add_option("--block-m", block_m, "Block count for the blocked strategy (0 = 16)")->capture_default_str();
    }

    InferenceOptions options(const ToyModel& model, std::size_t threads, double default_tau = 0.0) const {
        InferenceOptions o;
        o.strategy = parse_strategy(strategy);
        o.forward.block_m = block_m;
        o.forward.threads = threads;
        RoutingConfig rc = model.site(0, Site::q).layer.routing;
        if (k) rc.k = k;
        if (tau > 0.0) rc.temperature = tau;
        else if (default_tau > 0.0) rc.temperature = default_tau;
        o.routing = rc;
        return o;
    }
};

std::vector<int> parse_tokens(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ParameterError("bad token '" + item + "' in prompt");
        }
    }
    if (out.empty()) throw ParameterError("prompt is empty");
    return out;
}

std::string join(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
    return s;
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path + "'");
}

ArtifactFile load_checked(const std::string& path) {
    std::vector<std::string> warnings;
    auto file = load_artifact(path, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    return file;
}

std::vector<std::size_t> task_list(const TaskSuite& suite, const std::vector<std::string>& names) {
    std::vector<std::size_t> out;
    for (const auto& n : names) out.push_back(suite.index_of(n));
    return out;
}

// ---- trace rendering ----

constexpr char kGlyphs[] = {'.', ':', '+', '*', '#'};

/// Share of the total routing weight that went to the dominant adapter,
/// quantized to five levels.
char glyph(const TraceStep& step) {
    double dom = 0.0, total = 0.0;
    for (const auto& s : step.sites) {
        for (std::size_t j = 0; j < s.indices.size(); ++j) {
            total += s.weights[j];
            if (s.indices[j] == step.dominant) dom += s.weights[j];
        }
    }
    const double share = total > 0.0 ? dom / total : 0.0;
    const auto level = static_cast<std::size_t>(std::min(4.0, std::floor(share * 5.0)));
    return kGlyphs[level];
}

std::string render_heatmap(const RoutingTrace& trace, std::size_t prompt_len) {
    std::ostringstream out;
    out << "step  token  dominant        share\n";
    for (const auto& step : trace.steps) {
        char line[128];
        std::snprintf(line, sizeof line, "%4zu %6d%c %-14s  %c\n", step.step, step.token,
                      step.step < prompt_len ? ' ' : '*', trace.adapter_names.at(step.dominant).c_str(), glyph(step));
        out << line;
    }
    out << "strip: ";
    for (const auto& step : trace.steps) out << glyph(step);
    out << "\nlegend: " << kGlyphs[0] << " <20% " << kGlyphs[1] << " <40% " << kGlyphs[2] << " <60% " << kGlyphs[3]
        << " <80% " << kGlyphs[4] << " >=80% of routing weight on the dominant adapter; * marks generated tokens\n";
    return out.str();
}

// ---- subcommands ----

struct TrainAdaptersCmd {
    std::string out, base;
    AdapterTrainConfig cfg;
    std::size_t k = 1;
    double tau = 1.0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("train-adapters", "Train one LoRA adapter set per synthetic task and stack the banks");
        c->add_option("--out", out, "Output artifact")->required();
        c->add_option("--base", base, "Base model artifact (default: build from --seed)");
        c->add_option("--steps", cfg.steps, "Optimizer steps per task")->capture_default_str();
        c->add_option("--lr", cfg.lr, "Adam learning rate")->capture_default_str();
        c->add_option("--rank", cfg.rank, "LoRA rank r")->capture_default_str();
        c->add_option("--alpha", cfg.alpha, "LoRA alpha (scale = alpha / r)")->capture_default_str();
        c->add_option("--batch", cfg.batch, "Sequences per step")->capture_default_str();
        c->add_option("--max-pack", cfg.max_pack, "Samples packed per training sequence (upper bound)")
            ->capture_default_str();
        c->add_option("--k", k, "Top-k stored with the gates")->capture_default_str();
        c->add_option("--tau", tau, "Routing temperature stored with the gates")->capture_default_str();
    }

    int run(const Common& common) {
        const auto suite = TaskSuite::standard();
        const auto groups = task_token_groups(suite);
        ToyModel base_model;
        if (base.empty()) {
            base_model = build_base_model({}, common.seed, groups);
        } else {
            base_model = model_from_artifact(load_checked(base));
            for (auto& blk : base_model.blocks)
                for (auto& site : blk.sites) site.layer = MeteoraLayer<float>{.base_weight = site.layer.base_weight};
        }
        AdapterTrainConfig c = cfg;
        c.seed = common.seed;
        c.threads = common.threads;
        std::vector<AdapterSet> sets;
        nlohmann::ordered_json losses = nlohmann::ordered_json::object();
        for (const auto& task : suite.tasks()) {
            const auto r = train_adapter(base_model, task, c);
            std::cout << "adapter " << task.name << ": held-out CE " << fixed(r.initial_loss) << " -> "
                      << fixed(r.final_loss) << "\n";
            losses[task.name] = {{"initial", r.initial_loss}, {"final", r.final_loss}};
            sets.push_back(r.adapters);
        }
        ToyModel model = base_model;
        attach_banks(model, stack_adapter_sets(sets), RoutingConfig{k, tau}, common.seed);
        nlohmann::ordered_json meta;
        meta["command"] = "train-adapters";
        meta["seed"] = common.seed;
        meta["tasks"] = suite.names();
        meta["adapter_losses"] = losses;
        save_artifact(out, model_to_artifact(model, meta));
        std::cout << "wrote " << out << " (" << model.num_adapters() << " adapters, " << model.num_gates()
                  << " gates)\n";
        return 0;
    }
};

struct TrainGatesCmd {
    std::string in, out, curve, loss = "top1";
    TrainConfig cfg;
    std::size_t per_task = 200, max_pack = 6;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("train-gates", "Train the gating networks with base and banks frozen");
        c->add_option("--in", in, "Artifact with adapter banks")->required();
        c->add_option("--out", out, "Output artifact")->required();
        c->add_option("--curve", curve, "Write the per-epoch loss curve as CSV");
        c->add_option("--loss", loss, "top1 (gate CE only) or topk (LM CE + beta * gate CE)")
            ->check(CLI::IsMember({"top1", "topk"}))
            ->capture_default_str();
        c->add_option("--k", cfg.k, "k for the topk loss")->capture_default_str();
        c->add_option("--beta", cfg.beta, "Weight of the gate term in the topk loss")->capture_default_str();
        c->add_option("--lr", cfg.lr, "SGD learning rate")->capture_default_str();
        c->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
        c->add_option("--batch", cfg.batch, "Minibatch size")->capture_default_str();
        c->add_option("--per-task", per_task, "Training samples per task (balanced)")->capture_default_str();
        c->add_option("--max-pack", max_pack, "Samples packed per sequence (upper bound)")->capture_default_str();
    }

    int run(const Common& common) {
        const auto input = load_checked(in);
        if (!input.has("BANK")) throw ConfigurationError("'" + in + "' has no adapter bank; run train-adapters first");
        ToyModel model = model_from_artifact(input);
        const auto suite = TaskSuite::standard();
        if (model.adapter_names() != suite.names()) {
            throw ConfigurationError("bank adapters do not match the synthetic task suite");
        }
        TrainConfig c = cfg;
        c.loss = loss == "top1" ? GateLoss::top1 : GateLoss::topk;
        c.seed = common.seed;
        c.threads = common.threads;
        const auto data = packed_dataset(suite, per_task, max_pack, common.seed);
        std::cout << "loss " << to_string(c.loss) << ", k " << c.effective_k() << ", beta " << c.beta << ", "
                  << data.size() << " sequences\n";
        const auto res = train_gates(model, data, c);
        for (const auto& e : res.curve) {
            std::cout << "epoch " << e.epoch << ": lm " << fixed(e.lm_loss) << " gate " << fixed(e.gate_loss)
                      << " total " << fixed(e.total);
            if (c.loss == GateLoss::topk) std::cout << " (= lm + " << c.beta << " * gate)";
            std::cout << "\n";
        }
        if (!curve.empty()) write_file(curve, loss_curve_csv(res.curve));
        const auto holdout = packed_dataset(suite, 25, 1, common.seed + 1);
        std::cout << "held-out routing accuracy " << fixed(routing_accuracy(model, holdout)) << "\n";

        // Only the gate (and routing k) change; every other section is copied verbatim.
        for (auto& blk : model.blocks)
            for (auto& site : blk.sites) site.layer.routing.k = std::max(site.layer.routing.k, c.effective_k());
        const auto trained = model_to_artifact(model);
        ArtifactFile output = input;
        output.put(*trained.find("GATE"));
        output.put(*trained.find("CONF"));
        auto meta = artifact_meta(input);
        meta["gate_training"] = {{"seed", common.seed},     {"loss", to_string(c.loss)}, {"k", c.effective_k()},
                                 {"beta", c.beta},          {"lr", c.lr},                {"epochs", c.epochs},
                                 {"per_task", per_task},    {"final_total", res.curve.empty() ? 0.0 : res.curve.back().total}};
        output.put({"META", [&] {
                        const std::string s = meta.dump(2) + "\n";
                        return std::vector<std::uint8_t>(s.begin(), s.end());
                    }()});
        save_artifact(out, output);
        std::cout << "wrote " << out << "\n";
        return 0;
    }
};

struct PromptFlags {
    std::string prompt, task;
    std::size_t sample = 0;
    long long max_tokens = -1;

    void add(CLI::App* c) {
        c->add_option("--prompt", prompt, "Comma-separated prompt token ids");
        c->add_option("--task", task, "Use a sample of this task as the prompt");
        c->add_option("--sample", sample, "Sample index for --task")->capture_default_str();
        c->add_option("--max-tokens", max_tokens, "Tokens to generate (default: the task's answer length, else 8)");
    }

    struct Resolved {
        std::vector<int> prompt;
        std::vector<int> reference;
        std::size_t max_tokens = 0;
    };

    Resolved resolve(const Common& common) const {
        Resolved r;
        if (!prompt.empty() == !task.empty()) throw ParameterError("give exactly one of --prompt or --task");
        if (!task.empty()) {
            const auto suite = TaskSuite::standard();
            const auto s = suite[suite.index_of(task)].generate(Rng(common.seed).fork(sample).next_u64());
            r.prompt = s.prompt;
            r.reference = s.target;
        } else {
            r.prompt = parse_tokens(prompt);
        }
        r.max_tokens = max_tokens >= 0 ? static_cast<std::size_t>(max_tokens) : (r.reference.empty() ? 8 : r.reference.size());
        return r;
    }
};

struct GenerateCmd {
    std::string in, jsonl;
    PromptFlags prompt;
    InferenceFlags inference;
    bool heatmap = false;

    CLI::App* add(CLI::App& app, const char* name, const char* help) {
        auto* c = app.add_subcommand(name, help);
        c->add_option("--in", in, "Model artifact")->required();
        c->add_option("--jsonl", jsonl, "Write the routing trace as JSON lines");
        prompt.add(c);
        inference.add(c);
        return c;
    }

    int run(const Common& common) {
        const ToyModel model = model_from_artifact(load_checked(in));
        const auto p = prompt.resolve(common);
        const auto opts = inference.options(model, common.threads);
        const auto gen = generate(model, p.prompt, p.max_tokens, opts);
        std::cout << "prompt: " << join(p.prompt) << "\n";
        std::cout << "output: " << join(gen.tokens) << "\n";
        if (!p.reference.empty()) std::cout << "reference: " << join(p.reference) << "\n";
        if (heatmap) {
            if (!model.has_moe()) throw ConfigurationError("trace needs a model with adapter banks");
            std::cout << render_heatmap(gen.trace, p.prompt.size());
        }
        if (!jsonl.empty()) write_file(jsonl, gen.trace.to_jsonl());
        return 0;
    }
};

struct CompositeCmd {
    std::string in, jsonl;
    std::vector<std::string> tasks{"copy", "reverse"};
    std::size_t shots = 2;
    InferenceFlags inference;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("composite-eval", "Serially concatenated tasks: per-segment adapter dominance");
        c->add_option("--in", in, "Model artifact with trained gates")->required();
        c->add_option("--tasks", tasks, "Ordered task names")->delimiter(',')->capture_default_str();
        c->add_option("--shots", shots, "Worked composite examples before the questions")->capture_default_str();
        c->add_option("--jsonl", jsonl, "Write the routing trace as JSON lines");
        inference.tau = 15.0;
        inference.add(c);
    }

    int run(const Common& common) {
        const ToyModel model = model_from_artifact(load_checked(in));
        const auto suite = TaskSuite::standard();
        CompositeOptions co;
        co.shots = shots;
        co.seed = common.seed;
        co.inference = inference.options(model, common.threads);
        const auto rep = composite_eval(model, suite, task_list(suite, tasks), co);
        std::cout << "tau " << co.inference.routing->temperature << ", k " << co.inference.routing->k << ", "
                  << rep.sequence.size() << " tokens\n";
        std::cout << "segment  task            span      dominance  offset  correct\n";
        for (std::size_t i = 0; i < rep.segments.size(); ++i) {
            const auto& s = rep.segments[i];
            char line[160];
            std::snprintf(line, sizeof line, "%7zu  %-14s  %3zu-%-3zu   %9s  %6zu  %3zu/%zu\n", i,
                          suite[s.task_id].name.c_str(), s.begin, s.end, fixed(s.dominance, 3).c_str(),
                          s.switch_offset, s.correct_answers, suite[s.task_id].length);
            std::cout << line;
        }
        std::cout << "min dominance " << fixed(rep.min_dominance(), 3) << ", max boundary offset "
                  << rep.max_boundary_offset() << "\n";
        std::cout << render_heatmap(rep.trace, rep.sequence.size());
        if (!jsonl.empty()) write_file(jsonl, rep.trace.to_jsonl());
        return 0;
    }
};

struct BenchCmd {
    BenchConfig cfg;
    std::string strategy = "all", out;
    bool no_baseline = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("bench", "Time the forward strategies over a parameter sweep");
        c->set_help_flag("--help", "Print this help message and exit");  // frees -h for the output-dim sweep
        c->add_option("--b", cfg.b, "Batch sizes")->delimiter(',')->capture_default_str();
        c->add_option("--s", cfg.s, "Sequence lengths")->delimiter(',')->capture_default_str();
        c->add_option("--k", cfg.k, "Top-k values")->delimiter(',')->capture_default_str();
        c->add_option("--r", cfg.r, "LoRA ranks")->delimiter(',')->capture_default_str();
        c->add_option("--n", cfg.n, "Adapter counts")->delimiter(',')->capture_default_str();
        c->add_option("--g", cfg.g, "Generated tokens (decode steps) per cell")->delimiter(',')->capture_default_str();
        c->add_option("--d", cfg.d, "Input dims")->delimiter(',')->capture_default_str();
        c->add_option("--h", cfg.h, "Output dims")->delimiter(',')->capture_default_str();
        c->add_option("--strategy", strategy, "all, loop, batched or blocked")
            ->check(CLI::IsMember({"all", "loop", "batched", "blocked"}))
            ->capture_default_str();
        c->add_option("--reps", cfg.repetitions, "Timed repetitions (>= 3)")->capture_default_str();
        c->add_option("--warmup", cfg.warmup, "Warmup runs (>= 1)")->capture_default_str();
        c->add_option("--block-m", cfg.block_m, "Block count for the blocked strategy (0 = 16)")->capture_default_str();
        c->add_flag("--no-baseline", no_baseline, "Skip the single-lora baseline rows");
        c->add_option("--out", out, "Write the report as CSV");
    }

    int run(const Common& common) {
        BenchConfig c = cfg;
        c.seed = common.seed;
        c.threads = common.threads;
        c.baseline = !no_baseline;
        if (strategy != "all") c.strategies = {parse_strategy(strategy)};
        const auto report = run_bench(c);
        std::cout << "threads " << report.threads << "\n";
        std::cout << "    b    s  k   r   n    d    h    g  strategy       ms/token   floats/token  flag\n";
        for (const auto& row : report.rows) {
            const auto& x = row.cell;
            char line[200];
            std::snprintf(line, sizeof line, "%5zu %4zu %2zu %3zu %3zu %4zu %4zu %4zu  %-12s %10.5f %14.0f  %s\n", x.b,
                          x.s, x.k, x.r, x.n, x.d, x.h, x.g, row.strategy.c_str(), row.ms_per_token,
                          row.floats_per_token, row.flagged ? "noisy" : "");
            std::cout << line;
        }
        if (!out.empty()) emit_report(report, out);
        return 0;
    }
};

struct InspectCmd {
    std::string in;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("inspect", "Print an artifact's sections, configuration and metadata");
        c->add_option("--in", in, "Artifact")->required();
    }

    int run() {
        const auto file = load_checked(in);
        std::cout << "format version " << file.version << "\n";
        for (const auto& s : file.sections) std::cout << "section " << s.tag << ": " << s.payload.size() << " bytes\n";
        const ToyModel model = model_from_artifact(file);
        const auto& c = model.config;
        std::cout << "model: vocab " << c.vocab << ", d_model " << c.d_model << ", heads " << c.heads << ", blocks "
                  << c.blocks << ", ffn " << c.ffn << ", max_seq " << c.max_seq << "\n";
        if (model.has_moe()) {
            const auto& layer = model.site(0, Site::q).layer;
            std::cout << "adapters:";
            for (const auto& n : model.adapter_names()) std::cout << " " << n;
            std::cout << "\nrank " << layer.bank.rank() << ", alpha " << layer.bank.alpha() << ", k "
                      << layer.routing.k << ", tau " << layer.routing.temperature << ", gates " << model.num_gates()
                      << "\n";
        } else {
            std::cout << "no adapter bank\n";
        }
        std::cout << "meta: " << artifact_meta(file).dump() << "\n";
        return 0;
    }
};

/// key=value lines for the global options and the chosen subcommand, in a
/// form --config accepts back.
std::string effective_config(const CLI::App& app, const CLI::App& sub) {
    std::string out;
    auto emit = [&](const CLI::App& a, const std::string& prefix) {
        for (const CLI::Option* opt : a.get_options()) {
            const std::string key = opt->get_single_name();
            if (opt == a.get_help_ptr() || opt == a.get_config_ptr() || key.empty()) continue;
            std::string value;
            if (opt->count() > 0) {
                const auto& res = opt->results();
                for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
            } else {
                value = opt->get_default_str();
                if (value.size() >= 2 && value.front() == '[' && value.back() == ']') value = value.substr(1, value.size() - 2);
            }
            if (!opt->get_expected_max() && value.empty()) value = "false";
            out += prefix + key + "=\"" + value + "\"\n";
        }
    };
    emit(app, "");
    emit(sub, sub.get_name() + ".");
    return out;
}

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::numeric:
    case ErrorKind::training: return 3;
    default: return 2;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MeteoRA multi-LoRA mixture-of-experts toy engine"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "Flat key=value file; command-line flags take precedence");
    Common common;
    app.add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();
    app.add_option("--threads", common.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

    TrainAdaptersCmd train_adapters;
    TrainGatesCmd train_gates_cmd;
    GenerateCmd gen, trace;
    CompositeCmd composite;
    BenchCmd bench;
    InspectCmd inspect;
    train_adapters.add(app);
    train_gates_cmd.add(app);
    gen.add(app, "generate", "Greedy generation from a prompt");
    trace.add(app, "trace", "Generation with a per-token dominant-adapter heatmap");
    trace.heatmap = true;
    composite.add(app);
    bench.add(app);
    inspect.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const auto* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        std::cout << "# effective configuration\n" << effective_config(app, *sub) << "# end configuration\n";
        if (name == "train-adapters") return train_adapters.run(common);
        if (name == "train-gates") return train_gates_cmd.run(common);
        if (name == "generate") return gen.run(common);
        if (name == "trace") return trace.run(common);
        if (name == "composite-eval") return composite.run(common);
        if (name == "bench") return bench.run(common);
        if (name == "inspect") return inspect.run();
        return 1;
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error (corrupt): " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
