// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "meteora/training.hpp"
#include "support.hpp"

using namespace meteora;

namespace {

bool same_base(const ToyModel& a, const ToyModel& b) {
    if (!(a.tok_emb == b.tok_emb && a.pos_emb == b.pos_emb && a.final_norm == b.final_norm && a.lm_head == b.lm_head))
        return false;
    for (std::size_t blk = 0; blk < a.blocks.size(); ++blk)
        for (Site s : kAllSites)
            if (!(a.site(blk, s).layer.base_weight == b.site(blk, s).layer.base_weight)) return false;
    return true;
}

std::vector<int> prompt_of(const SyntheticTask& task, std::uint64_t seed) { return task.generate(seed).prompt; }

// Copy and reverse adapters on the default-size model plus trained top-1 gates.
// Built once; the trained pieces are shared by the slower test cases.
struct Trained {
    TaskSuite suite = TaskSuite::first(2);
    ToyModel base;
    std::vector<AdapterTrainResult> adapters;
    ToyModel moe;

    Trained() {
        base = build_base_model({}, 0, task_token_groups(suite));
        std::vector<AdapterSet> sets;
        for (const auto& task : suite.tasks()) {
            adapters.push_back(train_adapter(base, task, AdapterTrainConfig{}));
            sets.push_back(adapters.back().adapters);
        }
        moe = base;
        attach_banks(moe, stack_adapter_sets(sets), {1, 1.0}, 1);
        train_gates(moe, packed_dataset(suite, 60, 6, 1), TrainConfig{});
    }

    static const Trained& get() {
        static const Trained t;
        return t;
    }
};

} // namespace

TEST_CASE("a two-block model has fourteen gates", "[toy]") {
    const auto cfg = testing::small_config();
    const auto model = testing::random_moe_model(cfg, 3, {2, 1.0}, 1);
    CHECK(model.num_gates() == 14);
    CHECK(model.num_adapters() == 3);
    std::set<const float*> distinct;
    for (std::size_t b = 0; b < cfg.blocks; ++b)
        for (Site s : kAllSites) distinct.insert(model.site(b, s).layer.gate.weight.raw());
    CHECK(distinct.size() == 14);
    CHECK(build_base_model(cfg, 1).num_gates() == 0);
}

TEST_CASE("seeded builds are bitwise identical", "[toy]") {
    const auto cfg = testing::small_config();
    const auto a = testing::random_moe_model(cfg, 2, {1, 1.0}, 4);
    const auto b = testing::random_moe_model(cfg, 2, {1, 1.0}, 4);
    CHECK(same_base(a, b));
    for (std::size_t blk = 0; blk < cfg.blocks; ++blk)
        for (Site s : kAllSites) {
            CHECK(a.site(blk, s).layer.gate.weight == b.site(blk, s).layer.gate.weight);
            CHECK(a.site(blk, s).layer.bank == b.site(blk, s).layer.bank);
        }
    CHECK_FALSE(same_base(a, build_base_model(cfg, 5)));
}

TEST_CASE("configuration errors are reported", "[toy]") {
    ToyModelConfig cfg;
    cfg.heads = 5;
    CHECK_THROWS_AS(build_base_model(cfg, 0), ConfigurationError);
    const auto small = testing::small_config();
    auto base = build_base_model(small, 0);
    auto sets = std::vector<AdapterSet>{testing::random_adapter_set(testing::small_config(), 1, "x")};
    ToyModelConfig other = small;
    other.d_model = 16;
    other.heads = 2;
    sets.push_back(testing::random_adapter_set(other, 2, "y"));
    CHECK_THROWS_AS(attach_banks(base, stack_adapter_sets(sets), {1, 1.0}, 0), ConfigurationError);
    const std::vector<TokenGroup> bad{{60, 70}};
    CHECK_THROWS_AS(build_base_model(small, 0, bad), ConfigurationError);
}

TEST_CASE("an n = 1 bank reproduces the single-adapter model", "[toy]") {
    const auto cfg = testing::small_config();
    const auto base = build_base_model(cfg, 2);
    const auto set = testing::random_adapter_set(cfg, 3, "solo");
    const auto single = with_single_adapter(base, set);
    auto moe = base;
    attach_banks(moe, stack_adapter_sets({set}), {1, 1.0}, 9);
    const auto prompt = prompt_of(TaskSuite::standard()[0], 1);
    // Independent reference: the f64 tape forward of the single-adapter model.
    const auto tm = TapeModel::from(single);
    autodiff::Tape tape;
    const auto ref = record_forward(tape, tm, prompt, TapeParams{}, 1);
    const auto out = toy_forward(moe, prompt);
    double worst = 0.0;
    for (std::size_t i = 0; i < out.logits.size(); ++i)
        worst = std::max(worst, std::abs(double(out.logits[i]) - ref.logits.value()[i]));
    CHECK(worst < 1e-3);
    CHECK(generate(moe, prompt, 6).tokens == generate(single, prompt, 6).tokens);
}

TEST_CASE("zero-B adapters leave the base model unchanged", "[toy]") {
    const auto cfg = testing::small_config();
    const auto base = build_base_model(cfg, 6);
    auto set = testing::random_adapter_set(cfg, 7, "zero");
    for (auto& block : set)
        for (auto& ad : block) ad.b = Tensor(ad.b.shape());
    const auto prompt = prompt_of(TaskSuite::standard()[1], 2);
    CHECK(toy_forward(with_single_adapter(base, set), prompt).logits == toy_forward(base, prompt).logits);
}

TEST_CASE("generation is identical across strategies", "[toy][property]") {
    const auto cfg = testing::small_config();
    const auto suite = TaskSuite::standard();
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto model = testing::random_moe_model(cfg, 4, {2, 1.0}, seed);
        for (std::size_t t = 0; t < suite.size(); ++t) {
            const auto prompt = prompt_of(suite[t], seed + t);
            InferenceOptions loop;
            const auto ref = generate(model, prompt, 8, loop);
            for (Strategy s : {Strategy::batched, Strategy::blocked}) {
                InferenceOptions opts;
                opts.strategy = s;
                const auto got = generate(model, prompt, 8, opts);
                CHECK(got.tokens == ref.tokens);
                REQUIRE(got.trace.steps.size() == ref.trace.steps.size());
                for (std::size_t i = 0; i < got.trace.steps.size(); ++i)
                    CHECK(got.trace.steps[i].dominant == ref.trace.steps[i].dominant);
            }
        }
    }
}

TEST_CASE("trace rows are normalised and cover every site", "[toy][property]") {
    const auto cfg = testing::small_config();
    const auto model = testing::random_moe_model(cfg, 4, {3, 15.0}, 8);
    const auto prompt = prompt_of(TaskSuite::standard()[2], 3);
    const auto gen = generate(model, prompt, 5);
    REQUIRE(gen.trace.steps.size() == prompt.size() + 5);
    for (const auto& step : gen.trace.steps) {
        REQUIRE(step.sites.size() == 14);
        for (const auto& site : step.sites) {
            REQUIRE(site.indices.size() == 3);
            double sum = 0.0;
            for (double w : site.weights) sum += w;
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
        CHECK(step.dominant == dominant_adapter(step.sites, 4));
    }
    const auto jsonl = gen.trace.to_jsonl();
    CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == std::ptrdiff_t(gen.trace.steps.size()));
    CHECK(jsonl.find("\"per_site\"") != std::string::npos);
}

TEST_CASE("dominant adapter sums weights and breaks ties low", "[toy]") {
    std::vector<TraceSite> sites(3);
    sites[0].indices = {2, 1};
    sites[0].weights = {0.75, 0.25};
    sites[1].indices = {1};
    sites[1].weights = {1.0};
    sites[2].indices = {2, 0};
    sites[2].weights = {0.5, 0.5};
    CHECK(dominant_adapter(sites, 3) == 1);  // 1.25 each for adapters 1 and 2
    sites[2].weights = {0.75, 0.25};
    CHECK(dominant_adapter(sites, 3) == 2);
}

TEST_CASE("routing in earlier blocks ignores later banks", "[toy][property]") {
    const auto cfg = testing::small_config();
    const auto model = testing::random_moe_model(cfg, 3, {2, 1.0}, 11);
    auto altered = model;
    auto& layer = altered.site(1, Site::q).layer;
    Rng rng(99);
    layer.bank = LoraBank<float>(random_normal<float>(layer.bank.a_stack().shape(), rng),
                                 random_normal<float>(layer.bank.b_stack().shape(), rng), layer.bank.names(),
                                 layer.bank.alpha());
    const auto prompt = prompt_of(TaskSuite::standard()[0], 5);
    const auto a = toy_forward(model, prompt), b = toy_forward(altered, prompt);
    for (std::size_t s = 0; s < kSitesPerBlock; ++s) CHECK(a.routing[s] == b.routing[s]);
    // Block 1, site q reads its own input, which precedes its bank.
    CHECK(a.routing[kSitesPerBlock] == b.routing[kSitesPerBlock]);
    // Downstream of the altered bank the routing may change.
    CHECK_FALSE(a.logits == b.logits);
}

TEST_CASE("routing at a position ignores later tokens", "[toy][property]") {
    const auto cfg = testing::small_config();
    const auto model = testing::random_moe_model(cfg, 3, {2, 1.0}, 12);
    auto prompt = prompt_of(TaskSuite::standard()[0], 6);
    const auto a = toy_forward(model, prompt);
    prompt.back() = prompt.back() == 5 ? 6 : 5;
    const auto b = toy_forward(model, prompt);
    for (std::size_t s = 0; s < a.routing.size(); ++s)
        for (std::size_t t = 0; t + 1 < prompt.size(); ++t) CHECK(a.routing[s][t] == b.routing[s][t]);
}

TEST_CASE("generation edge cases", "[toy]") {
    const auto cfg = testing::small_config();
    const auto model = testing::random_moe_model(cfg, 2, {1, 1.0}, 13);
    const auto prompt = prompt_of(TaskSuite::standard()[0], 7);
    const auto none = generate(model, prompt, 0);
    CHECK(none.tokens.empty());
    CHECK(none.trace.steps.size() == prompt.size());
    CHECK_THROWS_AS(generate(model, prompt, cfg.max_seq), GenerationError);
    CHECK_THROWS_AS(generate(model, std::vector<int>{}, 3), GenerationError);
    CHECK_THROWS_AS(generate(model, std::vector<int>{int(cfg.vocab)}, 3), GenerationError);
    const auto again = generate(model, prompt, 6);
    CHECK(again.tokens == generate(model, prompt, 6).tokens);
}

TEST_CASE("temperature changes weights but not the selection for a fixed input", "[toy][property]") {
    const auto cfg = testing::small_config();
    const auto model = testing::random_moe_model(cfg, 4, {2, 1.0}, 14);
    const auto prompt = prompt_of(TaskSuite::standard()[3], 8);
    auto entropy = [](const TraceSite& site) {
        double e = 0.0;
        for (double w : site.weights) e -= w > 0 ? w * std::log(w) : 0.0;
        return e;
    };
    std::vector<RoutingTrace> traces;
    for (double tau : {1.0, 15.0, 30.0}) {
        InferenceOptions opts;
        opts.routing = RoutingConfig{2, tau};
        traces.push_back(trace_sequence(model, prompt, opts));
    }
    // q, k and v of the first block read the embeddings directly, so their
    // inputs do not depend on tau; deeper sites see tau-dependent activations.
    for (std::size_t i = 1; i < traces.size(); ++i)
        for (std::size_t p = 0; p < prompt.size(); ++p)
            for (std::size_t s = 0; s < 3; ++s) {
                const auto& now = traces[i].steps[p].sites[s];
                const auto& prev = traces[i - 1].steps[p].sites[s];
                CHECK(now.indices == traces[0].steps[p].sites[s].indices);
                CHECK(entropy(now) >= entropy(prev) - 1e-12);
            }

    // With k = 1 every weight is 1 and the whole trace is tau invariant.
    std::vector<std::size_t> dominant;
    for (double tau : {1.0, 15.0, 30.0}) {
        InferenceOptions opts;
        opts.routing = RoutingConfig{1, tau};
        const auto tr = trace_sequence(model, prompt, opts);
        std::vector<std::size_t> seq;
        for (const auto& step : tr.steps) seq.push_back(step.dominant);
        if (dominant.empty()) dominant = seq;
        CHECK(seq == dominant);
    }
}

TEST_CASE("adapter training with few steps lowers held-out loss and keeps the base", "[toy][training]") {
    const auto suite = TaskSuite::standard();
    const auto base = build_base_model({}, 3, task_token_groups(suite));
    const auto copy = base;
    AdapterTrainConfig cfg;
    cfg.steps = 100;
    cfg.holdout = 16;
    const auto res = train_adapter(base, suite[0], cfg);
    CHECK(res.final_loss < 0.7 * res.initial_loss);
    CHECK(same_base(base, copy));
    CHECK(base.num_gates() == 0);

    cfg.steps = 0;
    const auto untouched = train_adapter(base, suite[2], cfg);
    for (const auto& block : untouched.adapters)
        for (const auto& ad : block) {
            double mass = 0.0;
            for (float v : ad.b.data()) mass += std::abs(v);
            CHECK(mass == 0.0);
        }
    CHECK(untouched.final_loss == untouched.initial_loss);

    cfg.lr = -1;
    CHECK_THROWS_AS(train_adapter(base, suite[2], cfg), ParameterError);
}

TEST_CASE("trained adapters solve their task", "[toy][slow]") {
    const auto& t = Trained::get();
    for (std::size_t i = 0; i < t.suite.size(); ++i) {
        const auto& r = t.adapters[i];
        CHECK(r.final_loss < 0.7 * r.initial_loss);
        std::vector<TaskSample> held;
        for (std::uint64_t s = 0; s < 50; ++s) held.push_back(t.suite[i].generate(900000 + s));
        const double em = exact_match(with_single_adapter(t.base, r.adapters), held);
        INFO("task " << t.suite[i].name << " exact match " << em);
        CHECK(em >= 0.9);
    }
}

TEST_CASE("the copy task is learnable by the base architecture", "[toy][slow]") {
    const auto& t = Trained::get();
    AdapterTrainConfig cfg;
    cfg.steps = 300;
    const auto full = train_full_model(t.base, t.suite[0], cfg);
    std::vector<TaskSample> held;
    for (std::uint64_t s = 0; s < 50; ++s) held.push_back(t.suite[0].generate(910000 + s));
    const double em = exact_match(full, held);
    INFO("full-model copy exact match " << em);
    CHECK(em >= 0.9);
}

TEST_CASE("an adapter leaves other tasks' loss within 5% of base", "[toy][slow][!shouldfail]") {
    // Measured: a trained adapter shifts other-task CE by far more than 5%.
    const auto& t = Trained::get();
    std::vector<TaskSample> reverse;
    for (std::uint64_t s = 0; s < 50; ++s) reverse.push_back(t.suite[1].generate(920000 + s));
    const double base_ce = task_loss(t.base, reverse);
    const double with_copy = task_loss(t.base, reverse, &t.adapters[0].adapters);
    INFO("reverse CE base " << base_ce << " with copy adapter " << with_copy);
    CHECK(std::abs(with_copy - base_ce) <= 0.05 * base_ce);
}

TEST_CASE("a single-task prompt is routed to its adapter", "[toy][slow]") {
    const auto& t = Trained::get();
    for (std::size_t i = 0; i < t.suite.size(); ++i) {
        std::size_t hits = 0, total = 0;
        for (std::uint64_t s = 0; s < 10; ++s) {
            const auto gen = generate(t.moe, prompt_of(t.suite[i], 930000 + s), t.suite[i].length);
            for (const auto& step : gen.trace.steps) {
                hits += step.dominant == i ? 1 : 0;
                ++total;
            }
        }
        const double frac = double(hits) / double(total);
        INFO("task " << t.suite[i].name << " dominance " << frac);
        CHECK(frac >= 0.9);
    }
}

TEST_CASE("a repeated-task composite keeps one adapter throughout", "[toy][slow]") {
    const auto& t = Trained::get();
    for (std::size_t i = 0; i < t.suite.size(); ++i) {
        CompositeOptions opts;
        opts.seed = 5;
        opts.inference.routing = RoutingConfig{1, 15.0};
        const auto rep = composite_eval(t.moe, t.suite, {i, i}, opts);
        REQUIRE(rep.segments.size() == 2);
        INFO("task " << t.suite[i].name << " min dominance " << rep.min_dominance());
        CHECK(rep.min_dominance() >= 0.9);
        CHECK(rep.max_boundary_offset() == 0);
        for (const auto& seg : rep.segments) {
            CHECK(seg.dominance >= 0.0);
            CHECK(seg.dominance <= 1.0);
        }
    }
    CHECK_THROWS_AS(composite_eval(t.moe, t.suite, {0}, CompositeOptions{}), ParameterError);
    CHECK_THROWS_AS(composite_eval(t.base, t.suite, {0, 1}, CompositeOptions{}), ConfigurationError);
}
