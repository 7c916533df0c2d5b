// SPDX-License-Identifier: Apache-2.0
#include "meteora/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "meteora/training.hpp"

namespace meteora {

const char* site_name(Site site) noexcept {
    switch (site) {
    case Site::q: return "q_proj";
    case Site::k: return "k_proj";
    case Site::v: return "v_proj";
    case Site::o: return "o_proj";
    case Site::up: return "up_proj";
    case Site::gate: return "gate_proj";
    case Site::down: return "down_proj";
    }
    return "?";
}

Site parse_site(const std::string& name) {
    for (Site s : kAllSites)
        if (name == site_name(s)) return s;
    throw ParameterError("unknown site '" + name + "'");
}

void ToyModelConfig::validate() const {
    if (vocab == 0 || d_model == 0 || heads == 0 || blocks == 0 || ffn == 0 || max_seq == 0) {
        throw ConfigurationError("toy model sizes must be positive");
    }
    if (d_model % heads != 0) {
        throw ConfigurationError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                                 std::to_string(heads));
    }
}

std::size_t ToyModelConfig::site_in(Site site) const { return site == Site::down ? ffn : d_model; }

std::size_t ToyModelConfig::site_out(Site site) const {
    return site == Site::up || site == Site::gate ? ffn : d_model;
}

bool ToyModel::has_moe() const {
    for (const auto& b : blocks)
        for (const auto& s : b.sites)
            if (s.routed()) return true;
    return false;
}

std::size_t ToyModel::num_gates() const {
    std::size_t n = 0;
    for (const auto& b : blocks)
        for (const auto& s : b.sites) n += s.routed() ? 1 : 0;
    return n;
}

std::size_t ToyModel::num_adapters() const { return has_moe() ? blocks.front().sites.front().layer.bank.size() : 0; }

std::vector<std::string> ToyModel::adapter_names() const {
    return has_moe() ? blocks.front().sites.front().layer.bank.names() : std::vector<std::string>{};
}

std::vector<TokenGroup> task_token_groups(const TaskSuite& suite) {
    std::vector<TokenGroup> out;
    for (const auto& t : suite.tasks()) out.push_back({t.alphabet_begin, t.separator()});
    return out;
}

ToyModel build_base_model(const ToyModelConfig& cfg, std::uint64_t seed, std::span<const TokenGroup> groups,
                          double group_scale) {
    cfg.validate();
    if (!(group_scale >= 0.0)) throw ParameterError("group scale must be non-negative");
    const Rng root(seed);
    ToyModel m;
    m.config = cfg;
    Rng r_tok = root.fork(1), r_pos = root.fork(2), r_group = root.fork(4);
    m.tok_emb = random_normal<float>({cfg.vocab, cfg.d_model}, r_tok);
    for (const auto& g : groups) {
        if (g.first < 0 || g.last < g.first || static_cast<std::size_t>(g.last) >= cfg.vocab) {
            throw ConfigurationError("token group [" + std::to_string(g.first) + ", " + std::to_string(g.last) +
                                     "] is outside the vocabulary");
        }
        const auto centroid = random_normal<double>({cfg.d_model}, r_group, group_scale);
        for (int t = g.first; t <= g.last; ++t)
            for (std::size_t j = 0; j < cfg.d_model; ++j)
                m.tok_emb(static_cast<std::size_t>(t), j) += static_cast<float>(centroid[j]);
    }
    m.pos_emb = random_normal<float>({cfg.max_seq, cfg.d_model}, r_pos);
    m.final_norm = Tensor::ones({1, cfg.d_model});
    Rng r_head = root.fork(3);
    m.lm_head = random_normal<float>({cfg.d_model, cfg.vocab}, r_head, 1.0 / std::sqrt(double(cfg.d_model)));
    m.blocks.resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        auto& blk = m.blocks[b];
        blk.attn_norm = Tensor::ones({1, cfg.d_model});
        blk.mlp_norm = Tensor::ones({1, cfg.d_model});
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const Site site = kAllSites[s];
            const std::size_t in = cfg.site_in(site), out = cfg.site_out(site);
            Rng r = root.fork(100 + b * kSitesPerBlock + s);
            blk.sites[s].layer.base_weight = random_normal<float>({in, out}, r, 1.0 / std::sqrt(double(in)));
        }
    }
    return m;
}

SiteBanks stack_adapter_sets(const std::vector<AdapterSet>& sets) {
    if (sets.empty()) throw ConfigurationError("no adapter sets to stack");
    const std::size_t blocks = sets.front().size();
    SiteBanks banks(blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            std::vector<LoraAdapter<float>> column;
            for (const auto& set : sets) {
                if (set.size() != blocks) throw ConfigurationError("adapter sets disagree on block count");
                column.push_back(set[b][s]);
            }
            banks[b][s] = LoraBank<float>::stack(column);
        }
    }
    return banks;
}

void attach_banks(ToyModel& model, SiteBanks banks, const RoutingConfig& routing, std::uint64_t gate_seed,
                  double gate_std) {
    const auto& cfg = model.config;
    if (banks.size() != cfg.blocks) {
        throw ConfigurationError("expected banks for " + std::to_string(cfg.blocks) + " blocks, got " +
                                 std::to_string(banks.size()));
    }
    const std::size_t n = banks.front().front().size();
    const Rng root(gate_seed);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const Site site = kAllSites[s];
            auto& bank = banks[b][s];
            if (bank.size() != n) throw ConfigurationError("all sites must carry the same number of adapters");
            if (bank.in_dim() != cfg.site_in(site) || bank.out_dim() != cfg.site_out(site)) {
                throw ConfigurationError("bank for block " + std::to_string(b) + " " + site_name(site) +
                                         " has shape (" + std::to_string(bank.in_dim()) + ", " +
                                         std::to_string(bank.out_dim()) + ")");
            }
            auto& layer = model.blocks[b].sites[s].layer;
            layer.bank = std::move(bank);
            Rng r = root.fork(1000 + b * kSitesPerBlock + s);
            layer.gate.weight = random_normal<float>({cfg.site_in(site), n}, r, gate_std);
            layer.routing = routing;
            layer.scale = layer.bank.default_scale();
            layer.validate();
        }
    }
}

ToyModel build_toy_model(const ToyModelConfig& cfg, SiteBanks banks, const RoutingConfig& routing,
                         std::uint64_t seed, std::span<const TokenGroup> groups) {
    auto m = build_base_model(cfg, seed, groups);
    attach_banks(m, std::move(banks), routing, seed);
    return m;
}

// ---- f32 inference ----

namespace {

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
    const std::size_t rows = x.dim(0), d = x.dim(1);
    Tensor out({rows, d});
    for (std::size_t t = 0; t < rows; ++t) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += double(x(t, j)) * x(t, j);
        const double inv = 1.0 / std::sqrt(ss / double(d) + eps);
        for (std::size_t j = 0; j < d; ++j) out(t, j) = static_cast<float>(x(t, j) * inv * gain[j]);
    }
    return out;
}

Tensor attention_rows(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    const std::size_t rows = q.dim(0), d = q.dim(1), dh = d / heads;
    const double inv = 1.0 / std::sqrt(double(dh));
    Tensor out({rows, d});
    std::vector<double> p(rows);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t t = 0; t < rows; ++t) {
            double mx = -INFINITY;
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += double(q(t, off + c)) * k(j, off + c);
                p[j] = s * inv;
                mx = std::max(mx, p[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= t; ++j) sum += (p[j] = std::exp(p[j] - mx));
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j <= t; ++j) acc += p[j] * v(j, off + c);
                out(t, off + c) = static_cast<float>(acc / sum);
            }
        }
    }
    return out;
}

Tensor apply_site(const ToySite& site, const Tensor& x, const InferenceOptions& opts,
                  std::vector<RoutingDecision>* routing) {
    if (!site.routed()) return matmul(x, site.layer.base_weight);
    ForwardOptions fo = opts.forward;
    if (opts.routing) fo.routing = opts.routing;
    TokenBatch<float> batch{x.reshaped({1, x.dim(0), x.dim(1)})};
    auto res = forward(site.layer, batch, opts.strategy, fo);
    if (routing) *routing = std::move(res.routing);
    return res.output.reshaped({x.dim(0), site.layer.out_dim()});
}

void check_tokens(const ToyModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) throw GenerationError("empty token sequence");
    if (tokens.size() > cfg.max_seq) {
        throw GenerationError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                              std::to_string(cfg.max_seq));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
            throw GenerationError("token " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(cfg.vocab));
        }
    }
}

} // namespace

ModelOutput toy_forward(const ToyModel& model, std::span<const int> tokens, const InferenceOptions& opts) {
    const auto& cfg = model.config;
    check_tokens(cfg, tokens);
    const std::size_t rows = tokens.size(), d = cfg.d_model;
    Tensor x({rows, d});
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t j = 0; j < d; ++j) x(t, j) = model.tok_emb(tokens[t], j) + model.pos_emb(t, j);

    ModelOutput out;
    out.routing.resize(cfg.num_sites());
    auto site_out = [&](std::size_t b, Site s, const Tensor& in) {
        return apply_site(model.site(b, s), in, opts, &out.routing[b * kSitesPerBlock + static_cast<std::size_t>(s)]);
    };
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const auto& blk = model.blocks[b];
        const Tensor n1 = rmsnorm_rows(x, blk.attn_norm);
        const Tensor q = site_out(b, Site::q, n1), k = site_out(b, Site::k, n1), v = site_out(b, Site::v, n1);
        x = add(x, site_out(b, Site::o, attention_rows(q, k, v, cfg.heads)));
        const Tensor n2 = rmsnorm_rows(x, blk.mlp_norm);
        Tensor g = site_out(b, Site::gate, n2);
        const Tensor u = site_out(b, Site::up, n2);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float z = g[i];
            g[i] = static_cast<float>(z / (1.0 + std::exp(-double(z)))) * u[i];
        }
        x = add(x, site_out(b, Site::down, g));
    }
    const Tensor nf = rmsnorm_rows(x, model.final_norm);
    out.logits = matmul(nf, model.lm_head);
    return out;
}

std::size_t dominant_adapter(const std::vector<TraceSite>& sites, std::size_t num_adapters) {
    std::vector<double> total(num_adapters, 0.0);
    for (const auto& s : sites)
        for (std::size_t j = 0; j < s.indices.size(); ++j) total.at(s.indices[j]) += s.weights[j];
    return static_cast<std::size_t>(std::max_element(total.begin(), total.end()) - total.begin());
}

RoutingTrace trace_sequence(const ToyModel& model, std::span<const int> tokens, const InferenceOptions& opts) {
    if (!model.has_moe()) throw ConfigurationError("model has no MeteoRA banks to trace");
    const auto fwd = toy_forward(model, tokens, opts);
    RoutingTrace trace;
    trace.adapter_names = model.adapter_names();
    const std::size_t n = model.num_adapters();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        TraceStep step;
        step.step = t;
        step.token = tokens[t];
        for (std::size_t b = 0; b < model.config.blocks; ++b) {
            for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
                const auto& r = fwd.routing[b * kSitesPerBlock + s];
                if (r.empty()) continue;
                step.sites.push_back({b, kAllSites[s], r[t].indices, r[t].weights});
            }
        }
        step.dominant = dominant_adapter(step.sites, n);
        trace.steps.push_back(std::move(step));
    }
    return trace;
}

std::string RoutingTrace::to_jsonl() const {
    std::string out;
    for (const auto& st : steps) {
        nlohmann::ordered_json j;
        j["step"] = st.step;
        j["token"] = st.token;
        auto sites = nlohmann::ordered_json::array();
        for (const auto& s : st.sites) {
            nlohmann::ordered_json e;
            e["block"] = s.block;
            e["site"] = site_name(s.site);
            e["indices"] = s.indices;
            e["weights"] = s.weights;
            sites.push_back(std::move(e));
        }
        j["per_site"] = std::move(sites);
        j["dominant"] = st.dominant;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void extend_greedy(const ToyModel& model, std::vector<int>& tokens, std::size_t count, const InferenceOptions& opts) {
    if (tokens.size() + count > model.config.max_seq) {
        throw GenerationError("prompt of " + std::to_string(tokens.size()) + " tokens plus " + std::to_string(count) +
                              " new tokens exceeds max_seq " + std::to_string(model.config.max_seq));
    }
    for (std::size_t i = 0; i < count; ++i) {
        const auto fwd = toy_forward(model, tokens, opts);
        const auto last = fwd.logits.slice(tokens.size() - 1);
        tokens.push_back(static_cast<int>(argmax(last)));
    }
}

Generation generate(const ToyModel& model, std::span<const int> prompt, std::size_t max_tokens,
                    const InferenceOptions& opts) {
    if (prompt.empty()) throw GenerationError("prompt is empty");
    std::vector<int> seq(prompt.begin(), prompt.end());
    check_tokens(model.config, seq);
    extend_greedy(model, seq, max_tokens, opts);
    Generation g;
    g.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
    if (model.has_moe()) g.trace = trace_sequence(model, seq, opts);
    return g;
}

double SwitchReport::min_dominance() const {
    double m = 1.0;
    for (const auto& s : segments) m = std::min(m, s.dominance);
    return m;
}

std::size_t SwitchReport::max_boundary_offset() const {
    std::size_t m = 0;
    for (std::size_t i = 1; i < segments.size(); ++i)
        if (segments[i].task_id != segments[i - 1].task_id) m = std::max(m, segments[i].switch_offset);
    return m;
}

SwitchReport composite_eval(const ToyModel& model, const TaskSuite& suite, const std::vector<std::size_t>& tasks,
                            const CompositeOptions& opts) {
    if (tasks.size() < 2) throw ParameterError("composite evaluation needs at least two tasks");
    if (!model.has_moe()) throw ConfigurationError("composite evaluation needs a MeteoRA model");
    Rng rng(opts.seed);
    SwitchReport rep;
    for (std::size_t shot = 0; shot < opts.shots; ++shot) {
        for (std::size_t t : tasks) {
            const auto s = suite[t].generate(rng);
            const auto toks = s.tokens();
            rep.sequence.insert(rep.sequence.end(), toks.begin(), toks.end());
        }
    }
    std::vector<TaskSample> questions;
    for (std::size_t t : tasks) questions.push_back(suite[t].generate(rng));
    for (const auto& q : questions) {
        SegmentReport seg;
        seg.task_id = q.task_id;
        seg.begin = rep.sequence.size();
        rep.sequence.insert(rep.sequence.end(), q.prompt.begin(), q.prompt.end());
        const std::size_t answer_at = rep.sequence.size();
        extend_greedy(model, rep.sequence, q.target.size(), opts.inference);
        seg.end = rep.sequence.size();
        for (std::size_t i = 0; i < q.target.size(); ++i)
            seg.correct_answers += rep.sequence[answer_at + i] == q.target[i] ? 1 : 0;
        rep.segments.push_back(seg);
    }
    rep.trace = trace_sequence(model, rep.sequence, opts.inference);
    for (auto& seg : rep.segments) {
        std::size_t hits = 0;
        seg.switch_offset = seg.end - seg.begin;
        for (std::size_t p = seg.begin; p < seg.end; ++p) {
            if (rep.trace.steps[p].dominant != seg.task_id) continue;
            ++hits;
            seg.switch_offset = std::min(seg.switch_offset, p - seg.begin);
        }
        seg.dominance = double(hits) / double(seg.end - seg.begin);
    }
    return rep;
}

// ---- training ----

void AdapterTrainConfig::validate() const {
    if (rank == 0) throw ParameterError("adapter rank must be positive");
    if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
    if (batch == 0) throw ParameterError("batch size must be positive");
    if (holdout == 0) throw ParameterError("holdout size must be positive");
    if (max_pack == 0) throw ParameterError("max_pack must be positive");
}

namespace {

using autodiff::Tape;
using autodiff::Var;

/// Adam over a fixed list of f64 tensors.
class Adam {
public:
    Adam(std::vector<Tensor64*> params, double lr) : params_(std::move(params)), lr_(lr) {
        for (auto* p : params_) {
            m_.emplace_back(p->shape());
            v_.emplace_back(p->shape());
        }
    }

    void step(const std::vector<Tensor64>& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto p = params_[i]->data();
            auto m = m_[i].data(), v = v_[i].data();
            const auto g = grads[i].data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = b1_ * m[j] + (1 - b1_) * g[j];
                v[j] = b2_ * v[j] + (1 - b2_) * g[j] * g[j];
                p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + 1e-8);
            }
        }
    }

private:
    std::vector<Tensor64*> params_;
    std::vector<Tensor64> m_, v_;
    double lr_;
    double b1_ = 0.9, b2_ = 0.999;
    std::size_t t_ = 0;
};

std::vector<Tensor64*> slots(TapeModel& tm, const TapeParams& which) {
    std::vector<Tensor64*> out;
    for (auto& blk : tm.blocks) {
        for (auto& s : blk.sites) {
            if (which.base) out.push_back(&s.weight);
            if (which.adapters) {
                out.push_back(&s.lora_a);
                out.push_back(&s.lora_b);
            }
        }
    }
    return out;
}

std::vector<Var> slot_vars(const TapeForward& f, const TapeParams& which) {
    std::vector<Var> out;
    for (std::size_t i = 0; i < f.site_weights.size(); ++i) {
        if (which.base) out.push_back(f.site_weights[i]);
        if (which.adapters) {
            out.push_back(f.lora_a[i]);
            out.push_back(f.lora_b[i]);
        }
    }
    return out;
}

/// Mean LM loss and gradients over a batch, evaluated per sample (optionally
/// across threads) and reduced in sample order.
double batch_gradients(const TapeModel& tm, const TapeParams& which, const std::vector<GateSample>& batch,
                       std::size_t threads, std::vector<Tensor64>& grads) {
    std::vector<std::vector<Tensor64>> per(batch.size());
    std::vector<double> losses(batch.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            Tape tape;
            const auto fwd = record_forward(tape, tm, batch[i].tokens, which, 1);
            const Var loss = autodiff::cross_entropy(fwd.logits, batch[i].lm_targets);
            tape.backward(loss);
            losses[i] = loss.value()[0];
            for (const Var& v : slot_vars(fwd, which)) per[i].push_back(v.grad());
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
    if (threads == 1) {
        work(0, batch.size());
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (batch.size() + threads - 1) / threads;
        for (std::size_t w = 0; w < threads; ++w) {
            const std::size_t b = w * chunk, e = std::min(batch.size(), b + chunk);
            if (b < e) pool.emplace_back([&work, b, e] { work(b, e); });
        }
    }
    const double inv = 1.0 / double(batch.size());
    grads.clear();
    for (const auto& g : per.front()) grads.emplace_back(g.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        total += losses[i];
        for (std::size_t p = 0; p < grads.size(); ++p) {
            auto dst = grads[p].data();
            const auto src = per[i][p].data();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * inv;
        }
    }
    return total * inv;
}

double mean_loss(const TapeModel& tm, const std::vector<TaskSample>& samples) {
    double total = 0.0;
    for (const auto& s : samples) {
        Tape tape;
        const auto g = GateSample::from(s);
        const auto fwd = record_forward(tape, tm, g.tokens, {}, 1);
        total += autodiff::cross_entropy(fwd.logits, g.lm_targets).value()[0];
    }
    return total / double(samples.size());
}

std::vector<TaskSample> draw(const SyntheticTask& task, Rng& rng, std::size_t count) {
    std::vector<TaskSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(task.generate(rng));
    return out;
}

/// `count` sequences of 1..max_pack packed samples of one task.
std::vector<GateSample> draw_packed(const SyntheticTask& task, Rng& rng, std::size_t count, std::size_t max_pack) {
    std::vector<GateSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto samples = draw(task, rng, 1 + rng.below(max_pack));
        out.push_back(GateSample::pack(samples));
    }
    return out;
}

void fit(TapeModel& tm, const TapeParams& which, const SyntheticTask& task, const AdapterTrainConfig& cfg,
         Rng& rng) {
    Adam opt(slots(tm, which), cfg.lr);
    std::vector<Tensor64> grads;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = draw_packed(task, rng, cfg.batch, cfg.max_pack);
        const double loss = batch_gradients(tm, which, batch, cfg.threads, grads);
        if (!std::isfinite(loss)) {
            throw TrainingError("training on task '" + task.name + "' diverged at step " + std::to_string(step));
        }
        opt.step(grads);
    }
}

void attach_single_adapter(TapeModel& tm, const AdapterSet& set) {
    for (std::size_t b = 0; b < tm.blocks.size(); ++b) {
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            auto& site = tm.blocks[b].sites[s];
            const auto& ad = set.at(b)[s];
            site.lora_a = ad.a.cast<double>();
            site.lora_b = ad.b.cast<double>();
            site.lora_scale = ad.default_scale();
        }
    }
}

} // namespace

AdapterTrainResult train_adapter(const ToyModel& base, const SyntheticTask& task, const AdapterTrainConfig& cfg) {
    cfg.validate();
    const auto& mc = base.config;
    const Rng root(cfg.seed);
    Rng r_hold = root.fork(1), r_train = root.fork(2), r_init = root.fork(3);
    const auto holdout = draw(task, r_hold, cfg.holdout);

    AdapterSet init(mc.blocks);
    for (std::size_t b = 0; b < mc.blocks; ++b) {
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const Site site = kAllSites[s];
            auto& ad = init[b][s];
            ad.a = random_normal<float>({mc.site_in(site), cfg.rank}, r_init, 1.0 / std::sqrt(double(mc.site_in(site))));
            ad.b = Tensor({cfg.rank, mc.site_out(site)});
            ad.alpha = cfg.alpha;
            ad.name = task.name;
        }
    }
    TapeModel tm = TapeModel::from(base);
    attach_single_adapter(tm, init);

    AdapterTrainResult res;
    res.initial_loss = mean_loss(tm, holdout);
    fit(tm, TapeParams{.adapters = true}, task, cfg, r_train);

    res.adapters = init;
    for (std::size_t b = 0; b < mc.blocks; ++b) {
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            res.adapters[b][s].a = tm.blocks[b].sites[s].lora_a.cast<float>();
            res.adapters[b][s].b = tm.blocks[b].sites[s].lora_b.cast<float>();
        }
    }
    // Score the adapters as they will be served (rounded to f32).
    attach_single_adapter(tm, res.adapters);
    res.final_loss = mean_loss(tm, holdout);
    if (!std::isfinite(res.final_loss)) throw TrainingError("training on task '" + task.name + "' diverged");
    return res;
}

ToyModel train_full_model(const ToyModel& base, const SyntheticTask& task, const AdapterTrainConfig& cfg) {
    cfg.validate();
    Rng r_train = Rng(cfg.seed).fork(2);
    TapeModel tm = TapeModel::from(base);
    fit(tm, TapeParams{.base = true}, task, cfg, r_train);
    ToyModel out = base;
    for (std::size_t b = 0; b < out.blocks.size(); ++b)
        for (std::size_t s = 0; s < kSitesPerBlock; ++s)
            out.blocks[b].sites[s].layer.base_weight = tm.blocks[b].sites[s].weight.cast<float>();
    return out;
}

double task_loss(const ToyModel& model, const std::vector<TaskSample>& samples, const AdapterSet* adapters) {
    if (samples.empty()) throw ParameterError("no samples to score");
    TapeModel tm = TapeModel::from(model);
    if (adapters) attach_single_adapter(tm, *adapters);
    return mean_loss(tm, samples);
}

double exact_match(const ToyModel& model, const std::vector<TaskSample>& samples, const InferenceOptions& opts) {
    if (samples.empty()) throw ParameterError("no samples to score");
    std::size_t hits = 0;
    for (const auto& s : samples) {
        std::vector<int> seq = s.prompt;
        extend_greedy(model, seq, s.target.size(), opts);
        hits += std::equal(s.target.begin(), s.target.end(), seq.begin() + static_cast<std::ptrdiff_t>(s.prompt.size()))
                    ? 1
                    : 0;
    }
    return double(hits) / double(samples.size());
}

ToyModel with_single_adapter(const ToyModel& base, const AdapterSet& adapters) {
    ToyModel m = base;
    std::vector<AdapterSet> one{adapters};
    attach_banks(m, stack_adapter_sets(one), RoutingConfig{}, 0, 0.0);
    return m;
}

} // namespace meteora
