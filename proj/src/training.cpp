// SPDX-License-Identifier: Apache-2.0
#include "meteora/training.hpp"

#include <charconv>
#include <cmath>
#include <numeric>
#include <thread>

namespace meteora {

using autodiff::Tape;
using autodiff::Var;

double gate_ce_loss(std::span<const double> logits, std::size_t label) {
    if (logits.empty()) throw ParameterError("gate_ce_loss needs at least one logit");
    if (label >= logits.size()) {
        throw ParameterError("gate label " + std::to_string(label) + " out of range for n=" +
                             std::to_string(logits.size()));
    }
    double mx = -INFINITY;
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return -(logits[label] - mx - std::log(sum));
}

double joint_loss(double lm_loss, std::span<const double> gate_losses, double beta) {
    if (gate_losses.empty()) throw ParameterError("joint_loss needs at least one gate loss");
    return lm_loss + beta * std::accumulate(gate_losses.begin(), gate_losses.end(), 0.0);
}

double top1_loss(std::span<const double> gate_losses) {
    if (gate_losses.empty()) throw ParameterError("top1_loss needs at least one gate loss");
    return std::accumulate(gate_losses.begin(), gate_losses.end(), 0.0);
}

TapeModel TapeModel::from(const ToyModel& model) {
    TapeModel tm;
    tm.config = model.config;
    tm.tok_emb = model.tok_emb.cast<double>();
    tm.lm_head = model.lm_head.cast<double>();
    tm.pos_emb = model.pos_emb.cast<double>();
    tm.final_norm = model.final_norm.cast<double>();
    tm.blocks.resize(model.blocks.size());
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const auto& src = model.blocks[b];
        auto& dst = tm.blocks[b];
        dst.attn_norm = src.attn_norm.cast<double>();
        dst.mlp_norm = src.mlp_norm.cast<double>();
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const auto& layer = src.sites[s].layer;
            auto& site = dst.sites[s];
            site.weight = layer.base_weight.cast<double>();
            if (src.sites[s].routed()) {
                site.a_stack = layer.bank.a_stack().cast<double>();
                site.b_stack = layer.bank.b_stack().cast<double>();
                site.bank_scale = layer.scale;
                site.gate = layer.gate.weight.cast<double>();
            }
        }
    }
    return tm;
}

TapeForward record_forward(Tape& tape, const TapeModel& model, std::span<const int> tokens, const TapeParams& params,
                           std::size_t k, double temperature) {
    const auto& cfg = model.config;
    if (tokens.empty() || tokens.size() > cfg.max_seq) {
        throw DimensionError("sequence length " + std::to_string(tokens.size()) + " outside [1, " +
                             std::to_string(cfg.max_seq) + "]");
    }
    TapeForward f;
    auto leaf = [&tape](const Tensor64& t, bool trainable) {
        return trainable ? tape.param_ref(t) : tape.constant_ref(t);
    };
    auto site_out = [&](const TapeSite& site, Var in) {
        const Var w = leaf(site.weight, params.base);
        f.site_weights.push_back(w);
        Var out = autodiff::matmul(in, w);
        if (!site.lora_a.empty()) {
            const Var a = leaf(site.lora_a, params.adapters), b = leaf(site.lora_b, params.adapters);
            f.lora_a.push_back(a);
            f.lora_b.push_back(b);
            out = autodiff::add(out, autodiff::scale(autodiff::matmul(autodiff::matmul(in, a), b), site.lora_scale));
        } else {
            f.lora_a.emplace_back();
            f.lora_b.emplace_back();
        }
        if (!site.gate.empty()) {
            const Var g = leaf(site.gate, params.gates);
            const Var logits = autodiff::matmul(in, g);
            const auto& lv = logits.value();
            std::vector<std::vector<std::uint32_t>> sel(lv.dim(0));
            for (std::size_t t = 0; t < lv.dim(0); ++t)
                for (std::size_t i : topk<double>(lv.slice(t), k)) sel[t].push_back(static_cast<std::uint32_t>(i));
            const Var w = autodiff::softmax_rows(autodiff::topk_gather(logits, sel), temperature);
            out = autodiff::add(out, autodiff::routed_lora(in, w, sel, site.a_stack, site.b_stack, site.bank_scale));
            f.gates.push_back(g);
            f.gate_logits.push_back(logits);
            f.gate_sites.push_back(f.site_weights.size() - 1);
            f.selections.push_back(std::move(sel));
        }
        return out;
    };

    std::vector<int> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    Var x = autodiff::add(autodiff::embedding(tape.constant_ref(model.tok_emb), tokens),
                          autodiff::embedding(tape.constant_ref(model.pos_emb), positions));
    for (const auto& blk : model.blocks) {
        auto site = [&blk](Site s) -> const TapeSite& { return blk.sites[static_cast<std::size_t>(s)]; };
        const Var n1 = autodiff::rmsnorm(x, blk.attn_norm);
        const Var q = site_out(site(Site::q), n1);
        const Var kk = site_out(site(Site::k), n1);
        const Var v = site_out(site(Site::v), n1);
        x = autodiff::add(x, site_out(site(Site::o), autodiff::causal_attention(q, kk, v, cfg.heads)));
        const Var n2 = autodiff::rmsnorm(x, blk.mlp_norm);
        // Site order follows kAllSites so per-site vectors index as block*7 + site.
        const Var up = site_out(site(Site::up), n2);
        const Var gate = site_out(site(Site::gate), n2);
        x = autodiff::add(x, site_out(site(Site::down), autodiff::mul(autodiff::silu(gate), up)));
    }
    const Var nf = autodiff::rmsnorm(x, model.final_norm);
    f.logits = autodiff::matmul(nf, tape.constant_ref(model.lm_head));
    return f;
}

const char* to_string(GateLoss mode) noexcept { return mode == GateLoss::top1 ? "top1" : "topk"; }

GateSample GateSample::from(const TaskSample& s) { return pack(std::span<const TaskSample>(&s, 1)); }

GateSample GateSample::pack(std::span<const TaskSample> samples) {
    if (samples.empty()) throw ParameterError("cannot pack zero samples");
    GateSample g;
    for (const auto& s : samples) {
        if (s.prompt.empty()) throw ParameterError("sample has an empty prompt");
        const std::size_t start = g.tokens.size();
        const auto toks = s.tokens();
        g.tokens.insert(g.tokens.end(), toks.begin(), toks.end());
        g.lm_targets.resize(g.tokens.size(), -1);
        g.labels.resize(g.tokens.size(), static_cast<int>(s.task_id));
        for (std::size_t i = 0; i < s.target.size(); ++i) g.lm_targets[start + s.prompt.size() + i - 1] = s.target[i];
    }
    return g;
}

std::vector<GateSample> packed_dataset(const TaskSuite& suite, std::size_t per_task, std::size_t max_pack,
                                       std::uint64_t seed) {
    if (max_pack == 0) throw ParameterError("max_pack must be positive");
    auto flat = suite.balanced_dataset(per_task, seed);
    Rng rng = Rng(seed).fork(1);
    for (std::size_t i = flat.size(); i > 1; --i) std::swap(flat[i - 1], flat[rng.below(i)]);
    std::vector<GateSample> out;
    for (std::size_t at = 0; at < flat.size();) {
        const std::size_t take = std::min<std::size_t>(1 + rng.below(max_pack), flat.size() - at);
        out.push_back(GateSample::pack(std::span<const TaskSample>(flat).subspan(at, take)));
        at += take;
    }
    return out;
}

void TrainConfig::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ParameterError("beta must be >= 0");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("learning rate must be > 0");
    if (batch == 0) throw ParameterError("batch size must be positive");
    if (k == 0) throw ParameterError("k must be positive");
}

SampleLoss sample_loss(Tape& tape, const TapeModel& model, const GateSample& sample, const TrainConfig& cfg,
                       TapeForward* out) {
    TapeForward fwd = record_forward(tape, model, sample.tokens, TapeParams{.gates = true}, cfg.effective_k());
    if (fwd.gate_logits.empty()) throw ConfigurationError("model has no gates to train");
    SampleLoss res;
    const Var lm = autodiff::cross_entropy(fwd.logits, sample.lm_targets);
    res.lm = lm.value()[0];
    if (sample.labels.size() != sample.tokens.size()) throw DimensionError("one label per position required");
    std::vector<Var> terms;
    for (const Var& gl : fwd.gate_logits) {
        terms.push_back(autodiff::cross_entropy(gl, sample.labels));
        res.gate_terms.push_back(terms.back().value()[0]);
    }
    const Var gate_sum = autodiff::sum_scalars(terms);
    res.total = cfg.loss == GateLoss::top1 ? gate_sum : autodiff::add(lm, autodiff::scale(gate_sum, cfg.beta));
    if (out) *out = std::move(fwd);
    return res;
}

namespace {

Tensor64 grad_or_zero(const Var& v) {
    try {
        return v.grad();
    } catch (const InternalError&) {
        return Tensor64(v.value().shape());
    }
}

struct GateGrads {
    double total = 0.0, lm = 0.0, gate = 0.0;
    std::vector<Tensor64> grads;  // per routed site
};

GateGrads sample_gradients(const TapeModel& tm, const GateSample& sample, const TrainConfig& cfg) {
    Tape tape;
    TapeForward fwd;
    const auto loss = sample_loss(tape, tm, sample, cfg, &fwd);
    tape.backward(loss.total);
    GateGrads g;
    g.total = loss.total.value()[0];
    g.lm = loss.lm;
    g.gate = std::accumulate(loss.gate_terms.begin(), loss.gate_terms.end(), 0.0);
    for (const Var& v : fwd.gates) g.grads.push_back(grad_or_zero(v));
    return g;
}

template <typename Fn>
void for_each_index(std::size_t count, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    const std::size_t chunk = (count + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
        const std::size_t b = w * chunk, e = std::min(count, b + chunk);
        if (b < e) pool.emplace_back([&fn, b, e] {
            for (std::size_t i = b; i < e; ++i) fn(i);
        });
    }
}

double loss_value(const TapeModel& tm, const GateSample& sample, const TrainConfig& cfg,
                  std::vector<std::vector<std::vector<std::uint32_t>>>* selections) {
    Tape tape;
    TapeForward fwd;
    const auto loss = sample_loss(tape, tm, sample, cfg, &fwd);
    if (selections) *selections = std::move(fwd.selections);
    return loss.total.value()[0];
}

std::vector<Tensor64*> gate_slots(TapeModel& tm) {
    std::vector<Tensor64*> out;
    for (auto& blk : tm.blocks)
        for (auto& s : blk.sites)
            if (!s.gate.empty()) out.push_back(&s.gate);
    return out;
}

} // namespace

GateTrainResult train_gates(ToyModel& model, const std::vector<GateSample>& dataset, const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw ParameterError("gate training dataset is empty");
    if (!model.has_moe()) throw ConfigurationError("model has no MeteoRA banks; train adapters first");
    const std::size_t n = model.num_adapters();
    for (const auto& s : dataset) {
        for (int label : s.labels) {
            if (label < 0 || static_cast<std::size_t>(label) >= n) {
                throw ParameterError("sample label " + std::to_string(label) + " out of range for " +
                                     std::to_string(n) + " adapters");
            }
        }
    }
    if (cfg.effective_k() > n) throw ParameterError("k exceeds the number of adapters");

    TapeModel tm = TapeModel::from(model);
    const auto gates = gate_slots(tm);
    GateTrainResult res;
    std::vector<std::size_t> order(dataset.size());
    const Rng root(cfg.seed);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = root.fork(epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        EpochLoss el;
        el.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t count = std::min(cfg.batch, order.size() - start);
            std::vector<GateGrads> per(count);
            for_each_index(count, cfg.threads,
                           [&](std::size_t i) { per[i] = sample_gradients(tm, dataset[order[start + i]], cfg); });
            const double step = cfg.lr / double(count);
            for (const auto& g : per) {
                if (!std::isfinite(g.total)) {
                    throw TrainingError("gate training diverged in epoch " + std::to_string(epoch));
                }
                el.total += g.total;
                el.lm_loss += g.lm;
                el.gate_loss += g.gate;
            }
            for (std::size_t s = 0; s < gates.size(); ++s) {
                auto dst = gates[s]->data();
                for (const auto& g : per) {
                    const auto src = g.grads[s].data();
                    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] -= step * src[j];
                }
            }
        }
        const double inv = 1.0 / double(dataset.size());
        el.total *= inv;
        el.lm_loss *= inv;
        el.gate_loss *= inv;
        res.curve.push_back(el);
    }
    std::size_t s = 0;
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        for (auto& site : model.blocks[b].sites) {
            if (!site.routed()) continue;
            site.layer.gate.weight = gates[s++]->cast<float>();
        }
    }
    return res;
}

std::string loss_curve_csv(const std::vector<EpochLoss>& curve) {
    std::string out = "epoch,lm_loss,gate_loss,total\n";
    char buf[64];
    auto put = [&](double v) {
        const auto r = std::to_chars(buf, buf + sizeof buf, v);
        out.append(buf, r.ptr);
    };
    for (const auto& e : curve) {
        out += std::to_string(e.epoch);
        out += ',';
        put(e.lm_loss);
        out += ',';
        put(e.gate_loss);
        out += ',';
        put(e.total);
        out += '\n';
    }
    return out;
}

namespace {

/// (token-level hits, token count, site-level hits, site count) under top-1 routing.
std::array<std::size_t, 4> routing_hits(const ToyModel& model, const std::vector<GateSample>& samples) {
    if (samples.empty()) throw ParameterError("no samples to score");
    InferenceOptions opts;
    opts.routing = RoutingConfig{1, 1.0};
    std::array<std::size_t, 4> h{};
    for (const auto& s : samples) {
        const auto trace = trace_sequence(model, s.tokens, opts);
        for (const auto& step : trace.steps) {
            const auto label = static_cast<std::size_t>(s.labels[step.step]);
            h[0] += step.dominant == label ? 1 : 0;
            ++h[1];
            for (const auto& site : step.sites) {
                h[2] += site.indices.front() == label ? 1 : 0;
                ++h[3];
            }
        }
    }
    return h;
}

} // namespace

double routing_accuracy(const ToyModel& model, const std::vector<GateSample>& samples) {
    const auto h = routing_hits(model, samples);
    return double(h[0]) / double(h[1]);
}

double site_routing_accuracy(const ToyModel& model, const std::vector<GateSample>& samples) {
    const auto h = routing_hits(model, samples);
    return double(h[2]) / double(h[3]);
}

namespace {

double relative_error(double g, double fd) {
    return std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), kGradCheckFloor});
}

} // namespace

GradCheckResult grad_check(const ToyModel& model, const GateSample& sample, const TrainConfig& cfg, double eps,
                           std::size_t coordinates, std::uint64_t seed) {
    if (!(eps > 0.0)) throw ParameterError("grad_check needs eps > 0");
    TapeModel tm = TapeModel::from(model);
    const auto analytic = sample_gradients(tm, sample, cfg);
    std::vector<std::vector<std::vector<std::uint32_t>>> base_sel;
    loss_value(tm, sample, cfg, &base_sel);
    auto gates = gate_slots(tm);

    std::size_t total = 0;
    for (auto* g : gates) total += g->size();
    GradCheckResult res;
    Rng rng(seed);
    const std::size_t max_attempts = 20 * coordinates;
    for (std::size_t attempt = 0; attempt < max_attempts && res.checked < coordinates; ++attempt) {
        std::size_t flat = rng.below(total), s = 0;
        while (flat >= gates[s]->size()) flat -= gates[s++]->size();
        double& w = (*gates[s])[flat];
        const double saved = w;
        std::vector<std::vector<std::vector<std::uint32_t>>> sel_p, sel_m;
        w = saved + eps;
        const double fp = loss_value(tm, sample, cfg, &sel_p);
        w = saved - eps;
        const double fm = loss_value(tm, sample, cfg, &sel_m);
        w = saved;
        if (sel_p != base_sel || sel_m != base_sel) {
            ++res.skipped;
            continue;
        }
        const double fd = (fp - fm) / (2.0 * eps);
        res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic.grads[s][flat], fd));
        ++res.checked;
    }
    return res;
}

GradCheckResult grad_check_function(const std::function<double(std::span<const double>)>& f,
                                    std::span<const double> x, std::span<const double> grad, double eps) {
    if (!(eps > 0.0)) throw ParameterError("grad_check needs eps > 0");
    if (x.size() != grad.size()) throw DimensionError("gradient and point differ in size");
    std::vector<double> p(x.begin(), x.end());
    GradCheckResult res;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + eps;
        const double fp = f(p);
        p[i] = saved - eps;
        const double fm = f(p);
        p[i] = saved;
        res.max_rel_error = std::max(res.max_rel_error, relative_error(grad[i], (fp - fm) / (2.0 * eps)));
        ++res.checked;
    }
    return res;
}

} // namespace meteora
