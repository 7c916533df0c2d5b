// SPDX-License-Identifier: Apache-2.0
#include "meteora/tape.hpp"

#include <cmath>
#include <memory>

namespace meteora::autodiff {

namespace {

Tensor64 zeros_like(const Tensor64& t) { return Tensor64(t.shape()); }

void require_matrix(const Tensor64& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_to_string(t.shape()));
}

void same_tape(Var a, Var b) {
    if (a.tape != b.tape || a.tape == nullptr) throw InternalError("operands belong to different tapes");
}

} // namespace

const Tensor64& Var::value() const { return tape->value(id); }
const Tensor64& Var::grad() const { return tape->grad(id); }

void Tape::check(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw InternalError("variable is not recorded on this tape");
}

Var Tape::constant(Tensor64 value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::constant_ref(const Tensor64& value) {
    Node n;
    n.ref = &value;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::param_ref(const Tensor64& value) {
    Node n;
    n.ref = &value;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

const Tensor64& Tape::value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.owned;
}

const Tensor64& Tape::grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) throw InternalError("node " + std::to_string(id) + " has no gradient");
    return n.grad;
}

Tensor64& Tape::grad_mut(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = zeros_like(value(id));
    return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor64& g) {
    if (!nodes_.at(id).requires_grad) return;
    Tensor64& dst = grad_mut(id);
    if (dst.shape() != g.shape()) {
        throw InternalError("gradient shape " + shape_to_string(g.shape()) + " does not match node " +
                            shape_to_string(dst.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Var Tape::push(Tensor64 value, std::span<const Var> parents, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.is_leaf = false;
    for (const auto& p : parents) {
        check(p);
        n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
    check(loss);
    const Tensor64& lv = value(loss.id);
    if (lv.size() != 1) throw ParameterError("backward needs a scalar loss, got " + shape_to_string(lv.shape()));
    for (auto& n : nodes_) n.grad = Tensor64();
    if (!nodes_[loss.id].requires_grad) return;
    grad_mut(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.is_leaf || n.grad.empty()) continue;
        if (!n.backward) throw InternalError("node " + std::to_string(i) + " on the gradient path has no backward");
        n.backward(*this, i);
    }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    require_matrix(av, "matmul");
    require_matrix(bv, "matmul");
    auto out = meteora::matmul(av, bv);
    const Var parents[] = {a, b};
    return a.tape->push(std::move(out), parents, [a, b](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);  // p x s
        const auto& av = tape.value(a.id);
        const auto& bv = tape.value(b.id);
        const std::size_t p = av.dim(0), q = av.dim(1), s = bv.dim(1);
        if (tape.requires_grad(a.id)) {
            Tensor64 da({p, q});
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t t = 0; t < q; ++t) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < s; ++j) acc += g(i, j) * bv(t, j);
                    da(i, t) = acc;
                }
            tape.accumulate(a.id, da);
        }
        if (tape.requires_grad(b.id)) {
            Tensor64 db({q, s});
            detail::gemm_accumulate<double, double>(transpose(av).raw(), g.raw(), db.raw(), q, p, s);
            tape.accumulate(b.id, db);
        }
    });
}

Var add(Var a, Var b) {
    same_tape(a, b);
    auto out = meteora::add(a.value(), b.value());
    const Var parents[] = {a, b};
    return a.tape->push(std::move(out), parents, [a, b](Tape& tape, std::size_t self) {
        const auto g = tape.grad(self);
        tape.accumulate(a.id, g);
        tape.accumulate(b.id, g);
    });
}

Var mul(Var a, Var b) {
    same_tape(a, b);
    auto out = hadamard(a.value(), b.value());
    const Var parents[] = {a, b};
    return a.tape->push(std::move(out), parents, [a, b](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        if (tape.requires_grad(a.id)) tape.accumulate(a.id, hadamard(g, tape.value(b.id)));
        if (tape.requires_grad(b.id)) tape.accumulate(b.id, hadamard(g, tape.value(a.id)));
    });
}

Var scale(Var a, double factor) {
    auto out = scaled(a.value(), factor);
    const Var parents[] = {a};
    return a.tape->push(std::move(out), parents, [a, factor](Tape& tape, std::size_t self) {
        tape.accumulate(a.id, scaled(tape.grad(self), factor));
    });
}

Var softmax_rows(Var a, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be > 0");
    const auto& av = a.value();
    require_matrix(av, "softmax_rows");
    const std::size_t rows = av.dim(0), cols = av.dim(1);
    Tensor64 out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, av(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            out(i, j) = std::exp(av(i, j) / temperature - mx / temperature);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < cols; ++j) out(i, j) /= sum;
    }
    // With one column the output is identically 1 and carries no gradient.
    if (cols == 1) return a.tape->constant(std::move(out));
    const Var parents[] = {a};
    return a.tape->push(std::move(out), parents, [a, temperature](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& y = tape.value(self);
        Tensor64 da(y.shape());
        for (std::size_t i = 0; i < y.dim(0); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.dim(1); ++j) dot += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < y.dim(1); ++j) da(i, j) = y(i, j) * (g(i, j) - dot) / temperature;
        }
        tape.accumulate(a.id, da);
    });
}

Var rmsnorm(Var x, const Tensor64& gain, double eps) {
    const auto& xv = x.value();
    require_matrix(xv, "rmsnorm");
    const std::size_t rows = xv.dim(0), d = xv.dim(1);
    if (gain.size() != d) throw DimensionError("rmsnorm gain has " + std::to_string(gain.size()) + " entries, need " + std::to_string(d));
    Tensor64 out({rows, d});
    auto inv = std::make_shared<std::vector<double>>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += xv(i, j) * xv(i, j);
        ms /= static_cast<double>(d);
        (*inv)[i] = 1.0 / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < d; ++j) out(i, j) = xv(i, j) * (*inv)[i] * gain[j];
    }
    const Var parents[] = {x};
    const Tensor64* gp = &gain;
    return x.tape->push(std::move(out), parents, [x, inv, gp](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& xv = tape.value(x.id);
        const std::size_t rows = xv.dim(0), d = xv.dim(1);
        Tensor64 dx({rows, d});
        for (std::size_t i = 0; i < rows; ++i) {
            const double iv = (*inv)[i];
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g(i, j) * (*gp)[j] * xv(i, j);
            const double c = dot * iv * iv * iv / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) dx(i, j) = g(i, j) * (*gp)[j] * iv - xv(i, j) * c;
        }
        tape.accumulate(x.id, dx);
    });
}

Var silu(Var x) {
    const auto& xv = x.value();
    Tensor64 out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
    const Var parents[] = {x};
    return x.tape->push(std::move(out), parents, [x](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& xv = tape.value(x.id);
        Tensor64 dx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-xv[i]));
            dx[i] = g[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
        tape.accumulate(x.id, dx);
    });
}

Var embedding(Var table, std::span<const int> ids) {
    const auto& tv = table.value();
    require_matrix(tv, "embedding");
    const std::size_t d = tv.dim(1);
    if (ids.empty()) throw DimensionError("embedding needs at least one id");
    Tensor64 out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.dim(0)) {
            throw ParameterError("embedding id " + std::to_string(ids[i]) + " out of range");
        }
        std::ranges::copy(tv.slice(static_cast<std::size_t>(ids[i])), out.slice(i).begin());
    }
    std::vector<int> saved(ids.begin(), ids.end());
    const Var parents[] = {table};
    return table.tape->push(std::move(out), parents, [table, saved](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        Tensor64& dt = tape.grad_mut(table.id);
        const std::size_t d = g.dim(1);
        for (std::size_t i = 0; i < saved.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) dt(static_cast<std::size_t>(saved[i]), j) += g(i, j);
    });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
    const auto& lv = logits.value();
    require_matrix(lv, "cross_entropy");
    const std::size_t rows = lv.dim(0), v = lv.dim(1);
    if (targets.size() != rows) throw DimensionError("cross_entropy needs one target per row");
    auto probs = std::make_shared<Tensor64>(lv.shape());
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, lv(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(lv(i, j) - mx);
        for (std::size_t j = 0; j < v; ++j) (*probs)(i, j) = std::exp(lv(i, j) - mx) / sum;
        if (targets[i] < 0) continue;
        if (static_cast<std::size_t>(targets[i]) >= v) {
            throw ParameterError("cross_entropy target " + std::to_string(targets[i]) + " out of range");
        }
        total += -(lv(i, static_cast<std::size_t>(targets[i])) - mx - std::log(sum));
        ++count;
    }
    if (count == 0) throw ParameterError("cross_entropy has no target rows");
    Tensor64 out({1, 1}, total / static_cast<double>(count));
    std::vector<int> saved(targets.begin(), targets.end());
    const Var parents[] = {logits};
    return logits.tape->push(std::move(out), parents, [logits, probs, saved, count](Tape& tape, std::size_t self) {
        const double g = tape.grad(self)[0] / static_cast<double>(count);
        Tensor64 dl(probs->shape());
        for (std::size_t i = 0; i < saved.size(); ++i) {
            if (saved[i] < 0) continue;
            for (std::size_t j = 0; j < dl.dim(1); ++j) dl(i, j) = g * (*probs)(i, j);
            dl(i, static_cast<std::size_t>(saved[i])) -= g;
        }
        tape.accumulate(logits.id, dl);
    });
}

Var topk_gather(Var logits, const std::vector<std::vector<std::uint32_t>>& indices) {
    const auto& lv = logits.value();
    require_matrix(lv, "topk_gather");
    if (indices.size() != lv.dim(0) || indices.empty()) throw DimensionError("topk_gather needs one index row per token");
    const std::size_t k = indices.front().size();
    Tensor64 out({lv.dim(0), k});
    for (std::size_t t = 0; t < indices.size(); ++t) {
        if (indices[t].size() != k) throw DimensionError("topk_gather index rows must have equal length");
        for (std::size_t j = 0; j < k; ++j) out(t, j) = lv(t, indices[t][j]);
    }
    const Var parents[] = {logits};
    return logits.tape->push(std::move(out), parents, [logits, indices](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        Tensor64& dl = tape.grad_mut(logits.id);
        for (std::size_t t = 0; t < indices.size(); ++t)
            for (std::size_t j = 0; j < indices[t].size(); ++j) dl(t, indices[t][j]) += g(t, j);
    });
}

Var routed_lora(Var x, Var w, const std::vector<std::vector<std::uint32_t>>& indices, const Tensor64& a_stack,
                const Tensor64& b_stack, double scale) {
    same_tape(x, w);
    const auto& xv = x.value();
    const auto& wv = w.value();
    const std::size_t tokens = xv.dim(0), d = xv.dim(1);
    if (a_stack.rank() != 3 || a_stack.dim(1) != d || b_stack.rank() != 3 || b_stack.dim(1) != a_stack.dim(2)) {
        throw DimensionError("routed_lora bank does not match input " + shape_to_string(xv.shape()));
    }
    const std::size_t r = a_stack.dim(2), h = b_stack.dim(2);
    const std::size_t k = wv.dim(1);
    if (wv.dim(0) != tokens || indices.size() != tokens) throw DimensionError("routed_lora weight/index rows mismatch");

    // Per (token, slot) hidden x A and adapter output (x A) B, kept for backward.
    auto hid = std::make_shared<std::vector<double>>(tokens * k * r, 0.0);
    auto up = std::make_shared<std::vector<double>>(tokens * k * h, 0.0);
    Tensor64 out({tokens, h});
    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t i = indices[t][j];
            double* hp = &(*hid)[(t * k + j) * r];
            double* up_p = &(*up)[(t * k + j) * h];
            detail::gemm_accumulate<double, double>(xv.raw() + t * d, a_stack.slice(i).data(), hp, 1, d, r);
            detail::gemm_accumulate<double, double>(hp, b_stack.slice(i).data(), up_p, 1, r, h);
            const double c = wv(t, j) * scale;
            for (std::size_t q = 0; q < h; ++q) out(t, q) += c * up_p[q];
        }
    }
    const Var parents[] = {x, w};
    const Tensor64* ap = &a_stack;
    const Tensor64* bp = &b_stack;
    return x.tape->push(std::move(out), parents,
                        [x, w, indices, ap, bp, scale, hid, up, r, h, k, d](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& wv = tape.value(w.id);
        const std::size_t tokens = g.dim(0);
        if (tape.requires_grad(w.id)) {
            Tensor64 dw(wv.shape());
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t j = 0; j < k; ++j) {
                    const double* up_p = &(*up)[(t * k + j) * h];
                    double acc = 0.0;
                    for (std::size_t q = 0; q < h; ++q) acc += g(t, q) * up_p[q];
                    dw(t, j) = scale * acc;
                }
            tape.accumulate(w.id, dw);
        }
        if (tape.requires_grad(x.id)) {
            Tensor64 dx({tokens, d});
            std::vector<double> gb(r);
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t i = indices[t][j];
                    const double* b = bp->slice(i).data();
                    const double* a = ap->slice(i).data();
                    for (std::size_t c = 0; c < r; ++c) {
                        double acc = 0.0;
                        for (std::size_t q = 0; q < h; ++q) acc += g(t, q) * b[c * h + q];
                        gb[c] = acc * wv(t, j) * scale;
                    }
                    for (std::size_t p = 0; p < d; ++p) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < r; ++c) acc += a[p * r + c] * gb[c];
                        dx(t, p) += acc;
                    }
                }
            tape.accumulate(x.id, dx);
        }
    });
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
    same_tape(q, k);
    same_tape(q, v);
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const std::size_t tokens = qv.dim(0), d = qv.dim(1);
    if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) throw DimensionError("attention q/k/v shapes differ");
    if (heads == 0 || d % heads != 0) throw DimensionError("attention width not divisible by heads");
    const std::size_t dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<double>>(heads * tokens * tokens, 0.0);
    Tensor64 out({tokens, d});
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t t = 0; t < tokens; ++t) {
            double* p = &(*probs)[(hd * tokens + t) * tokens];
            double mx = -INFINITY;
            for (std::size_t u = 0; u <= t; ++u) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qv(t, off + c) * kv(u, off + c);
                p[u] = s * inv;
                mx = std::max(mx, p[u]);
            }
            double sum = 0.0;
            for (std::size_t u = 0; u <= t; ++u) {
                p[u] = std::exp(p[u] - mx);
                sum += p[u];
            }
            for (std::size_t u = 0; u <= t; ++u) {
                p[u] /= sum;
                for (std::size_t c = 0; c < dh; ++c) out(t, off + c) += p[u] * vv(u, off + c);
            }
        }
    }
    const Var parents[] = {q, k, v};
    return q.tape->push(std::move(out), parents, [q, k, v, heads, dh, inv, probs](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const auto& qv = tape.value(q.id);
        const auto& kv = tape.value(k.id);
        const auto& vv = tape.value(v.id);
        const std::size_t tokens = g.dim(0), d = g.dim(1);
        Tensor64 dq({tokens, d}), dk({tokens, d}), dvv({tokens, d});
        std::vector<double> dp(tokens);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t t = 0; t < tokens; ++t) {
                const double* p = &(*probs)[(hd * tokens + t) * tokens];
                double dot = 0.0;
                for (std::size_t u = 0; u <= t; ++u) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += g(t, off + c) * vv(u, off + c);
                        dvv(u, off + c) += p[u] * g(t, off + c);
                    }
                    dp[u] = s;
                    dot += p[u] * s;
                }
                for (std::size_t u = 0; u <= t; ++u) {
                    const double ds = p[u] * (dp[u] - dot) * inv;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dq(t, off + c) += ds * kv(u, off + c);
                        dk(u, off + c) += ds * qv(t, off + c);
                    }
                }
            }
        }
        tape.accumulate(q.id, dq);
        tape.accumulate(k.id, dk);
        tape.accumulate(v.id, dvv);
    });
}

Var sum_scalars(std::span<const Var> terms) {
    if (terms.empty()) throw ParameterError("sum_scalars needs at least one term");
    double total = 0.0;
    for (const auto& t : terms) {
        if (t.value().size() != 1) throw DimensionError("sum_scalars expects 1x1 terms");
        total += t.value()[0];
    }
    std::vector<Var> saved(terms.begin(), terms.end());
    return terms.front().tape->push(Tensor64({1, 1}, total), terms, [saved](Tape& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        for (const auto& t : saved) tape.accumulate(t.id, g);
    });
}

} // namespace meteora::autodiff
