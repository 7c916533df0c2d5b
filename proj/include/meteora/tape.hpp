// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode tape over f64 matrices. Nodes are appended in
// evaluation order; backward walks them in reverse. Only nodes reachable from
// a parameter carry gradients, so frozen weights never receive any.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "meteora/tensor.hpp"

namespace meteora::autodiff {

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor64& value() const;
    const Tensor64& grad() const;
    std::size_t rows() const { return value().dim(0); }
    std::size_t cols() const { return value().dim(1); }
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Owned constant (no gradient).
    Var constant(Tensor64 value);
    /// Borrowed constant; `value` must outlive the tape.
    Var constant_ref(const Tensor64& value);
    /// Borrowed trainable leaf; `value` must outlive the tape.
    Var param_ref(const Tensor64& value);

    const Tensor64& value(std::size_t id) const;
    const Tensor64& grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Seed d(loss)/d(loss) = 1 and propagate. loss must be a 1x1 node of this tape.
    void backward(Var loss);

    /// Append a computed node. requires_grad is inherited from the parents.
    Var push(Tensor64 value, std::span<const Var> parents, BackwardFn fn);

    /// grad[id] += g, if that node tracks gradients.
    void accumulate(std::size_t id, const Tensor64& g);
    Tensor64& grad_mut(std::size_t id);

private:
    struct Node {
        Tensor64 owned;
        const Tensor64* ref = nullptr;
        Tensor64 grad;
        bool requires_grad = false;
        bool is_leaf = true;
        BackwardFn backward;
    };

    void check(Var v) const;

    std::vector<Node> nodes_;
};

// ---- recorded operations (all operands are 2-D) ----

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// Row-wise softmax of a / temperature. A single column is identically 1.
Var softmax_rows(Var a, double temperature = 1.0);
/// y = x / sqrt(mean(x^2) + eps) * gain, per row; gain is a fixed (1 x d) tensor.
Var rmsnorm(Var x, const Tensor64& gain, double eps = 1e-6);
Var silu(Var x);
/// Rows of `table` selected by ids.
Var embedding(Var table, std::span<const int> ids);
/// Mean over rows with target >= 0 of -log softmax(logits)[target]. Returns 1x1.
Var cross_entropy(Var logits, std::span<const int> targets);
/// out[t][j] = logits[t][indices[t][j]]; the selection is a constant (straight-through).
Var topk_gather(Var logits, const std::vector<std::vector<std::uint32_t>>& indices);
/// out[t] = sum_j w[t][j] * scale * (x[t] A_{I[t][j]}) B_{I[t][j]} over a frozen bank.
/// The stacks are borrowed and must outlive the tape.
Var routed_lora(Var x, Var w, const std::vector<std::vector<std::uint32_t>>& indices, const Tensor64& a_stack,
                const Tensor64& b_stack, double scale);
/// Multi-head causal self-attention with scaled dot products.
Var causal_attention(Var q, Var k, Var v, std::size_t heads);
/// Sum of 1x1 nodes.
Var sum_scalars(std::span<const Var> terms);

} // namespace meteora::autodiff
