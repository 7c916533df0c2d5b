// SPDX-License-Identifier: Apache-2.0
//
// Frozen LoRA adapters and their contiguous (n, d, r) / (n, r, h) stacks.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "meteora/tensor.hpp"

namespace meteora {

template <typename T>
struct LoraAdapter {
    BasicTensor<T> a;  // d x r
    BasicTensor<T> b;  // r x h
    double alpha = 16.0;
    std::string name;

    std::size_t in_dim() const { return a.dim(0); }
    std::size_t rank() const { return a.dim(1); }
    std::size_t out_dim() const { return b.dim(1); }
    /// Standard LoRA scaling alpha / r.
    double default_scale() const { return alpha / static_cast<double>(rank()); }

    void validate() const;
};

/// n adapters sharing (d, r, h, alpha), stored as two contiguous stacks.
/// Immutable after construction.
template <typename T>
class LoraBank {
public:
    LoraBank() = default;

    /// Stack adapters in input order. Throws ConfigurationError naming the first
    /// adapter whose shape or alpha differs from adapter 0.
    static LoraBank stack(std::span<const LoraAdapter<T>> adapters);

    /// Adopt pre-stacked tensors (used by the artifact loader).
    LoraBank(BasicTensor<T> a_stack, BasicTensor<T> b_stack, std::vector<std::string> names, double alpha);

    std::size_t size() const noexcept { return names_.size(); }
    std::size_t in_dim() const { return a_stack_.dim(1); }
    std::size_t rank() const { return a_stack_.dim(2); }
    std::size_t out_dim() const { return b_stack_.dim(2); }
    double alpha() const noexcept { return alpha_; }
    double default_scale() const { return alpha_ / static_cast<double>(rank()); }

    const BasicTensor<T>& a_stack() const noexcept { return a_stack_; }
    const BasicTensor<T>& b_stack() const noexcept { return b_stack_; }
    const std::vector<std::string>& names() const noexcept { return names_; }

    /// Row-major d x r block of adapter i, pointing into the stack.
    std::span<const T> a_slice(std::size_t i) const { return a_stack_.slice(i); }
    /// Row-major r x h block of adapter i, pointing into the stack.
    std::span<const T> b_slice(std::size_t i) const { return b_stack_.slice(i); }

    /// Copy of adapter i as a standalone LoraAdapter.
    LoraAdapter<T> adapter(std::size_t i) const;

    bool operator==(const LoraBank&) const = default;

private:
    BasicTensor<T> a_stack_;
    BasicTensor<T> b_stack_;
    std::vector<std::string> names_;
    double alpha_ = 16.0;
};

template <typename T>
LoraBank<T> stack_bank(std::span<const LoraAdapter<T>> adapters) {
    return LoraBank<T>::stack(adapters);
}

/// o = x W_base + scale * ((x A) B) for a single token x of length d.
template <typename T>
BasicTensor<T> lora_forward(const BasicTensor<T>& x, const BasicTensor<T>& base_weight,
                            const LoraAdapter<T>& adapter, double scale);

/// Same, with scale = alpha / r.
template <typename T>
BasicTensor<T> lora_forward(const BasicTensor<T>& x, const BasicTensor<T>& base_weight,
                            const LoraAdapter<T>& adapter) {
    return lora_forward(x, base_weight, adapter, adapter.default_scale());
}

} // namespace meteora
