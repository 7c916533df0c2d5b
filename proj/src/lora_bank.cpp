// SPDX-License-Identifier: Apache-2.0
#include "meteora/lora_bank.hpp"

#include <algorithm>

namespace meteora {

template <typename T>
void LoraAdapter<T>::validate() const {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("adapter '" + name + "' needs matrix A and B, got " + shape_to_string(a.shape()) +
                             " and " + shape_to_string(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("adapter '" + name + "' rank mismatch: A " + shape_to_string(a.shape()) + ", B " +
                             shape_to_string(b.shape()));
    }
    if (!(alpha > 0.0)) throw ConfigurationError("adapter '" + name + "' alpha must be > 0");
}

template <typename T>
LoraBank<T> LoraBank<T>::stack(std::span<const LoraAdapter<T>> adapters) {
    if (adapters.empty()) throw ConfigurationError("cannot stack an empty adapter list");
    const auto& first = adapters.front();
    first.validate();
    const std::size_t d = first.in_dim(), r = first.rank(), h = first.out_dim();
    for (std::size_t i = 1; i < adapters.size(); ++i) {
        const auto& ad = adapters[i];
        ad.validate();
        if (ad.in_dim() != d || ad.rank() != r || ad.out_dim() != h) {
            throw ConfigurationError("adapter " + std::to_string(i) + " ('" + ad.name + "') has shape (d=" +
                                     std::to_string(ad.in_dim()) + ", r=" + std::to_string(ad.rank()) +
                                     ", h=" + std::to_string(ad.out_dim()) + "), bank expects (d=" +
                                     std::to_string(d) + ", r=" + std::to_string(r) + ", h=" + std::to_string(h) +
                                     ")");
        }
        if (ad.alpha != first.alpha) {
            throw ConfigurationError("adapter " + std::to_string(i) + " ('" + ad.name + "') has alpha " +
                                     std::to_string(ad.alpha) + ", bank expects " + std::to_string(first.alpha));
        }
    }
    const std::size_t n = adapters.size();
    BasicTensor<T> as({n, d, r});
    BasicTensor<T> bs({n, r, h});
    std::vector<std::string> names;
    names.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::ranges::copy(adapters[i].a.data(), as.slice(i).begin());
        std::ranges::copy(adapters[i].b.data(), bs.slice(i).begin());
        names.push_back(adapters[i].name);
    }
    return LoraBank(std::move(as), std::move(bs), std::move(names), first.alpha);
}

template <typename T>
LoraBank<T>::LoraBank(BasicTensor<T> a_stack, BasicTensor<T> b_stack, std::vector<std::string> names, double alpha)
    : a_stack_(std::move(a_stack)), b_stack_(std::move(b_stack)), names_(std::move(names)), alpha_(alpha) {
    if (a_stack_.rank() != 3 || b_stack_.rank() != 3 || a_stack_.dim(0) != b_stack_.dim(0) ||
        a_stack_.dim(2) != b_stack_.dim(1)) {
        throw DimensionError("bank stacks are inconsistent: A " + shape_to_string(a_stack_.shape()) + ", B " +
                             shape_to_string(b_stack_.shape()));
    }
    if (names_.size() != a_stack_.dim(0)) {
        throw ConfigurationError("bank has " + std::to_string(a_stack_.dim(0)) + " adapters but " +
                                 std::to_string(names_.size()) + " names");
    }
    if (!(alpha_ > 0.0)) throw ConfigurationError("bank alpha must be > 0");
}

template <typename T>
LoraAdapter<T> LoraBank<T>::adapter(std::size_t i) const {
    if (i >= size()) throw ParameterError("adapter index " + std::to_string(i) + " out of range");
    const auto as = a_slice(i);
    const auto bs = b_slice(i);
    return LoraAdapter<T>{BasicTensor<T>({in_dim(), rank()}, std::vector<T>(as.begin(), as.end())),
                          BasicTensor<T>({rank(), out_dim()}, std::vector<T>(bs.begin(), bs.end())), alpha_,
                          names_[i]};
}

template <typename T>
BasicTensor<T> lora_forward(const BasicTensor<T>& x, const BasicTensor<T>& base_weight,
                            const LoraAdapter<T>& adapter, double scale) {
    adapter.validate();
    if (x.rank() != 1 || base_weight.rank() != 2 || x.dim(0) != base_weight.dim(0) ||
        x.dim(0) != adapter.in_dim() || base_weight.dim(1) != adapter.out_dim()) {
        throw DimensionError("lora_forward shape mismatch: x " + shape_to_string(x.shape()) + ", W " +
                             shape_to_string(base_weight.shape()) + ", A " + shape_to_string(adapter.a.shape()) +
                             ", B " + shape_to_string(adapter.b.shape()));
    }
    // Reference path: accumulate in f64 and round once.
    const std::size_t d = x.dim(0), r = adapter.rank(), h = base_weight.dim(1);
    std::vector<double> xa(r, 0.0), acc(h, 0.0);
    for (std::size_t t = 0; t < d; ++t) {
        const double xt = x[t];
        for (std::size_t q = 0; q < r; ++q) xa[q] += xt * double(adapter.a(t, q));
        for (std::size_t j = 0; j < h; ++j) acc[j] += xt * double(base_weight(t, j));
    }
    for (std::size_t q = 0; q < r; ++q)
        for (std::size_t j = 0; j < h; ++j) acc[j] += scale * xa[q] * double(adapter.b(q, j));
    BasicTensor<T> out({h});
    for (std::size_t j = 0; j < h; ++j) out[j] = static_cast<T>(acc[j]);
    return out;
}

template struct LoraAdapter<float>;
template struct LoraAdapter<double>;
template class LoraBank<float>;
template class LoraBank<double>;
template Tensor lora_forward(const Tensor&, const Tensor&, const LoraAdapter<float>&, double);
template Tensor64 lora_forward(const Tensor64&, const Tensor64&, const LoraAdapter<double>&, double);

} // namespace meteora
