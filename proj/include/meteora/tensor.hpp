// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the handful of operations the rest of the
// engine is built on. Everything here is a pure function over values.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "meteora/error.hpp"

namespace meteora {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

template <typename T>
class BasicTensor {
    static_assert(std::is_floating_point_v<T>);

public:
    using value_type = T;

    /// A default-constructed tensor is an empty placeholder (rank 0, no data).
    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(shape_numel(shape_), fill);
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_to_string(shape_));
        }
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T{0}); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T{1}); }

    static BasicTensor identity(std::size_t n) {
        BasicTensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
        return t;
    }

    static BasicTensor vector(std::initializer_list<T> values) {
        return BasicTensor({values.size()}, std::vector<T>(values));
    }

    static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<T> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return BasicTensor({r, c}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* raw() noexcept { return data_.data(); }
    const T* raw() const noexcept { return data_.data(); }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Contiguous view of the trailing dimensions at leading index i.
    std::span<T> slice(std::size_t i) {
        const std::size_t stride = size() / shape_.at(0);
        return std::span<T>(data_).subspan(i * stride, stride);
    }
    std::span<const T> slice(std::size_t i) const {
        const std::size_t stride = size() / shape_.at(0);
        return std::span<const T>(data_).subspan(i * stride, stride);
    }

    BasicTensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size()) {
            throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool operator==(const BasicTensor& other) const = default;

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dims must be >= 1, got " + shape_to_string(shape));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

/// c[p x s] += a[p x q] * b[q x s], all row-major. i-k-j order so the inner
/// loop streams rows of b and c.
template <typename T, typename Acc = T>
inline void gemm_accumulate(const T* a, const T* b, Acc* c, std::size_t p, std::size_t q, std::size_t s) {
    for (std::size_t i = 0; i < p; ++i) {
        Acc* crow = c + i * s;
        const T* arow = a + i * q;
        for (std::size_t t = 0; t < q; ++t) {
            const Acc av = static_cast<Acc>(arow[t]);
            const T* brow = b + t * s;
            for (std::size_t j = 0; j < s; ++j) crow[j] += av * static_cast<Acc>(brow[j]);
        }
    }
}

} // namespace detail

enum class Accumulate { native, f64 };

/// c = a x b for 2-D tensors.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, Accumulate acc = Accumulate::native) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()));
    }
    const std::size_t p = a.dim(0), q = a.dim(1), s = b.dim(1);
    BasicTensor<T> c({p, s});
    if (acc == Accumulate::f64 && !std::is_same_v<T, double>) {
        std::vector<double> wide(p * s, 0.0);
        detail::gemm_accumulate<T, double>(a.raw(), b.raw(), wide.data(), p, q, s);
        std::transform(wide.begin(), wide.end(), c.raw(), [](double v) { return static_cast<T>(v); });
    } else {
        detail::gemm_accumulate<T, T>(a.raw(), b.raw(), c.raw(), p, q, s);
    }
    return c;
}

/// Row vector times matrix: x[q] x b[q x s] -> [s].
template <typename T>
BasicTensor<T> vecmat(const BasicTensor<T>& x, const BasicTensor<T>& b) {
    if (x.rank() != 1 || b.rank() != 2 || x.dim(0) != b.dim(0)) {
        throw DimensionError("vecmat shape mismatch: " + shape_to_string(x.shape()) + " x " +
                             shape_to_string(b.shape()));
    }
    BasicTensor<T> out({b.dim(1)});
    detail::gemm_accumulate<T, T>(x.raw(), b.raw(), out.raw(), 1, x.dim(0), b.dim(1));
    return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_to_string(a.shape()));
    BasicTensor<T> out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T, typename F>
BasicTensor<T> zip_with(const BasicTensor<T>& a, const BasicTensor<T>& b, F&& f, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return zip_with(a, b, std::plus<T>{}, "add");
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return zip_with(a, b, std::minus<T>{}, "sub");
}

template <typename T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return zip_with(a, b, std::multiplies<T>{}, "hadamard");
}

template <typename T>
BasicTensor<T> scaled(BasicTensor<T> a, T factor) {
    for (auto& v : a.data()) v *= factor;
    return a;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

/// Temperature softmax over a 1-D tensor, stabilized by max subtraction.
/// Computed in double and rounded once to T.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& v, double temperature = 1.0) {
    if (!(temperature > 0.0)) {
        throw ParameterError("softmax temperature must be > 0, got " + std::to_string(temperature));
    }
    if (v.rank() != 1) throw DimensionError("softmax expects a vector, got " + shape_to_string(v.shape()));
    double vmax = -INFINITY;
    for (auto x : v.data()) {
        if (std::isnan(x)) throw NumericError("softmax input contains NaN");
        vmax = std::max(vmax, static_cast<double>(x));
    }
    std::vector<double> e(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        e[i] = std::exp(static_cast<double>(v[i]) / temperature - vmax / temperature);
        sum += e[i];
    }
    BasicTensor<T> out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
    return out;
}

/// Indices of the k largest entries, descending by value, ties to the lowest index.
template <typename T>
std::vector<std::size_t> topk(std::span<const T> v, std::size_t k) {
    if (k < 1 || k > v.size()) {
        throw ParameterError("topk requires 1 <= k <= n, got k=" + std::to_string(k) +
                             " n=" + std::to_string(v.size()));
    }
    for (auto x : v) {
        if (std::isnan(x)) throw NumericError("topk input contains NaN");
    }
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
}

template <typename T>
std::vector<std::size_t> topk(const BasicTensor<T>& v, std::size_t k) {
    return topk<T>(v.data(), k);
}

template <typename T>
std::size_t argmax(std::span<const T> v) {
    return topk<T>(v, 1).front();
}

} // namespace meteora
