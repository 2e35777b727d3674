#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mutr/errors.hpp"

namespace mutr {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major buffer with shape metadata and an optional gradient slot.
// TensorT is a cheap handle: copies share the underlying storage. The float
// instantiation is the library's public value type; the double instantiation
// backs the finite-difference oracle.
template <typename T>
struct TensorImplT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
};

template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape, bool requires_grad = false)
        : impl_(std::make_shared<TensorImplT<T>>()) {
        validate_shape(shape);
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<std::size_t>(numel_of(impl_->shape)), T(0));
        impl_->requires_grad = requires_grad;
    }

    TensorT(Shape shape, std::vector<T> values, bool requires_grad = false)
        : impl_(std::make_shared<TensorImplT<T>>()) {
        validate_shape(shape);
        if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        TensorT t(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = value;
        return t;
    }

    static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }

    static TensorT scalar(T value) { return TensorT(Shape{1}, std::vector<T>{value}); }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }

    T item() const {
        if (numel() != 1) {
            throw ArgumentError("item() requires a single-element tensor, got shape " + shape_str(shape()));
        }
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }

    // Gradient buffer, zero-allocated on first access.
    std::span<T> grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }
    std::span<const T> grad() const { return impl_->grad; }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    // Deep copy of data (grad not copied).
    TensorT clone() const {
        TensorT t(impl_->shape, impl_->data, impl_->requires_grad);
        return t;
    }

    bool all_finite() const {
        for (T v : impl_->data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    // Identity of the underlying storage; used by the tape.
    TensorImplT<T>* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImplT<T>>& impl_ptr() const { return impl_; }

    bool same_storage(const TensorT& other) const { return impl_ == other.impl_; }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
        for (auto d : shape) {
            if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }

    std::shared_ptr<TensorImplT<T>> impl_;
};

using Tensor = TensorT<float>;

}  // namespace mutr
