#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "mutr/rng.hpp"
#include "mutr/tensor.hpp"

namespace mutr::test {

template <typename T>
TensorT<T> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    TensorT<T> t(shape);
    Rng rng = Rng::derive(seed, 0x7e57);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    double m = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(ad[i]) - static_cast<double>(bd[i])));
    }
    return m;
}

template <typename T>
bool bitwise_equal(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) return false;
    auto ad = a.data();
    auto bd = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (std::memcmp(&ad[i], &bd[i], sizeof(T)) != 0) return false;
    }
    return true;
}

}  // namespace mutr::test
