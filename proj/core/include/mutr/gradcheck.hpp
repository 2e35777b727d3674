#pragma once

// Central finite-difference oracle for the tape backward. The numeric side
// re-evaluates the recorded function with each checked component nudged by
// +/- h; the analytic side is one backward pass. Relative error per component
// is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mutr/ops.hpp"
#include "mutr/rng.hpp"
#include "mutr/tape.hpp"
#include "mutr/tensor.hpp"

namespace mutr {

struct GradcheckOptions {
    double step = 1e-3;
    // Cap on numerically probed components per tensor (0 = all). Sampling is
    // a deterministic function of sample_seed and the tensor index.
    std::int64_t max_components_per_tensor = 0;
    std::uint64_t sample_seed = 17;
};

struct GradcheckReport {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::string worst_location;
    std::int64_t components_checked = 0;
};

// Checks d(loss)/d(t) for every tensor in wrt. `f` must evaluate the same
// deterministic scalar on every call, recording on the tape when one is given.
// The wrt tensors are perturbed in place for the numeric probes and restored.
template <typename T>
GradcheckReport gradcheck_many(const std::function<TensorT<T>(TapeT<T>*)>& f,
                               const std::vector<TensorT<T>>& wrt, const GradcheckOptions& opt = {}) {
    for (const auto& t : wrt) const_cast<TensorT<T>&>(t).set_requires_grad(true);
    for (const auto& t : wrt) const_cast<TensorT<T>&>(t).zero_grad();

    TapeT<T> tape;
    TensorT<T> loss = f(&tape);
    if (loss.numel() != 1) throw ArgumentError("gradcheck: function must return a scalar");
    backward(loss, tape);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(wrt.size());
    for (const auto& t : wrt) {
        auto g = t.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    GradcheckReport report;
    const double h = opt.step;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
        TensorT<T>& t = const_cast<TensorT<T>&>(wrt[ti]);
        const std::int64_t n = t.numel();
        std::vector<std::int64_t> indices;
        if (opt.max_components_per_tensor > 0 && n > opt.max_components_per_tensor) {
            Rng rng = Rng::derive(opt.sample_seed, ti);
            std::vector<std::int64_t> all(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
            rng.shuffle(all);
            indices.assign(all.begin(), all.begin() + opt.max_components_per_tensor);
        } else {
            indices.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) indices[static_cast<std::size_t>(i)] = i;
        }
        T* data = t.data().data();
        for (std::int64_t i : indices) {
            const T saved = data[i];
            data[i] = static_cast<T>(static_cast<double>(saved) + h);
            const double up = static_cast<double>(f(nullptr).item());
            data[i] = static_cast<T>(static_cast<double>(saved) - h);
            const double down = static_cast<double>(f(nullptr).item());
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = static_cast<double>(analytic[ti][static_cast<std::size_t>(i)]);
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            ++report.components_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
                report.worst_location = "tensor " + std::to_string(ti) + " [" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

// Single-input form: returns the max relative error of d(sum-style scalar f)/dx.
template <typename T>
double gradcheck(const std::function<TensorT<T>(const TensorT<T>&, TapeT<T>*)>& f, const TensorT<T>& x,
                 double h) {
    GradcheckOptions opt;
    opt.step = h;
    auto wrapped = [&](TapeT<T>* tape) { return f(x, tape); };
    return gradcheck_many<T>(wrapped, {x}, opt).max_rel_err;
}

// Fixed pseudo-random positive weights used to scalarize a tensor-valued
// function for checking. Plain sums hide gradients that a normalization layer
// makes translation-invariant, so every output gets its own weight.
template <typename T>
TensorT<T> scalarize_weights(const Shape& shape, std::uint64_t seed = 99) {
    TensorT<T> w(shape);
    Rng rng = Rng::derive(seed, 0xabcd);
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(0.25, 1.75));
    return w;
}

template <typename T>
TensorT<T> scalarize(const TensorT<T>& y, const TensorT<T>& weights, TapeT<T>* tape) {
    return sum(mul(y, weights, tape), tape);
}

}  // namespace mutr
