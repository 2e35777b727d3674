#include <doctest.h>

#include "helpers.hpp"
#include "mutr/gradcheck.hpp"
#include "mutr/ops.hpp"

using namespace mutr;
using mutr::test::random_tensor;

TEST_CASE("backward: d(sum x)/dx is ones, d(sum x*x)/dx is 2x") {
    Tensor x = random_tensor<float>({3, 4}, 1);
    x.set_requires_grad(true);
    {
        Tape tape;
        Tensor loss = sum(x, &tape);
        backward(loss, tape);
        for (float g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
    x.zero_grad();
    {
        Tape tape;
        Tensor loss = sum(mul(x, x, &tape), &tape);
        backward(loss, tape);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("backward: rejects non-scalar loss, zero-fills unreached parameters") {
    Tensor x = random_tensor<float>({2, 2}, 2);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = mul(x, x, &tape);
    CHECK_THROWS_AS(backward(y, tape), ArgumentError);

    // a second tensor participates in the tape but not in the loss
    Tensor z = random_tensor<float>({2, 2}, 3);
    z.set_requires_grad(true);
    Tape tape2;
    Tensor a = sum(x, &tape2);
    Tensor unused = mul(z, z, &tape2);
    backward(a, tape2);
    CHECK(z.has_grad());
    for (float g : z.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward: gradients accumulate across uses of one tensor") {
    Tensor x = random_tensor<float>({4}, 4);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = add(x, x, &tape);
    backward(sum(y, &tape), tape);
    for (float g : x.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("gradcheck: identity is exact, softmax under 1e-4 at h=1e-3") {
    Tensor x = random_tensor<float>({6}, 5);
    const double id_err = gradcheck<float>(
        [](const Tensor& t, Tape* tape) { return sum(t, tape); }, x, 1e-3);
    CHECK(id_err < 1e-4);  // float storage leaves finite-difference rounding noise

    TensorT<double> xd64 = random_tensor<double>({6}, 5);
    const double id_err64 = gradcheck<double>(
        [](const TensorT<double>& t, TapeT<double>* tape) { return sum(t, tape); }, xd64, 1e-3);
    CHECK(id_err64 < 1e-9);

    TensorT<double> xd = random_tensor<double>({5, 6}, 6, -2.0, 2.0);
    TensorT<double> w = scalarize_weights<double>({5, 6});
    const double sm_err = gradcheck<double>(
        [&](const TensorT<double>& t, TapeT<double>* tape) {
            return scalarize(softmax(t, 1, tape), w, tape);
        },
        xd, 1e-3);
    CHECK(sm_err < 1e-4);
}

// Jacobian-vector products against central differences on randomized small
// shapes for every differentiable op, 25 seeds. The oracle runs the double
// instantiation of the same templated kernels; float spot checks follow.
TEST_CASE("gradcheck: every op matches finite differences on random shapes") {
    using D = double;
    GradcheckOptions opt;
    opt.step = 1e-3;
    const double tol = 1e-3;

    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng = Rng::derive(seed, 0x9a1d);
        CAPTURE(seed);

        {  // conv2d with random stride/padding/groups
            const int groups = 1 + static_cast<int>(rng.uniform_int(2));
            const std::int64_t cin = 2 * groups, cout = 2 * groups;
            const int stride = 1 + static_cast<int>(rng.uniform_int(2));
            const int pad = static_cast<int>(rng.uniform_int(2));
            TensorT<D> x = random_tensor<D>({2, cin, 5, 5}, 10 + seed);
            TensorT<D> w = random_tensor<D>({cout, cin / groups, 3, 3}, 20 + seed);
            TensorT<D> b = random_tensor<D>({cout}, 30 + seed);
            TensorT<D> sw;
            auto f = [&](TapeT<D>* tape) {
                TensorT<D> y = conv2d(x, w, &b, stride, pad, groups, tape);
                if (!sw.defined()) sw = scalarize_weights<D>(y.shape(), seed);
                return scalarize(y, sw, tape);
            };
            const auto rep = gradcheck_many<D>(f, {x, w, b}, opt);
            CAPTURE(rep.worst_location);
            CHECK(rep.max_rel_err < tol);
        }
        {  // transpose_conv2d
            TensorT<D> x = random_tensor<D>({1, 3, 4, 4}, 40 + seed);
            TensorT<D> w = random_tensor<D>({3, 2, 2, 2}, 50 + seed);
            TensorT<D> b = random_tensor<D>({2}, 60 + seed);
            TensorT<D> sw;
            auto f = [&](TapeT<D>* tape) {
                TensorT<D> y = transpose_conv2d(x, w, &b, 2, 0, tape);
                if (!sw.defined()) sw = scalarize_weights<D>(y.shape(), seed);
                return scalarize(y, sw, tape);
            };
            const auto rep = gradcheck_many<D>(f, {x, w, b}, opt);
            CHECK(rep.max_rel_err < tol);
        }
        {  // matmul with broadcast
            TensorT<D> a = random_tensor<D>({3, 2, 4}, 70 + seed);
            TensorT<D> b = random_tensor<D>({4, 3}, 80 + seed);
            TensorT<D> sw;
            auto f = [&](TapeT<D>* tape) {
                TensorT<D> y = matmul(a, b, tape);
                if (!sw.defined()) sw = scalarize_weights<D>(y.shape(), seed);
                return scalarize(y, sw, tape);
            };
            CHECK(gradcheck_many<D>(f, {a, b}, opt).max_rel_err < tol);
        }
        {  // softmax / layer_norm / batch_norm chains
            TensorT<D> x = random_tensor<D>({2, 3, 4, 4}, 90 + seed, -2.0, 2.0);
            TensorT<D> gamma = random_tensor<D>({3}, 91 + seed, 0.5, 1.5);
            TensorT<D> beta = random_tensor<D>({3}, 92 + seed);
            TensorT<D> rm(Shape{3});
            TensorT<D> rv = TensorT<D>::ones({3});
            TensorT<D> sw;
            auto f = [&](TapeT<D>* tape) {
                TensorT<D> y = batch_norm2d(x, gamma, beta, rm, rv, true, D(0.1), D(1e-5), tape);
                y = silu(y, tape);
                if (!sw.defined()) sw = scalarize_weights<D>(y.shape(), seed);
                return scalarize(y, sw, tape);
            };
            CHECK(gradcheck_many<D>(f, {x, gamma, beta}, opt).max_rel_err < tol);

            TensorT<D> s = random_tensor<D>({2, 5, 6}, 93 + seed, -2.0, 2.0);
            TensorT<D> lgamma = random_tensor<D>({6}, 94 + seed, 0.5, 1.5);
            TensorT<D> lbeta = random_tensor<D>({6}, 95 + seed);
            TensorT<D> sw2;
            auto g = [&](TapeT<D>* tape) {
                TensorT<D> y = layer_norm(s, lgamma, lbeta, D(1e-5), tape);
                y = softmax(y, 2, tape);
                if (!sw2.defined()) sw2 = scalarize_weights<D>(y.shape(), seed);
                return scalarize(y, sw2, tape);
            };
            CHECK(gradcheck_many<D>(g, {s, lgamma, lbeta}, opt).max_rel_err < tol);
        }
        {  // rearrangements, elementwise, linear, loss
            TensorT<D> x = random_tensor<D>({1, 3, 4, 4}, 96 + seed);
            TensorT<D> w = random_tensor<D>({3, 7}, 97 + seed);
            TensorT<D> b = random_tensor<D>({7}, 98 + seed);
            TensorT<D> sw;
            auto f = [&](TapeT<D>* tape) {
                TensorT<D> seq = unfold_patches(x, 2, 2, tape);
                seq = linear(seq, w, &b, tape);
                seq = silu(seq, tape);
                TensorT<D> heads = split_heads(seq, 1, tape);
                TensorT<D> tr = transpose_last2(heads, tape);
                if (!sw.defined()) sw = scalarize_weights<D>(tr.shape(), seed);
                return scalarize(tr, sw, tape);
            };
            CHECK(gradcheck_many<D>(f, {x, w, b}, opt).max_rel_err < tol);

            TensorT<D> logits = random_tensor<D>({1, 1, 4, 4}, 99 + seed, -2.0, 2.0);
            TensorT<D> mask(Shape{1, 1, 4, 4});
            Rng mrng = Rng::derive(seed, 0x3a5c);
            for (auto& v : mask.data()) v = mrng.uniform() < 0.5 ? D(0) : D(1);
            auto h = [&](TapeT<D>* tape) { return bce_dice_loss(logits, mask, tape); };
            CHECK(gradcheck_many<D>(h, {logits}, opt).max_rel_err < tol);
        }
        {  // concat, add, mul, scale, sigmoid, relu6, resize
            TensorT<D> a = random_tensor<D>({1, 2, 4, 4}, 200 + seed, -2.0, 2.0);
            TensorT<D> b = random_tensor<D>({1, 3, 4, 4}, 201 + seed, -2.0, 2.0);
            TensorT<D> sw;
            auto f = [&](TapeT<D>* tape) {
                TensorT<D> y = concat<D>({a, b}, 1, tape);
                y = scale(y, D(1.37), tape);
                y = sigmoid(y, tape);
                TensorT<D> z = mul(y, y, tape);
                z = add(z, y, tape);
                z = resize_nearest(z, 8, 8, tape);
                if (!sw.defined()) sw = scalarize_weights<D>(z.shape(), seed);
                return scalarize(z, sw, tape);
            };
            CHECK(gradcheck_many<D>(f, {a, b}, opt).max_rel_err < tol);
        }
    }
}

TEST_CASE("gradcheck: float pipeline spot checks under loose tolerance") {
    GradcheckOptions opt;
    opt.step = 1e-2;
    {
        Tensor x = random_tensor<float>({1, 2, 5, 5}, 7);
        Tensor w = random_tensor<float>({3, 2, 3, 3}, 8);
        Tensor sw;
        auto f = [&](Tape* tape) {
            Tensor y = conv2d(x, w, nullptr, 1, 1, 1, tape);
            if (!sw.defined()) sw = scalarize_weights<float>(y.shape(), 1);
            return scalarize(y, sw, tape);
        };
        CHECK(gradcheck_many<float>(f, {x, w}, opt).max_rel_err < 2e-2);
    }
    {
        Tensor x = random_tensor<float>({40}, 9, -2.0, 2.0);
        auto f = [&](Tape* tape) { return sum(silu(x, tape), tape); };
        CHECK(gradcheck_many<float>(f, {x}, opt).max_rel_err < 2e-2);
    }
}
