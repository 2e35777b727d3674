#include <doctest.h>

#include <cstring>

#include "helpers.hpp"
#include "mutr/ops.hpp"

using namespace mutr;
using mutr::test::bitwise_equal;
using mutr::test::random_tensor;

TEST_CASE("conv2d: 3x3 ones kernel over 3x3 ones input sums 9 unit products") {
    Tensor x = Tensor::ones({1, 1, 3, 3});
    Tensor w = Tensor::ones({1, 1, 3, 3});
    Tensor y = conv2d(x, w, nullptr, 1, 0, 1);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d: 1x1 unit kernel is the identity") {
    Tensor x = random_tensor<float>({2, 1, 5, 7}, 3);
    Tensor w = Tensor::ones({1, 1, 1, 1});
    Tensor y = conv2d(x, w, nullptr, 1, 0, 1);
    CHECK(bitwise_equal(x, y));
}

TEST_CASE("conv2d: stride-2 padded shape contract") {
    Tensor x = random_tensor<float>({1, 16, 8, 8}, 4);
    Tensor w = random_tensor<float>({32, 16, 3, 3}, 5);
    Tensor y = conv2d(x, w, nullptr, 2, 1, 1);
    CHECK(y.shape() == Shape{1, 32, 4, 4});
}

TEST_CASE("conv2d: depthwise then pointwise equals the composed dense kernel") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        Tensor x = random_tensor<float>({1, 1, 6, 6}, 100 + seed);
        Tensor dw = random_tensor<float>({1, 1, 3, 3}, 200 + seed);
        Tensor dwb = random_tensor<float>({1}, 300 + seed);
        Tensor pw = random_tensor<float>({1, 1, 1, 1}, 400 + seed);
        Tensor pwb = random_tensor<float>({1}, 500 + seed);
        Tensor sep = conv2d(conv2d(x, dw, &dwb, 1, 1, 1), pw, &pwb, 1, 0, 1);

        const float alpha = pw.data()[0];
        Tensor dense_w({1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) dense_w.data()[i] = alpha * dw.data()[i];
        Tensor dense_b({1});
        dense_b.data()[0] = alpha * dwb.data()[0] + pwb.data()[0];
        Tensor dense = conv2d(x, dense_w, &dense_b, 1, 1, 1);
        CHECK(mutr::test::max_abs_diff(sep, dense) < 1e-5);
    }
}

TEST_CASE("conv2d: rejects bad arguments") {
    Tensor x = Tensor::ones({1, 4, 4, 4});
    Tensor w = Tensor::ones({8, 4, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, nullptr, 0, 0, 1), ArgumentError);
    Tensor wbad = Tensor::ones({8, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, wbad, nullptr, 1, 0, 1), DimensionError);
    CHECK_THROWS_AS(conv2d(x, w, nullptr, 1, 0, 3), DimensionError);
    Tensor wbig = Tensor::ones({8, 4, 7, 7});
    CHECK_THROWS_AS(conv2d(x, wbig, nullptr, 1, 0, 1), DimensionError);
}

TEST_CASE("transpose_conv2d: kernel 2 stride 2 doubles the resolution") {
    Tensor x = random_tensor<float>({1, 8, 4, 4}, 6);
    Tensor w = random_tensor<float>({8, 5, 2, 2}, 7);
    Tensor y = transpose_conv2d(x, w, nullptr, 2, 0);
    CHECK(y.shape() == Shape{1, 5, 8, 8});
}

TEST_CASE("transpose_conv2d: single input pixel scatters one product per output") {
    Tensor x = Tensor::ones({1, 1, 1, 1});
    Tensor w = Tensor::ones({1, 1, 2, 2});
    Tensor y = transpose_conv2d(x, w, nullptr, 2, 0);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("matmul: identity, hand product, batched shape rule") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor a = random_tensor<float>({2, 2}, 8);
    CHECK(mutr::test::max_abs_diff(matmul(eye, a), a) < 1e-7);

    Tensor m({2, 2}, {1, 2, 3, 4});
    Tensor v({2, 1}, {5, 6});
    Tensor mv = matmul(m, v);
    CHECK(mv.data()[0] == doctest::Approx(17.0));
    CHECK(mv.data()[1] == doctest::Approx(39.0));

    Tensor ba = random_tensor<float>({4, 8, 16}, 9);
    Tensor bb = random_tensor<float>({4, 16, 32}, 10);
    CHECK(matmul(ba, bb).shape() == Shape{4, 8, 32});

    Tensor bad = random_tensor<float>({3, 2}, 11);
    CHECK_THROWS_AS(matmul(m, bad), DimensionError);
}

TEST_CASE("matmul: batch broadcasting against an unbatched rhs") {
    Tensor a = random_tensor<float>({3, 2, 4}, 12);
    Tensor b = random_tensor<float>({4, 5}, 13);
    Tensor y = matmul(a, b);
    CHECK(y.shape() == Shape{3, 2, 5});
    for (int cell = 0; cell < 3; ++cell) {
        Tensor slice({2, 4});
        std::copy(a.data().begin() + cell * 8, a.data().begin() + (cell + 1) * 8, slice.data().begin());
        Tensor want = matmul(slice, b);
        for (int i = 0; i < 10; ++i) {
            CHECK(y.data()[cell * 10 + i] == doctest::Approx(want.data()[i]));
        }
    }
}

TEST_CASE("softmax: symmetry, overflow stability, analytic ratios") {
    Tensor t({2}, {0, 0});
    Tensor y = softmax(t, 0);
    CHECK(y.data()[0] == doctest::Approx(0.5));
    CHECK(y.data()[1] == doctest::Approx(0.5));

    Tensor big({2}, {1000, 0});
    Tensor yb = softmax(big, 0);
    CHECK(yb.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(yb.data()[1] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(yb.all_finite());

    Tensor logs({3}, {std::log(1.0f), std::log(2.0f), std::log(3.0f)});
    Tensor yl = softmax(logs, 0);
    CHECK(yl.data()[0] == doctest::Approx(1.0 / 6.0));
    CHECK(yl.data()[1] == doctest::Approx(2.0 / 6.0));
    CHECK(yl.data()[2] == doctest::Approx(3.0 / 6.0));
}

TEST_CASE("softmax: rows sum to one and shifts do not change values") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Tensor x = random_tensor<float>({3, 7}, 1000 + seed, -4.0, 4.0);
        Tensor y = softmax(x, 1);
        for (int r = 0; r < 3; ++r) {
            double s = 0.0;
            for (int c = 0; c < 7; ++c) s += y.data()[r * 7 + c];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
        Tensor shifted = x.clone();
        for (auto& v : shifted.data()) v += 13.25f;
        Tensor ys = softmax(shifted, 1);
        CHECK(mutr::test::max_abs_diff(y, ys) < 1e-6);
    }
}

TEST_CASE("layer_norm: constant rows, already-normalized rows, affine collapse") {
    Tensor g1 = Tensor::ones({3});
    Tensor b0 = Tensor::zeros({3});
    Tensor x({1, 3}, {1, 1, 1});
    Tensor y = layer_norm(x, g1, b0, 1e-5f);
    for (float v : y.data()) CHECK(v == doctest::Approx(0.0));

    Tensor g2 = Tensor::ones({2});
    Tensor z2 = Tensor::zeros({2});
    Tensor x2({1, 2}, {-1, 1});
    Tensor y2 = layer_norm(x2, g2, z2, 1e-12f);
    CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-5));

    Tensor g0 = Tensor::zeros({2});
    Tensor b5({2}, {5, 5});
    Tensor x3 = random_tensor<float>({4, 2}, 14);
    Tensor y3 = layer_norm(x3, g0, b5, 1e-5f);
    for (float v : y3.data()) CHECK(v == doctest::Approx(5.0));
}

TEST_CASE("batch_norm2d: eval identity, training centering, running-stat update") {
    const int C = 3;
    Tensor gamma = Tensor::ones({C});
    Tensor beta = Tensor::zeros({C});
    Tensor rm = Tensor::zeros({C});
    Tensor rv = Tensor::ones({C});
    Tensor x = random_tensor<float>({2, C, 4, 4}, 15);

    Tensor y = batch_norm2d(x, gamma, beta, rm, rv, false, 0.1f, 0.0f);
    CHECK(mutr::test::max_abs_diff(x, y) < 1e-6);

    Tensor yt = batch_norm2d(x, gamma, beta, rm, rv, true, 0.1f, 1e-5f);
    for (int c = 0; c < C; ++c) {
        double mean = 0.0;
        for (int n = 0; n < 2; ++n) {
            for (int i = 0; i < 16; ++i) mean += yt.data()[(n * C + c) * 16 + i];
        }
        CHECK(mean / 32.0 == doctest::Approx(0.0).epsilon(1e-5));
    }

    Tensor rm2 = Tensor::zeros({1});
    Tensor rv2 = Tensor::ones({1});
    Tensor x10 = Tensor::full({1, 1, 2, 2}, 10.0f);
    batch_norm2d(x10, Tensor::ones({1}), Tensor::zeros({1}), rm2, rv2, true, 0.1f, 1e-5f);
    CHECK(rm2.data()[0] == doctest::Approx(1.0));

    Tensor tiny = Tensor::ones({1, 1, 1, 1});
    Tensor rm3 = Tensor::zeros({1});
    Tensor rv3 = Tensor::ones({1});
    CHECK_THROWS_AS(
        batch_norm2d(tiny, Tensor::ones({1}), Tensor::zeros({1}), rm3, rv3, true, 0.1f, 1e-5f),
        DegenerateBatchError);
}

TEST_CASE("silu: fixed points and asymptote") {
    Tensor x({3}, {0.0f, 1.0f, 30.0f});
    Tensor y = silu(x);
    CHECK(y.data()[0] == doctest::Approx(0.0));
    CHECK(y.data()[1] == doctest::Approx(0.731059).epsilon(1e-5));
    CHECK(y.data()[2] == doctest::Approx(30.0).epsilon(1e-6));
}

TEST_CASE("elementwise family: add zeros, concat widths, sigmoid at zero") {
    Tensor x = random_tensor<float>({2, 3}, 16);
    CHECK(bitwise_equal(add(x, Tensor::zeros({2, 3})), x));

    Tensor a = random_tensor<float>({1, 8, 4, 4}, 17);
    Tensor b = random_tensor<float>({1, 16, 4, 4}, 18);
    CHECK(concat<float>({a, b}, 1).shape() == Shape{1, 24, 4, 4});
    Tensor c = random_tensor<float>({1, 16, 5, 4}, 19);
    CHECK_THROWS_AS(concat<float>({a, c}, 1), DimensionError);

    Tensor z = Tensor::zeros({1});
    CHECK(sigmoid(z).item() == doctest::Approx(0.5));

    Tensor r({4}, {-3.0f, 0.5f, 5.0f, 9.0f});
    Tensor y6 = relu6(r);
    CHECK(y6.data()[0] == 0.0f);
    CHECK(y6.data()[1] == doctest::Approx(0.5));
    CHECK(y6.data()[2] == doctest::Approx(5.0));
    CHECK(y6.data()[3] == doctest::Approx(6.0));
}

TEST_CASE("resize_nearest: integer upsample repeats pixels") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = resize_nearest(x, 4, 4);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    CHECK(y.data()[0] == 1.0f);
    CHECK(y.data()[3] == 2.0f);
    CHECK(y.data()[15] == 4.0f);
}

TEST_CASE("unfold_patches: shape rule and raster order") {
    Tensor x = random_tensor<float>({1, 64, 4, 4}, 20);
    CHECK(unfold_patches(x, 2, 2).shape() == Shape{4, 4, 64});

    Tensor ar({1, 1, 2, 2}, {0, 1, 2, 3});
    Tensor seq = unfold_patches(ar, 2, 2);
    CHECK(seq.shape() == Shape{4, 1, 1});
    for (int i = 0; i < 4; ++i) CHECK(seq.data()[i] == static_cast<float>(i));

    Tensor odd = random_tensor<float>({1, 4, 5, 4}, 21);
    CHECK_THROWS_AS(unfold_patches(odd, 2, 2), PatchSizeError);
}

TEST_CASE("fold_patches inverts unfold_patches bitwise") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng = Rng::derive(seed, 0xF01D);
        const int ph = 1 + static_cast<int>(rng.uniform_int(3));
        const int pw = 1 + static_cast<int>(rng.uniform_int(3));
        const std::int64_t H = ph * (1 + rng.uniform_int(4));
        const std::int64_t W = pw * (1 + rng.uniform_int(4));
        const std::int64_t N = 1 + rng.uniform_int(2), D = 1 + rng.uniform_int(8);
        Tensor x = random_tensor<float>({N, D, H, W}, 3000 + seed);
        Tensor back = fold_patches(unfold_patches(x, ph, pw), ph, pw, H, W);
        CHECK(bitwise_equal(x, back));
    }
    Tensor seq = random_tensor<float>({4, 4, 8}, 22);
    CHECK_THROWS_AS(fold_patches(seq, 2, 2, 6, 4), DimensionError);
}

TEST_CASE("split/merge heads are exact inverses") {
    Tensor x = random_tensor<float>({2, 5, 12}, 23);
    Tensor back = merge_heads(split_heads(x, 4), 4);
    CHECK(bitwise_equal(x, back));
    CHECK(split_heads(x, 4).shape() == Shape{8, 5, 3});
}

TEST_CASE("bce_dice_loss: perfect-prediction limit and analytic bce at zero logits") {
    Tensor mask({1, 1, 2, 2}, {1, 0, 1, 0});
    Tensor sharp({1, 1, 2, 2}, {40.0f, -40.0f, 40.0f, -40.0f});
    CHECK(bce_dice_loss(sharp, mask).item() == doctest::Approx(0.0).epsilon(1e-5));

    const std::int64_t n = 16;
    Tensor zeros({1, 1, 4, 4});
    Tensor half({1, 1, 4, 4});
    for (int i = 0; i < 8; ++i) half.data()[i] = 1.0f;
    const double bce = std::log(2.0);
    const double dice = (2.0 * (n / 4.0) + 1.0) / (n / 2.0 + n / 2.0 + 1.0);
    const double want = 0.5 * bce + 0.5 * (1.0 - dice);
    CHECK(bce_dice_loss(zeros, half).item() == doctest::Approx(want).epsilon(1e-6));

    Tensor wrong({1, 1, 2, 3});
    CHECK_THROWS_AS(bce_dice_loss(wrong, mask.clone()), DimensionError);
}

TEST_CASE("finite forward on finite inputs across the op set") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor x = random_tensor<float>({2, 4, 8, 8}, 4000 + seed, -3.0, 3.0);
        Tensor w = random_tensor<float>({6, 4, 3, 3}, 4100 + seed);
        CHECK(conv2d(x, w, nullptr, 1, 1, 1).all_finite());
        CHECK(silu(x).all_finite());
        CHECK(sigmoid(x).all_finite());
        CHECK(softmax(x, 1).all_finite());
    }
}
