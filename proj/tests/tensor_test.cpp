#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rpmnet/adam.hpp"
#include "rpmnet/grad_check.hpp"
#include "rpmnet/ops.hpp"
#include "test_util.hpp"

using namespace rpmnet;
using testutil::all_close;
using testutil::bit_equal;
using testutil::rand_tensor;

namespace {

Tensor<double> ones_tensor(Shape s) { return Tensor<double>::full(std::move(s), 1.0); }

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

TEST_CASE("conv2d stem geometry") {
    Tensor<float> x({9, 1, 160, 160});
    Rng rng = make_rng(1);
    Tensor<float> w = rand_tensor<float>({64, 1, 7, 7}, rng);
    Tensor<float> b({64});
    Tensor<float> y = conv2d(x, w, b, 2, 3);
    CHECK(y.shape() == Shape{9, 64, 80, 80});
}

TEST_CASE("conv2d zero input and bias gives zero output") {
    Rng rng = make_rng(2);
    Tensor<double> x({2, 3, 6, 6});
    Tensor<double> w = rand_tensor<double>({4, 3, 3, 3}, rng);
    Tensor<double> b({4});
    Tensor<double> y = conv2d(x, w, b, 1, 1);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d ones kernel sums the window") {
    std::vector<double> vals(9);
    for (int i = 0; i < 9; ++i) vals[static_cast<size_t>(i)] = i + 1;
    Tensor<double> x({1, 1, 3, 3}, vals);
    Tensor<double> w = ones_tensor({1, 1, 3, 3});
    Tensor<double> b({1});
    Tensor<double> y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(45.0));
}

TEST_CASE("conv2d rejects channel mismatch with a shape diagnostic") {
    Tensor<double> x({1, 3, 5, 5});
    Tensor<double> w({2, 4, 3, 3});
    Tensor<double> b({2});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ShapeError);
    try {
        conv2d(x, w, b, 1, 1);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("channels") != std::string::npos);
    }
}

TEST_CASE("conv2d gradient matches finite differences") {
    Rng rng = make_rng(3);
    Tensor<double> x = rand_tensor<double>({2, 2, 5, 5}, rng);
    Tensor<double> w = rand_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> b = rand_tensor<double>({3}, rng);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        auto y = conv2d(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]), 2, 1);
        return sum_all(relu(y));  // relu keeps cancellation from hiding errors
    };
    CHECK(grad_check(f, {x, w, b}) <= 1e-5);
}

// ---------------------------------------------------------------------------
// conv3d

TEST_CASE("conv3d preserves contrast-module geometry") {
    Rng rng = make_rng(4);
    Tensor<float> x({1, 8, 9, 10, 10});
    Tensor<float> w = rand_tensor<float>({8, 8, 3, 3, 3}, rng);
    Tensor<float> b({8});
    Tensor<float> y = conv3d(x, w, b, 1, 1);
    CHECK(y.shape() == Shape{1, 8, 9, 10, 10});
}

TEST_CASE("conv3d zero weights zero bias gives zeros") {
    Rng rng = make_rng(5);
    Tensor<double> x = rand_tensor<double>({1, 2, 3, 4, 4}, rng);
    Tensor<double> w({2, 2, 3, 3, 3});
    Tensor<double> b({2});
    Tensor<double> y = conv3d(x, w, b, 1, 1);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("conv3d scalar affine") {
    Tensor<double> x({1, 1, 1, 1, 1}, {5.0});
    Tensor<double> w({1, 1, 1, 1, 1}, {2.0});
    Tensor<double> b({1}, {1.0});
    Tensor<double> y = conv3d(x, w, b, 1, 0);
    CHECK(y.item() == doctest::Approx(11.0));
}

TEST_CASE("conv3d gradient matches finite differences") {
    Rng rng = make_rng(6);
    Tensor<double> x = rand_tensor<double>({1, 2, 3, 4, 4}, rng);
    Tensor<double> w = rand_tensor<double>({2, 2, 2, 3, 3}, rng);
    Tensor<double> b = rand_tensor<double>({2}, rng);
    auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum_all(conv3d(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]), 1, 1));
    };
    CHECK(grad_check(f, {x, w, b}) <= 1e-4);
}

// ---------------------------------------------------------------------------
// batchnorm

TEST_CASE("batchnorm train on per-channel constants returns beta") {
    Tensor<double> x({2, 3, 2, 2});
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i) x[(b * 3 + c) * 4 + i] = 2.0 + c;
    Tensor<double> gamma = ones_tensor({3});
    Tensor<double> beta({3}, {0.5, -1.0, 3.0});
    BatchNormState<double> st(3);
    Tensor<double> y = batchnorm(x, gamma, beta, st, Mode::kTrain);
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i) CHECK(y[(b * 3 + c) * 4 + i] == doctest::Approx(beta[c]));
}

TEST_CASE("batchnorm eval with fresh stats is a 1/sqrt(1+eps) scaling") {
    Rng rng = make_rng(7);
    Tensor<double> x = rand_tensor<double>({2, 3, 4, 4}, rng);
    Tensor<double> gamma = ones_tensor({3});
    Tensor<double> beta({3});
    BatchNormState<double> st(3);
    const double eps = 1e-5;
    Tensor<double> y = batchnorm(x, gamma, beta, st, Mode::kEval, eps);
    const double k = 1.0 / std::sqrt(1.0 + eps);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i] * k).epsilon(1e-12));
}

TEST_CASE("batchnorm handles a zero-variance channel") {
    Tensor<double> x = Tensor<double>::full({2, 1, 2, 2}, 4.0);
    Tensor<double> gamma = ones_tensor({1});
    Tensor<double> beta({1});
    BatchNormState<double> st(1);
    Tensor<double> y = batchnorm(x, gamma, beta, st, Mode::kTrain);
    for (double v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("batchnorm train gradient matches finite differences") {
    Rng rng = make_rng(8);
    Tensor<double> x = rand_tensor<double>({2, 3, 4, 4}, rng);
    Tensor<double> gamma = rand_tensor<double>({3}, rng, 0.5, 1.5);
    Tensor<double> beta = rand_tensor<double>({3}, rng);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        BatchNormState<double> st(3);
        auto y = batchnorm(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]), st, Mode::kTrain);
        return sum_all(relu(y));  // relu breaks the symmetry that sums hide
    };
    CHECK(grad_check(f, {x, gamma, beta}) <= 1e-4);
}

// ---------------------------------------------------------------------------
// maxpool2d

TEST_CASE("maxpool2d stem geometry") {
    Tensor<float> x({9, 64, 80, 80});
    Tensor<float> y = maxpool2d(x, 3, 2, 1);
    CHECK(y.shape() == Shape{9, 64, 40, 40});
}

TEST_CASE("maxpool2d constant input stays constant") {
    Tensor<double> x = Tensor<double>::full({1, 2, 6, 6}, 3.25);
    Tensor<double> y = maxpool2d(x, 3, 2, 1);
    for (double v : y.data()) CHECK(v == 3.25);
}

TEST_CASE("maxpool2d routes gradient to the unique argmax") {
    Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
    Graph<double> g;
    Tensor<double> xb = g.leaf(x);
    Tensor<double> y = maxpool2d(xb, 2, 1, 0);
    CHECK(y.item() == doctest::Approx(4.0));
    g.backward(sum_all(y));
    std::vector<double> gx = g.grad(xb);
    CHECK(gx == std::vector<double>{0, 0, 0, 1});
}

TEST_CASE("maxpool2d rejects windows larger than the padded input") {
    Tensor<double> x({1, 1, 2, 2});
    CHECK_THROWS_AS(maxpool2d(x, 5, 1, 1), ShapeError);
}

// ---------------------------------------------------------------------------
// global_avg_pool

TEST_CASE("global_avg_pool removes the listed dims") {
    Tensor<float> x({1, 3, 3, 16, 5, 5});
    Tensor<float> y = global_avg_pool(x, {1, 2, 4, 5});
    CHECK(y.shape() == Shape{1, 16});
}

TEST_CASE("global_avg_pool of a constant is the constant") {
    Tensor<double> x = Tensor<double>::full({2, 3, 4}, -1.5);
    Tensor<double> y = global_avg_pool(x, {1, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(-1.5));
}

TEST_CASE("global_avg_pool mean over one dim") {
    Tensor<double> x({4}, {1, 2, 3, 4});
    Tensor<double> y = global_avg_pool(x, {0});
    CHECK(y.item() == doctest::Approx(2.5));
}

TEST_CASE("global_avg_pool with empty dims is the identity") {
    Rng rng = make_rng(9);
    Tensor<double> x = rand_tensor<double>({2, 3}, rng);
    Tensor<double> y = global_avg_pool(x, {});
    CHECK(bit_equal(x.data(), y.data()));
}

TEST_CASE("global_avg_pool gradient is uniform") {
    Rng rng = make_rng(10);
    Tensor<double> x = rand_tensor<double>({2, 2, 3, 4, 2, 2}, rng);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum_all(relu(global_avg_pool(g.leaf(in[0]), {1, 2, 4, 5})));
    };
    CHECK(grad_check(f, {x}) <= 1e-6);
}

// ---------------------------------------------------------------------------
// linear

TEST_CASE("linear head geometry") {
    Tensor<float> x({1, 512});
    Tensor<float> w({256, 512});
    Tensor<float> b({256});
    CHECK(linear(x, w, b).shape() == Shape{1, 256});
}

TEST_CASE("linear with identity weight is the identity") {
    Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<double> w({3, 3});
    for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    Tensor<double> b({3});
    Tensor<double> y = linear(x, w, b);
    CHECK(all_close(y.data(), x.data(), 0.0));
}

TEST_CASE("linear closed-form example") {
    Tensor<double> x({1, 2}, {1, 2});
    Tensor<double> w({1, 2}, {3, 4});
    Tensor<double> b({1}, {5});
    CHECK(linear(x, w, b).item() == doctest::Approx(16.0));
}

TEST_CASE("linear rejects inner mismatch") {
    Tensor<double> x({1, 3});
    Tensor<double> w({2, 4});
    Tensor<double> b({2});
    CHECK_THROWS_AS(linear(x, w, b), ShapeError);
}

TEST_CASE("linear gradient matches finite differences") {
    Rng rng = make_rng(11);
    Tensor<double> x = rand_tensor<double>({3, 4}, rng);
    Tensor<double> w = rand_tensor<double>({2, 4}, rng);
    Tensor<double> b = rand_tensor<double>({2}, rng);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum_all(relu(linear(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]))));
    };
    CHECK(grad_check(f, {x, w, b}) <= 1e-6);
}

// ---------------------------------------------------------------------------
// elementwise

TEST_CASE("sub of a tensor from itself is zero") {
    Rng rng = make_rng(12);
    Tensor<double> x = rand_tensor<double>({3, 3}, rng);
    Tensor<double> y = sub(x, x);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("sigmoid at zero is one half") {
    Tensor<double> x({1}, {0.0});
    CHECK(sigmoid(x).item() == doctest::Approx(0.5));
}

TEST_CASE("mean_of_list of one tensor is that tensor") {
    Rng rng = make_rng(13);
    Tensor<double> a = rand_tensor<double>({2, 2}, rng);
    Tensor<double> m = mean_of_list<double>({a});
    CHECK(bit_equal(a.data(), m.data()));
}

TEST_CASE("elementwise ops reject shape mismatch") {
    Tensor<double> a({2, 2});
    Tensor<double> b({2, 3});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(sub(a, b), ShapeError);
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng = make_rng(14);
    Tensor<double> x({17});
    for (auto& v : x.data()) {
        double u = uniform_range(rng, 0.01, 1.0);
        v = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * u;  // |x| >= 0.01 excludes the kink
    }
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum_all(relu(g.leaf(in[0])));
    };
    CHECK(grad_check(f, {x}) <= 1e-6);
}

TEST_CASE("sigmoid and scale gradients") {
    Rng rng = make_rng(15);
    Tensor<double> x = rand_tensor<double>({7}, rng, -2.0, 2.0);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum_all(sigmoid(scale(g.leaf(in[0]), 1.7)));
    };
    CHECK(grad_check(f, {x}) <= 1e-6);
}

TEST_CASE("mean_of_list gradient splits evenly") {
    Rng rng = make_rng(16);
    Tensor<double> a = rand_tensor<double>({3}, rng);
    Tensor<double> b = rand_tensor<double>({3}, rng);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum_all(mean_of_list<double>({g.leaf(in[0]), g.leaf(in[1])}));
    };
    CHECK(grad_check(f, {a, b}) <= 1e-8);
}

// ---------------------------------------------------------------------------
// shape ops

TEST_CASE("reshape folds matrix panels into the batch") {
    Tensor<float> x({1, 3, 3, 128, 10, 10});
    Tensor<float> y = reshape(x, {9, 128, 10, 10});
    CHECK(y.shape() == Shape{9, 128, 10, 10});
}

TEST_CASE("permute then inverse permute is the identity") {
    Rng rng = make_rng(17);
    Tensor<double> x = rand_tensor<double>({2, 3, 4}, rng);
    Tensor<double> y = permute(x, {2, 0, 1});
    Tensor<double> z = permute(y, {1, 2, 0});
    CHECK(z.shape() == x.shape());
    CHECK(bit_equal(x.data(), z.data()));
}

TEST_CASE("concat along features") {
    Tensor<double> a = Tensor<double>::full({1, 256}, 1.0);
    Tensor<double> b = Tensor<double>::full({1, 256}, 2.0);
    Tensor<double> y = concat<double>({a, b}, 1);
    CHECK(y.shape() == Shape{1, 512});
    CHECK(y[0] == 1.0);
    CHECK(y[511] == 2.0);
}

TEST_CASE("reshape rejects element-count mismatch") {
    Tensor<double> x({2, 3});
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
}

TEST_CASE("shape op gradients") {
    Rng rng = make_rng(18);
    Tensor<double> a = rand_tensor<double>({2, 3, 2}, rng);
    Tensor<double> b = rand_tensor<double>({2, 3, 2}, rng);
    auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        auto x = permute(reshape(g.leaf(in[0]), {2, 6}), {1, 0});
        auto y = permute(reshape(g.leaf(in[1]), {2, 6}), {1, 0});
        return sum_all(relu(concat<double>({x, y}, 1)));
    };
    CHECK(grad_check(f, {a, b}) <= 1e-6);
}

// ---------------------------------------------------------------------------
// bce_loss

TEST_CASE("bce at p=0.5 is ln 2") {
    Tensor<double> p({1}, {0.5});
    Tensor<double> y({1}, {1.0});
    CHECK(bce_loss(p, y, 1.0).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("bce pos_weight scales the positive term") {
    Tensor<double> p({1}, {0.5});
    Tensor<double> y({1}, {1.0});
    CHECK(bce_loss(p, y, 7.0).item() == doctest::Approx(7.0 * std::log(2.0)));
}

TEST_CASE("bce vanishes as p approaches the label") {
    Tensor<double> y({1}, {1.0});
    double prev = 1e9;
    for (double pv : {0.9, 0.99, 0.999, 1.0 - 1e-7}) {
        Tensor<double> p({1}, {pv});
        const double l = bce_loss(p, y, 1.0).item();
        CHECK(l < prev);
        prev = l;
    }
    CHECK(prev <= 1e-6);
}

TEST_CASE("bce rejects non-binary labels") {
    Tensor<double> p({1}, {0.5});
    Tensor<double> y({1}, {0.5});
    CHECK_THROWS_AS(bce_loss(p, y, 1.0), ValueError);
}

TEST_CASE("bce gradient matches finite differences") {
    Rng rng = make_rng(19);
    Tensor<double> p({8});
    for (auto& v : p.data()) v = uniform_range(rng, 0.05, 0.95);
    Tensor<double> y({8});
    for (auto& v : y.data()) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;
    auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return bce_loss(g.leaf(in[0]), y, 7.0);
    };
    CHECK(grad_check(f, {p}) <= 1e-4);
}

// ---------------------------------------------------------------------------
// backward

TEST_CASE("backward of sum is all ones") {
    Rng rng = make_rng(20);
    Tensor<double> x = rand_tensor<double>({3, 4}, rng);
    Graph<double> g;
    Tensor<double> xb = g.leaf(x);
    g.backward(sum_all(xb));
    std::vector<double> gx = g.grad(xb);
    for (double v : gx) CHECK(v == 1.0);
}

TEST_CASE("sigmoid-bce gradient at zero logit is minus one half") {
    Tensor<double> z({1}, {0.0});
    Tensor<double> y({1}, {1.0});
    Graph<double> g;
    Tensor<double> zb = g.leaf(z);
    g.backward(bce_loss(sigmoid(zb), y, 1.0));
    CHECK(g.grad(zb)[0] == doctest::Approx(-0.5));
}

TEST_CASE("backward rejects non-scalar roots") {
    Tensor<double> x({2, 2});
    Graph<double> g;
    Tensor<double> xb = g.leaf(x);
    CHECK_THROWS_AS(g.backward(xb), ShapeError);
}

TEST_CASE("unreached leaves get zero gradient") {
    Tensor<double> x({3}, {1, 2, 3});
    Tensor<double> unused({2}, {5, 5});
    Graph<double> g;
    Tensor<double> xb = g.leaf(x);
    Tensor<double> ub = g.leaf(unused);
    g.backward(sum_all(xb));
    std::vector<double> gu = g.grad(ub);
    for (double v : gu) CHECK(v == 0.0);
}

TEST_CASE("fresh graphs with identical inputs give bit-identical gradients") {
    Rng rng = make_rng(21);
    Tensor<double> x = rand_tensor<double>({2, 2, 5, 5}, rng);
    Tensor<double> w = rand_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> b = rand_tensor<double>({3}, rng);
    auto run = [&]() {
        Graph<double> g;
        auto xb = g.leaf(x), wb = g.leaf(w), bb = g.leaf(b);
        auto y = maxpool2d(relu(conv2d(xb, wb, bb, 1, 1)), 3, 2, 1);
        g.backward(sum_all(y));
        return g.grad(wb);
    };
    CHECK(bit_equal(run(), run()));
}

// ---------------------------------------------------------------------------
// invariants

namespace {

// Projects a tensor to a scalar with fixed random weights; a plain sum can
// hide per-element sign errors.
Tensor<double> project(const Tensor<double>& y, const Tensor<double>& r) {
    return sum_all(mul(y, r));
}

// Values with pairwise gaps far above the finite-difference step, so pool
// argmaxes cannot flip under the perturbation.
Tensor<double> well_separated(Shape shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    std::vector<int> perm(static_cast<size_t>(t.size()));
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    shuffle_inplace(perm, rng);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = 0.05 * perm[static_cast<size_t>(i)];
    return t;
}

}  // namespace

TEST_CASE("every primitive passes grad_check over 10 seeds") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng = make_rng(100 + seed);

        // conv2d
        {
            Tensor<double> x = rand_tensor<double>({2, 3, 5, 5}, rng);
            Tensor<double> w = rand_tensor<double>({2, 3, 3, 3}, rng);
            Tensor<double> b = rand_tensor<double>({2}, rng);
            Tensor<double> r = rand_tensor<double>({2, 2, 3, 3}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                return project(conv2d(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]), 2, 1), r);
            };
            CHECK(grad_check(f, {x, w, b}) <= 1e-4);
        }
        // conv3d
        {
            Tensor<double> x = rand_tensor<double>({1, 2, 3, 3, 3}, rng);
            Tensor<double> w = rand_tensor<double>({2, 2, 2, 2, 2}, rng);
            Tensor<double> b = rand_tensor<double>({2}, rng);
            Tensor<double> r = rand_tensor<double>({1, 2, 2, 2, 2}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                return project(conv3d(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]), 2, 1), r);
            };
            CHECK(grad_check(f, {x, w, b}) <= 1e-4);
        }
        // batchnorm (train mode)
        {
            Tensor<double> x = rand_tensor<double>({2, 3, 4, 4}, rng);
            Tensor<double> gamma = rand_tensor<double>({3}, rng, 0.5, 1.5);
            Tensor<double> beta = rand_tensor<double>({3}, rng);
            Tensor<double> r = rand_tensor<double>({2, 3, 4, 4}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                BatchNormState<double> st(3);
                return project(batchnorm(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2]), st, Mode::kTrain), r);
            };
            CHECK(grad_check(f, {x, gamma, beta}) <= 1e-4);
        }
        // maxpool2d
        {
            Tensor<double> x = well_separated({1, 2, 6, 6}, rng);
            Tensor<double> r = rand_tensor<double>({1, 2, 3, 3}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                return project(maxpool2d(g.leaf(in[0]), 3, 2, 1), r);
            };
            CHECK(grad_check(f, {x}) <= 1e-4);
        }
        // global_avg_pool
        {
            Tensor<double> x = rand_tensor<double>({2, 2, 3, 2, 2, 2}, rng);
            Tensor<double> r = rand_tensor<double>({2, 3, 2}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                return project(global_avg_pool(g.leaf(in[0]), {1, 4, 5}), r);
            };
            CHECK(grad_check(f, {x}) <= 1e-4);
        }
        // linear
        {
            Tensor<double> x = rand_tensor<double>({3, 4}, rng);
            Tensor<double> w = rand_tensor<double>({2, 4}, rng);
            Tensor<double> b = rand_tensor<double>({2}, rng);
            Tensor<double> r = rand_tensor<double>({3, 2}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                return project(linear(g.leaf(in[0]), g.leaf(in[1]), g.leaf(in[2])), r);
            };
            CHECK(grad_check(f, {x, w, b}) <= 1e-4);
        }
        // elementwise: relu (away from the kink), sigmoid, add, sub, mul, scale, mean
        {
            Tensor<double> a({11});
            for (auto& v : a.data()) {
                v = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform_range(rng, 0.01, 1.0);
            }
            Tensor<double> b = rand_tensor<double>({11}, rng);
            Tensor<double> r = rand_tensor<double>({11}, rng);
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                auto x = g.leaf(in[0]);
                auto y = g.leaf(in[1]);
                auto z = mean_of_list<double>({relu(x), sigmoid(y), scale(add(x, y), 0.5), sub(x, y)});
                return project(z, r);
            };
            CHECK(grad_check(f, {a, b}) <= 1e-4);
        }
        // bce_loss over sigmoid probabilities
        {
            Tensor<double> z = rand_tensor<double>({8}, rng, -2.0, 2.0);
            Tensor<double> y({8});
            for (auto& v : y.data()) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;
            auto f = [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
                return bce_loss(sigmoid(g.leaf(in[0])), y, 7.0);
            };
            CHECK(grad_check(f, {z}) <= 1e-4);
        }
    }
}

TEST_CASE("output-extent formula holds exhaustively") {
    for (int k = 1; k <= 5; ++k) {
        for (int s = 1; s <= 3; ++s) {
            for (int p = 0; p <= 2; ++p) {
                for (int n = 1; n <= 17; ++n) {
                    if (k > n + 2 * p) continue;
                    const int expect = (n + 2 * p - k) / s + 1;
                    Tensor<double> x({1, 1, n, n});
                    Tensor<double> w({1, 1, k, k});
                    Tensor<double> b({1});
                    Tensor<double> y = conv2d(x, w, b, s, p);
                    CHECK(y.shape() == Shape{1, 1, expect, expect});
                    if (p < k) {
                        Tensor<double> m = maxpool2d(x, k, s, p);
                        CHECK(m.shape() == Shape{1, 1, expect, expect});
                    }
                    Tensor<double> x3({1, 1, n, 5, 5});
                    if (k <= 5 + 2 * p) {
                        Tensor<double> w3({1, 1, k, k, k});
                        if (k <= 5) {
                            Tensor<double> y3 = conv3d(x3, w3, b, s, p);
                            CHECK(y3.extent(2) == expect);
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("conv2d is linear in its input") {
    Rng rng = make_rng(22);
    Tensor<double> x1 = rand_tensor<double>({1, 2, 6, 6}, rng);
    Tensor<double> x2 = rand_tensor<double>({1, 2, 6, 6}, rng);
    Tensor<double> w = rand_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> b = rand_tensor<double>({3}, rng);
    Tensor<double> zeros({1, 2, 6, 6});

    Tensor<double> lhs = conv2d(add(x1, x2), w, b, 1, 1);
    Tensor<double> bias_field = conv2d(zeros, w, b, 1, 1);
    Tensor<double> rhs = sub(add(conv2d(x1, w, b, 1, 1), conv2d(x2, w, b, 1, 1)), bias_field);
    CHECK(all_close(lhs.data(), rhs.data(), 1e-10));
}

// ---------------------------------------------------------------------------
// adam

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    Tensor<double> p({3}, {1, 2, 3});
    std::vector<double> before = p.data();
    AdamState<double> st;
    adam_step<double>({&p}, {std::vector<double>(3, 0.0)}, st);
    CHECK(bit_equal(p.data(), before));
}

TEST_CASE("first adam step moves by about minus lr") {
    Tensor<double> p({1}, {0.0});
    AdamState<double> st;
    adam_step<double>({&p}, {{1.0}}, st);
    CHECK(p[0] == doctest::Approx(-1e-3).epsilon(1e-6));
}

TEST_CASE("ten adam steps strictly descend a convex scalar") {
    Tensor<double> w({1}, {1.0});
    AdamState<double> st;
    double prev = w[0] * w[0];
    for (int i = 0; i < 10; ++i) {
        adam_step<double>({&w}, {{2.0 * w[0]}}, st);
        const double f = w[0] * w[0];
        CHECK(f < prev);
        prev = f;
    }
}

TEST_CASE("non-finite gradients reject the group but advance the counter") {
    Tensor<double> p({2}, {1, 1});
    std::vector<double> before = p.data();
    AdamState<double> st;
    std::string logged;
    st.on_reject = [&](const std::string& msg) { logged = msg; };
    adam_step<double>({&p}, {{std::nan(""), 1.0}}, st);
    CHECK(bit_equal(p.data(), before));
    CHECK(st.t == 1);
    CHECK(st.rejected == 1);
    CHECK(logged.find("non-finite") != std::string::npos);
}
