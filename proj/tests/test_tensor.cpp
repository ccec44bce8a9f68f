#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cellattn/tensor.hpp"
#include "gradient_suite.hpp"
#include "oracles.hpp"

using namespace cellattn;

TEST_CASE("conv2d: 1x1 kernel scales the input") {
    Tensor input = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor kernel = Tensor::full({1, 1, 1, 1}, 2.0f);
    Tensor out = conv2d(input, kernel, 1, 0);
    CHECK(out.shape() == Shape{1, 1, 3, 3});
    for (float v : out.data()) CHECK(v == doctest::Approx(2.0f));
}

TEST_CASE("conv2d: full-size kernel of ones sums the input") {
    Tensor input = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor kernel = Tensor::full({1, 1, 2, 2}, 1.0f);
    Tensor out = conv2d(input, kernel, 1, 0);
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.item() == doctest::Approx(10.0f));
}

TEST_CASE("conv2d: shape errors carry both shapes") {
    Tensor input = Tensor::zeros({1, 2, 4, 4});
    Tensor kernel = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(input, kernel, 1, 1),
                         doctest::Contains("(1,2,4,4)"), ShapeError);
    Tensor tiny = Tensor::zeros({1, 3, 2, 2});
    CHECK_THROWS_AS(conv2d(tiny, kernel, 1, 0), ShapeError);
}

TEST_CASE("pooling examples") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(avg_pool2d(x, 2).item() == doctest::Approx(2.5f));
    CHECK(max_pool2d(x, 2).item() == doctest::Approx(4.0f));
    Tensor odd = Tensor::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(avg_pool2d(odd, 2), ShapeError);
    CHECK_THROWS_AS(max_pool2d(odd, 2), ShapeError);
}

TEST_CASE("max_pool backward routes gradient to the argmax only") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    Tensor loss = sum_all(max_pool2d(x, 2));
    backward(loss);
    auto g = x.grad();
    CHECK(g[0] == 0.0f);
    CHECK(g[1] == 0.0f);
    CHECK(g[2] == 0.0f);
    CHECK(g[3] == 1.0f);
}

TEST_CASE("dense: identity weight reproduces the input") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = Tensor::zeros({3});
    Tensor out = dense(x, w, b);
    for (size_t i = 0; i < 6; ++i) CHECK(out.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("dense: worked example") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2});
    Tensor w = Tensor::from_data({2, 1}, {1, 1});
    Tensor b = Tensor::from_data({1}, {3});
    CHECK(dense(x, w, b).item() == doctest::Approx(6.0f));
    Tensor bad_w = Tensor::from_data({3, 1}, {1, 1, 1});
    CHECK_THROWS_AS(dense(x, bad_w, b), ShapeError);
}

TEST_CASE("relu and softmax examples") {
    Tensor x = Tensor::from_data({2}, {-1, 2});
    Tensor r = relu(x);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 2.0f);

    Tensor s = softmax(Tensor::from_data({1, 2}, {0, 0}), 1);
    CHECK(s.data()[0] == doctest::Approx(0.5f));
    CHECK(s.data()[1] == doctest::Approx(0.5f));
    CHECK_THROWS_AS(softmax(s, 2), ConfigError);
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
    Rng rng(11);
    for (int it = 0; it < 50; ++it) {
        Tensor x = oracles::random_tensor({6, 9}, rng, false, -30.0, 30.0);
        Tensor s = softmax(x, 1);
        for (int64_t i = 0; i < 6; ++i) {
            double sum = 0.0;
            for (int64_t j = 0; j < 9; ++j) {
                const float v = s.data()[static_cast<size_t>(i * 9 + j)];
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("dropout: inference is the identity, bit-exactly") {
    Rng rng(3);
    Tensor x = oracles::random_tensor({4, 5}, rng);
    Tensor y = dropout(x, 0.3f, false, rng);
    CHECK(y.impl() == x.impl());  // same buffer, no copy
    CHECK_THROWS_AS(dropout(x, 1.0f, true, rng), ConfigError);
    CHECK_THROWS_AS(dropout(x, -0.1f, true, rng), ConfigError);
}

TEST_CASE("dropout: inverted scaling preserves the mean") {
    Rng rng(17);
    Tensor x = Tensor::full({10, 10}, 2.0f);
    std::vector<double> mean(100, 0.0);
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        Tensor y = dropout(x, 0.3f, true, rng);
        for (size_t i = 0; i < 100; ++i) mean[i] += y.data()[i];
    }
    for (size_t i = 0; i < 100; ++i) {
        mean[i] /= trials;
        CHECK(std::fabs(mean[i] - 2.0) / 2.0 < 0.03);
    }
}

TEST_CASE("concat then slice restores the inputs bit-exactly") {
    Rng rng(5);
    for (int axis = 0; axis < 2; ++axis) {
        Tensor a = oracles::random_tensor({3, 4}, rng);
        Tensor b = oracles::random_tensor({3, 4}, rng);
        Tensor c = oracles::random_tensor({3, 4}, rng);
        Tensor cat = concat({a, b, c}, axis);
        const int64_t len = a.dim(axis);
        const Tensor parts[3] = {slice(cat, axis, 0, len), slice(cat, axis, len, 2 * len),
                                 slice(cat, axis, 2 * len, 3 * len)};
        const Tensor* orig[3] = {&a, &b, &c};
        for (int t = 0; t < 3; ++t)
            for (int64_t i = 0; i < a.numel(); ++i)
                CHECK(parts[t].data()[static_cast<size_t>(i)] ==
                      orig[t]->data()[static_cast<size_t>(i)]);
    }
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 3});
    CHECK_THROWS_AS(concat({a, b}, 1), ShapeError);
}

TEST_CASE("bce examples") {
    Tensor labels = Tensor::from_data({1, 2}, {1, 0});
    CHECK(bce_loss(Tensor::from_data({1, 2}, {1, 0}), labels).item() ==
          doctest::Approx(0.0f).epsilon(1e-5));
    CHECK(bce_loss(Tensor::from_data({1, 2}, {0.5f, 0.5f}), labels).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-6));
    Tensor bad = Tensor::from_data({1, 2}, {0.4f, 0.4f});
    CHECK_THROWS_AS(bce_loss(Tensor::from_data({1, 2}, {0.5f, 0.5f}), bad), ConfigError);
}

TEST_CASE("backward and sgd_step on a quadratic") {
    Tensor p = Tensor::from_data({1, 1}, {3.0f}, true);
    Tensor loss = matmul(p, p);  // p^2
    backward(loss);
    CHECK(p.grad()[0] == doctest::Approx(6.0f));
    std::vector<Tensor> params{p};
    sgd_step(params, 0.1f);
    CHECK(p.data()[0] == doctest::Approx(2.4f));
    CHECK(p.grad()[0] == 0.0f);
}

TEST_CASE("backward twice on the same graph is an error") {
    Tensor p = Tensor::from_data({1, 1}, {2.0f}, true);
    Tensor loss = matmul(p, p);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), ConfigError);
    Tensor vec = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(vec), ConfigError);
}

TEST_CASE("20 sgd steps contract the quadratic geometrically") {
    // p <- p (1 - 2 lr), so |p_20| = 3 * 0.8^20 < 0.05
    Tensor p = Tensor::from_data({1, 1}, {3.0f}, true);
    std::vector<Tensor> params{p};
    for (int step = 0; step < 20; ++step) {
        Tensor loss = matmul(p, p);
        backward(loss);
        sgd_step(params, 0.1f);
    }
    CHECK(std::fabs(p.data()[0]) < 0.05f);
    CHECK(std::fabs(p.data()[0]) == doctest::Approx(3.0 * std::pow(0.8, 20)).epsilon(1e-4));
}

TEST_CASE("finite-difference sweep over every differentiable op") {
    auto suite = gradient_suite::run(20, 1e-3);
    for (const auto& op : suite.ops) {
        INFO(op.op, ": worst rel ", op.worst_rel, " over ", op.checks, " checks");
        CHECK(op.instances >= 20);
        CHECK(op.failures == 0);
    }
}

TEST_CASE("TNSR round trip") {
    Rng rng(23);
    Tensor t = oracles::random_tensor({3, 4, 5}, rng);
    std::stringstream ss;
    write_tnsr(ss, t);
    // header: magic + rank + 3 dims, then payload
    CHECK(ss.str().size() == 4 + 4 + 3 * 8 + 60 * 4);
    Tensor back = read_tnsr(ss);
    CHECK(back.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i)
        CHECK(back.data()[static_cast<size_t>(i)] == t.data()[static_cast<size_t>(i)]);

    std::stringstream bad("XXXX");
    CHECK_THROWS_AS(read_tnsr(bad), IoError);
}

TEST_CASE("forward ops keep finite inputs finite") {
    Rng rng(31);
    Tensor x = oracles::random_tensor({2, 3, 8, 8}, rng, false, -50.0, 50.0);
    Tensor gamma = Tensor::full({3}, 1.0f);
    Tensor beta = Tensor::zeros({3});
    Tensor y = batchnorm(x, gamma, beta, 1e-5f);
    for (float v : y.data()) CHECK(std::isfinite(v));
    Tensor big = oracles::random_tensor({4, 4}, rng, false, -300.0, 300.0);
    for (float v : softmax(big, 1).data()) CHECK(std::isfinite(v));
    Tensor probs = Tensor::from_data({1, 2}, {1.0f, 0.0f});
    Tensor labels = Tensor::from_data({1, 2}, {0.0f, 1.0f});
    CHECK(std::isfinite(bce_loss(probs, labels).item()));
}
