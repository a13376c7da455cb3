#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "rat/error.hpp"
#include "rat/tensor.hpp"

using namespace rat;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(numel(shape));
    for (auto& x : v) {
        x = dist(rng);
    }
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Compares the analytic gradient of every input with central differences.
double max_grad_error(const std::vector<Tensor>& inputs, const std::function<Tensor()>& f) {
    for (const auto& t : inputs) {
        t.zero_grad();
    }
    f().backward();
    double worst = 0.0;
    for (const auto& t : inputs) {
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double numeric = oracle::central_difference(values, i, 1e-5, [&] {
                NoGradGuard guard;
                return f().item();
            });
            worst = std::max(worst, oracle::relative_error(analytic[i], numeric));
        }
    }
    return worst;
}

}  // namespace

TEST_SUITE("tensor") {
    TEST_CASE("matmul by hand") {
        const auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
        const auto b = Tensor::from({2, 1}, {1, 1});
        const auto c = matmul(a, b);
        CHECK(c.shape() == Shape{2, 1});
        CHECK(c.data()[0] == 3.0);
        CHECK(c.data()[1] == 7.0);
        const auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        std::mt19937_64 rng(1);
        const auto m = random_tensor(rng, {3, 4}, false);
        const auto same = matmul(eye, m);
        for (std::size_t i = 0; i < m.numel(); ++i) {
            CHECK(same.data()[i] == m.data()[i]);
        }
        CHECK_THROWS_AS(matmul(a, Tensor::from({3, 1}, {1, 1, 1})), UsageError);
    }

    TEST_CASE("matmul with a transposed right operand and broadcast batches") {
        std::mt19937_64 rng(2);
        const auto a = random_tensor(rng, {2, 3, 4}, false);
        const auto b = random_tensor(rng, {5, 4}, false);
        const auto c = matmul(a, b, true);
        REQUIRE(c.shape() == Shape{2, 3, 5});
        for (std::size_t t = 0; t < 2; ++t) {
            for (std::size_t i = 0; i < 3; ++i) {
                for (std::size_t j = 0; j < 5; ++j) {
                    double want = 0.0;
                    for (std::size_t k = 0; k < 4; ++k) {
                        want += a.data()[t * 12 + i * 4 + k] * b.data()[j * 4 + k];
                    }
                    CHECK(c.data()[t * 15 + i * 5 + j] == doctest::Approx(want).epsilon(1e-14));
                }
            }
        }
    }

    TEST_CASE("gradient of sum(a b) with respect to a is ones times b transposed") {
        std::mt19937_64 rng(3);
        const auto a = random_tensor(rng, {2, 3});
        const auto b = random_tensor(rng, {3, 4});
        sum(matmul(a, b)).backward();
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t k = 0; k < 3; ++k) {
                double row = 0.0;
                for (std::size_t j = 0; j < 4; ++j) {
                    row += b.data()[k * 4 + j];
                }
                CHECK(a.grad()[i * 3 + k] == doctest::Approx(row));
            }
        }
    }

    TEST_CASE("softmax values") {
        const auto flat = softmax_lastdim(Tensor::from({1, 4}, {2, 2, 2, 2}));
        for (double p : flat.data()) {
            CHECK(p == doctest::Approx(0.25));
        }
        const auto two = softmax_lastdim(Tensor::from({2}, {0.0, std::log(3.0)}));
        CHECK(two.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(two.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
        Mask mask{{2}, {1, 0}};
        const auto masked = softmax_lastdim(Tensor::from({2}, {5, 5}), &mask);
        CHECK(masked.data()[0] == 1.0);
        CHECK(masked.data()[1] == 0.0);
        Mask none{{2}, {0, 0}};
        CHECK_THROWS_AS(softmax_lastdim(Tensor::from({2}, {5, 5}), &none), UsageError);
    }

    TEST_CASE("masked entries get exactly zero weight whatever their score") {
        std::mt19937_64 rng(4);
        Mask mask{{1, 1, 5}, {1, 0, 1, 0, 1}};
        const auto x = random_tensor(rng, {3, 2, 5}, false);
        auto y = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
        for (std::size_t r = 0; r < 6; ++r) {
            y.mutable_data()[r * 5 + 1] = 1e6;
            y.mutable_data()[r * 5 + 3] = -1e6;
        }
        const auto px = softmax_lastdim(x, &mask);
        const auto py = softmax_lastdim(y, &mask);
        for (std::size_t i = 0; i < px.numel(); ++i) {
            CHECK(px.data()[i] == py.data()[i]);
        }
    }

    TEST_CASE("layer norm") {
        const auto ones = Tensor::full({3}, 1.0);
        const auto zeros = Tensor::zeros({3});
        const auto y = layer_norm(Tensor::from({3}, {1, 2, 3}), ones, zeros);
        CHECK(y.data()[0] == doctest::Approx(-1.22474).epsilon(1e-5));
        CHECK(y.data()[1] == doctest::Approx(0.0));
        CHECK(y.data()[2] == doctest::Approx(1.22474).epsilon(1e-5));
        const auto c = layer_norm(Tensor::full({3}, 4.0), ones, zeros);
        for (double v : c.data()) {
            CHECK(v == 0.0);
        }
        std::mt19937_64 rng(5);
        const auto g = Tensor::full({8}, 1.0);
        const auto b = Tensor::zeros({8});
        for (int trial = 0; trial < 50; ++trial) {
            const double spread = trial % 2 == 0 ? 1.0 : 100.0;
            auto x = random_tensor(rng, {8}, false);
            double raw_mean = 0.0;
            double raw_var = 0.0;
            for (auto& v : x.mutable_data()) {
                v *= spread;
                raw_mean += v / 8.0;
            }
            for (double v : x.data()) {
                raw_var += (v - raw_mean) * (v - raw_mean) / 8.0;
            }
            const auto n = layer_norm(x, g, b);
            double mean = 0.0;
            double var = 0.0;
            for (double v : n.data()) {
                mean += v / 8.0;
            }
            for (double v : n.data()) {
                var += (v - mean) * (v - mean) / 8.0;
            }
            CHECK(std::abs(mean) < 1e-6);
            // eps = 1e-5 shrinks the variance by exactly var / (var + eps).
            CHECK(std::abs(var - raw_var / (raw_var + 1e-5)) < 1e-9);
            if (spread > 1.0) {
                CHECK(std::abs(var - 1.0) < 1e-6);
            }
        }
    }

    TEST_CASE("backward basics") {
        const auto w = Tensor::from({3}, {1, 2, 3}, true);
        const auto loss = sum(w);
        loss.backward();
        for (double g : w.grad()) {
            CHECK(g == 1.0);
        }
        CHECK_THROWS_AS(loss.backward(), UsageError);
        CHECK_THROWS_AS(add(w, w).backward(), UsageError);

        const auto used = Tensor::from({2}, {1, 2}, true);
        const auto unused = Tensor::from({2}, {3, 4}, true);
        unused.zero_grad();
        sum(mul(used, used)).backward();
        for (double g : unused.grad()) {
            CHECK(g == 0.0);
        }
        CHECK(used.grad()[1] == 4.0);
    }

    TEST_CASE("no graph is recorded under NoGradGuard") {
        const auto w = Tensor::from({2}, {1, 2}, true);
        Tensor s;
        {
            NoGradGuard guard;
            CHECK_FALSE(grad_enabled());
            s = sum(w);
        }
        CHECK(grad_enabled());
        CHECK_FALSE(s.requires_grad());
    }

    TEST_CASE("broadcasting shape errors") {
        CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), UsageError);
        CHECK(add(Tensor::zeros({2, 3}), Tensor::zeros({1, 3})).shape() == Shape{2, 3});
        CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), UsageError);
        CHECK_THROWS_AS(permute(Tensor::zeros({2, 3}), {0, 0}), UsageError);
    }

    TEST_CASE("composite graphs match finite differences") {
        std::mt19937_64 rng(6);
        const auto x = random_tensor(rng, {2, 3, 4});
        const auto w = random_tensor(rng, {4, 5});
        const auto bias = random_tensor(rng, {5});
        const auto gamma = random_tensor(rng, {5});
        const auto beta = random_tensor(rng, {5});
        const auto other = random_tensor(rng, {3, 5});
        Mask mask{{1, 3, 3}, {1, 1, 0, 1, 1, 1, 0, 1, 1}};
        auto f = [&] {
            auto h = gelu(linear(x, w, bias));
            h = layer_norm(h, gamma, beta);
            auto scores = scale(matmul(h, h, true), 0.3);
            auto attn = softmax_lastdim(scores, &mask);
            auto mixed = matmul(attn, h);
            auto p = permute(reshape(mixed, {2, 15}), {1, 0});
            auto q = concat_lastdim({p, relu(p)});
            auto r = sub(mul(sigmoid(reshape(q, {3, 5, 4})), Tensor::full({1, 1, 4}, 0.5)), Tensor::zeros({4}));
            const auto picked = take_rows(r, std::vector<std::size_t>{0, 7, 11});
            return add(mean(mul(picked, picked)), sum(mul(other, other)));
        };
        CHECK(max_grad_error({x, w, bias, gamma, beta, other}, f) <= 1e-4);
    }

    TEST_CASE("gather and loss gradients match finite differences") {
        std::mt19937_64 rng(7);
        const auto t0 = random_tensor(rng, {4, 3});
        const auto t1 = random_tensor(rng, {2, 3});
        const auto w = random_tensor(rng, {3, 1});
        const std::vector<RowRef> refs{{0, 1}, {1, 0}, {0, 1}, {0, 3}, {1, 1}, {0, 0}, {1, 1}, {0, 2}, {0, 1}};
        auto f = [&] {
            const auto g = gather_rows({t0, t1}, refs, {3, 3, 3});
            const auto logits = reshape(linear(g, w, Tensor()), {9});
            const std::vector<double> labels{1, 0, 1, 1, 0, 0, 1, 0, 1};
            return bce_with_logits(logits, labels);
        };
        CHECK(max_grad_error({t0, t1, w}, f) <= 1e-4);
    }

    TEST_CASE("bce with logits equals the mean cross-entropy") {
        const auto logits = Tensor::from({3}, {0.0, 2.0, -1.0});
        const std::vector<double> labels{1, 0, 0};
        const double want = (std::log(2.0) + std::log1p(std::exp(2.0)) + std::log1p(std::exp(-1.0))) / 3.0;
        CHECK(bce_with_logits(logits, labels).item() == doctest::Approx(want).epsilon(1e-12));
        CHECK(std::isfinite(bce_with_logits(Tensor::from({1}, {800.0}), std::vector<double>{0}).item()));
        CHECK_THROWS_AS(bce_with_logits(logits, std::vector<double>{1, 0}), UsageError);
    }
}
