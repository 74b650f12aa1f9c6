#include <sparse_rcnn/grad_suite.hpp>
#include <sparse_rcnn/kernels.hpp>
#include <sparse_rcnn/ops.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace sparse_rcnn;

static Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = d(rng);
    return Tensor(std::move(shape), std::move(v));
}

static std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            long double acc = 0.0L;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<long double>(a[i * k + p]) * b[p * n + j];
            c[i * n + j] = static_cast<double>(acc);
        }
    return c;
}

TEST(TensorCore, ConstructionChecksValueCount) {
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
    Tensor t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.at(1, 2), 1.5);
}

TEST(TensorCore, GemmKernelsMatchNaiveProduct) {
    std::mt19937_64 rng(11);
    for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 5, 3}, {13, 300, 17}, {6, 16, 16}, {25, 9, 49}}) {
        const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        const auto ref = naive_matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, m, k, n);
        std::vector<double> c(m * n, 0.0);
        kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), c.data());
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12 * static_cast<double>(k)) << m << "x" << k << "x" << n;

        // A^T stored as [k x m]
        std::vector<double> at(k * m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a.data()[i * k + p];
        std::fill(c.begin(), c.end(), 0.0);
        kernels::gemm_tn(m, n, k, at.data(), b.data().data(), c.data());
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12 * static_cast<double>(k));

        std::vector<double> bt(n * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b.data()[p * n + j];
        std::fill(c.begin(), c.end(), 0.0);
        kernels::gemm_nt(m, n, k, a.data().data(), bt.data(), c.data());
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12 * static_cast<double>(k));
    }
}

TEST(TensorCore, Conv2dMatchesDirectLoop) {
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    for (std::size_t stride : {1, 2}) {
        const Tensor y = conv2d(x, w, b, stride, 1);
        const std::size_t oh = (7 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
        ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t o = 0; o < 4; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double acc = b[o];
                        for (std::size_t c = 0; c < 3; ++c)
                            for (std::size_t di = 0; di < 3; ++di)
                                for (std::size_t dj = 0; dj < 3; ++dj) {
                                    const long yy = static_cast<long>(i * stride + di) - 1, xx = static_cast<long>(j * stride + dj) - 1;
                                    if (yy < 0 || xx < 0 || yy >= 7 || xx >= 6) continue;
                                    acc += w[((o * 3 + c) * 3 + di) * 3 + dj] * x[((n * 3 + c) * 7 + static_cast<std::size_t>(yy)) * 6 + static_cast<std::size_t>(xx)];
                                }
                        EXPECT_NEAR(y[((n * 4 + o) * oh + i) * ow + j], acc, 1e-12);
                    }
    }
}

TEST(TensorCore, SoftmaxAndLayerNormRowStatistics) {
    std::mt19937_64 rng(3);
    const Tensor a = random_tensor({4, 9}, rng, -30.0, 30.0);
    const Tensor s = softmax(a);
    for (std::size_t i = 0; i < 4; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 9; ++j) total += s.at(i, j);
        EXPECT_NEAR(total, 1.0, 1e-14);
    }
    const Tensor ln = layer_norm(a, Tensor(Shape{9}, 1.0), Tensor(Shape{9}, 0.0));
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 9; ++j) mean += ln.at(i, j) / 9.0;
        for (std::size_t j = 0; j < 9; ++j) var += (ln.at(i, j) - mean) * (ln.at(i, j) - mean) / 9.0;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-5);
    }
}

TEST(TensorCore, SharedInputAccumulatesGradient) {
    Tensor x(Shape{3}, {1.0, -2.0, 0.5}, true);
    const Tensor y = sum(add(mul(x, x), scale(x, 3.0)));  // d/dx = 2x + 3
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 4.0);
}

TEST(TensorCore, NoGradGuardRecordsNothing) {
    Tensor x(Shape{2}, {1.0, 2.0}, true);
    NoGradGuard ng;
    const Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}

TEST(TensorCore, DetachBlocksGradient) {
    Tensor x(Shape{2}, {1.0, 2.0}, true);
    const Tensor y = sum(mul(detach(x), x));  // d/dx = detached x
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(TensorCore, EveryOpPassesFiniteDifferences) {
    const SuiteResult r = op_grad_suite();
    for (const auto& c : r.cases) {
        const auto* w = c.report.worst();
        ASSERT_NE(w, nullptr) << c.name;
        EXPECT_LT(w->max_rel_error, 1e-6) << c.name << " input " << w->name;
    }
    EXPECT_TRUE(r.passed);
}

TEST(TensorCore, CorruptedBackwardRuleIsCaught) {
    // y = x^2 with a backward rule that returns x instead of 2x.
    auto bad_square = [](const Tensor& x) {
        std::vector<double> out(x.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
        return make_op(x.shape(), std::move(out), "bad_square", {x}, [](detail::Node& n) {
            auto& g = n.input_grad(0);
            const auto& xv = n.input_data(0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * xv[i];
        });
    };
    Tensor x(Shape{4}, {0.3, -1.2, 2.0, 0.7});
    const GradCheckReport rep = grad_check([&] { return sum(bad_square(x)); }, {{"x", x}});
    EXPECT_FALSE(rep.passed);
    EXPECT_NEAR(rep.worst()->max_rel_error, 0.5, 1e-6);
}

TEST(TensorCore, GradCheckRestoresInputs) {
    Tensor x(Shape{3}, {0.1, 0.2, 0.3});
    grad_check([&] { return sum(sigmoid(x)); }, {{"x", x}});
    EXPECT_EQ(x[1], 0.2);
    EXPECT_FALSE(x.requires_grad());
}

TEST(TensorCore, ShapeErrorsAreDimensionErrors) {
    EXPECT_THROW(add(Tensor(Shape{2, 3}), Tensor(Shape{3, 2})), DimensionError);
    EXPECT_THROW(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), DimensionError);
    EXPECT_THROW(split_heads(Tensor(Shape{1, 2, 6}), 4), DimensionError);
}
