#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"
#include "flowssc/optim.hpp"
#include "gradcheck.hpp"

namespace flowssc {
namespace {

using testing::grad_check;
using testing::project;

class TensorTest : public ::testing::Test {
protected:
    DTypeScope precision_{DType::f64};
    Rng rng_{1234};
};

TEST_F(TensorTest, MatmulIdentityAndHandExample) {
    Tensor a = Tensor::randn({3, 3}, rng_);
    Tensor eye = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    EXPECT_TRUE(same_values(ops::matmul(a, eye), a));

    Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::from_values({2, 1}, {1, 1});
    EXPECT_EQ(ops::matmul(m, ones).values(), (std::vector<double>{3, 7}));
}

TEST_F(TensorTest, MatmulShapeMismatchThrows) {
    EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_F(TensorTest, SoftmaxClosedForms) {
    Tensor c = ops::softmax_lastdim(Tensor::full({1, 4}, 2.5));
    for (double v : c.values()) {
        EXPECT_NEAR(v, 0.25, 1e-15);
    }
    Tensor s = ops::softmax_lastdim(Tensor::from_values({1, 2}, {0.0, std::log(3.0)}));
    EXPECT_NEAR(s.at(0), 0.25, 1e-15);
    EXPECT_NEAR(s.at(1), 0.75, 1e-15);
}

TEST_F(TensorTest, LayerNormClosedFormAndAffineInvariance) {
    Tensor y = ops::layer_norm(Tensor::from_values({1, 3}, {1, 2, 3}), 0.0);
    EXPECT_NEAR(y.at(0), -std::sqrt(1.5), 1e-12);
    EXPECT_NEAR(y.at(1), 0.0, 1e-12);
    EXPECT_NEAR(y.at(2), std::sqrt(1.5), 1e-12);

    Tensor x = Tensor::randn({4, 6}, rng_);
    Tensor shifted = ops::add_scalar(ops::mul_scalar(x, 3.7), -1.25);
    Tensor a = ops::layer_norm(x, 0.0), b = ops::layer_norm(shifted, 0.0);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
    }
}

TEST_F(TensorTest, GeluValues) {
    Tensor y = ops::gelu(Tensor::from_values({3}, {0.0, 20.0, -20.0}));
    EXPECT_EQ(y.at(0), 0.0);
    EXPECT_NEAR(y.at(1), 20.0, 1e-12);
    EXPECT_NEAR(y.at(2), 0.0, 1e-12);
}

TEST_F(TensorTest, BilinearCenterAndMidpoint) {
    // 2x2 plane, 1 channel, values 1..4
    Tensor plane = Tensor::from_values({2, 2, 1}, {1, 2, 3, 4});
    Tensor uv = Tensor::from_values({3, 2}, {0.25, 0.25, 0.75, 0.75, 0.5, 0.25});
    Tensor out = ops::bilinear_sample_2d(plane, uv);
    EXPECT_DOUBLE_EQ(out.at(0), 1.0);
    EXPECT_DOUBLE_EQ(out.at(1), 4.0);
    EXPECT_DOUBLE_EQ(out.at(2), 2.0);  // midpoint of cells (0,0) and (1,0)
}

TEST_F(TensorTest, BilinearClampsOutOfRange) {
    Tensor plane = Tensor::from_values({2, 2, 1}, {1, 2, 3, 4});
    Tensor uv = Tensor::from_values({2, 2}, {-3.0, -1.0, 7.0, 2.0});
    Tensor out = ops::bilinear_sample_2d(plane, uv);
    EXPECT_DOUBLE_EQ(out.at(0), 1.0);
    EXPECT_DOUBLE_EQ(out.at(1), 4.0);
}

TEST_F(TensorTest, CrossEntropyLimits) {
    const std::int32_t labels[] = {0, 2, 1};
    Tensor confident = Tensor::from_values({3, 3}, {60, 0, 0, 0, 0, 60, 0, 60, 0});
    EXPECT_LT(ops::cross_entropy(confident, labels).item(), 1e-20);
    Tensor uniform = Tensor::zeros({3, 5});
    EXPECT_NEAR(ops::cross_entropy(uniform, labels).item(), std::log(5.0), 1e-14);
}

TEST_F(TensorTest, CrossEntropyIgnoreAndErrors) {
    const std::int32_t labels[] = {255, 1};
    Tensor logits = Tensor::from_values({2, 2}, {5, -5, 0, 0});
    EXPECT_NEAR(ops::cross_entropy(logits, labels, std::nullopt, 255).item(), std::log(2.0), 1e-14);
    const std::int32_t all_ignored[] = {255, 255};
    EXPECT_THROW(ops::cross_entropy(logits, all_ignored, std::nullopt, 255), Error);
    const std::int32_t bad[] = {0, 7};
    EXPECT_THROW(ops::cross_entropy(logits, bad), ShapeError);
}

TEST_F(TensorTest, BackwardSumGivesOnes) {
    Tensor x = Tensor::randn({2, 3}, rng_);
    x.set_requires_grad();
    autograd::Graph graph;
    autograd::backward(ops::sum(x));
    for (double g : x.grad().values()) {
        EXPECT_EQ(g, 1.0);
    }
}

TEST_F(TensorTest, BackwardTwiceIsAnError) {
    Tensor x = Tensor::randn({2, 3}, rng_);
    x.set_requires_grad();
    autograd::Graph graph;
    Tensor loss = ops::sum(ops::square(x));
    autograd::backward(loss);
    EXPECT_THROW(autograd::backward(loss), Error);
}

TEST_F(TensorTest, BackwardRejectsNonScalarAndDeadGraph) {
    Tensor x = Tensor::randn({2, 3}, rng_);
    x.set_requires_grad();
    Tensor y;
    {
        autograd::Graph graph;
        y = ops::square(x);
        EXPECT_THROW(autograd::backward(y), ShapeError);
        y = ops::sum(y);
    }
    EXPECT_THROW(autograd::backward(y), Error);
}

TEST_F(TensorTest, BackwardVisitsNodesInReverseOrder) {
    // A chain whose gradient is only correct if parents see completed child grads.
    Tensor x = Tensor::from_values({1}, {0.7});
    x.set_requires_grad();
    autograd::Graph graph;
    Tensor a = ops::mul(x, x);
    Tensor b = ops::mul(a, x);
    Tensor c = ops::add(b, a);
    autograd::backward(ops::sum(c));
    EXPECT_NEAR(x.grad().at(0), 3 * 0.49 + 2 * 0.7, 1e-14);
}

TEST_F(TensorTest, NoGradGuardBlocksRecording) {
    Tensor x = Tensor::randn({3}, rng_);
    x.set_requires_grad();
    autograd::Graph graph;
    Tensor y;
    {
        autograd::NoGradGuard guard;
        y = ops::square(x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(graph.size(), 0u);
}

TEST_F(TensorTest, NonFiniteForwardThrows) {
    EXPECT_THROW(ops::div(Tensor::full({2}, 1.0), Tensor::zeros({2})), NumericalError);
    EXPECT_THROW(ops::exp(Tensor::full({1}, 1e6)), NumericalError);
}

TEST_F(TensorTest, BroadcastRowVectorAndScalar) {
    Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_values({3}, {10, 20, 30});
    EXPECT_EQ(ops::add(x, b).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
    Tensor col = Tensor::from_values({2, 1}, {2, 3});
    EXPECT_EQ(ops::mul(x, col).values(), (std::vector<double>{2, 4, 6, 12, 15, 18}));
}

TEST_F(TensorTest, MlpCompositeGradientMatchesFiniteDifferences) {
    Tensor x = Tensor::randn({5, 4}, rng_);
    Tensor w1 = Tensor::randn({4, 6}, rng_, 0.5), b1 = Tensor::randn({6}, rng_, 0.1);
    Tensor w2 = Tensor::randn({6, 6}, rng_, 0.5), b2 = Tensor::randn({6}, rng_, 0.1);
    Tensor w3 = Tensor::randn({6, 3}, rng_, 0.5), b3 = Tensor::randn({3}, rng_, 0.1);
    const std::int32_t labels[] = {0, 1, 2, 1, 0};
    auto f = [&](const std::vector<Tensor>& p) {
        Tensor h = ops::gelu(ops::add(ops::matmul(x, p[0]), p[1]));
        h = ops::gelu(ops::add(ops::matmul(h, p[2]), p[3]));
        return ops::cross_entropy(ops::add(ops::matmul(h, p[4]), p[5]), labels);
    };
    EXPECT_LT(grad_check(f, {w1, b1, w2, b2, w3, b3}).max_rel_err, 1e-4);
}

// Property: every differentiable primitive passes central differences over
// >= 100 random trials at step 1e-5.
TEST_F(TensorTest, EveryPrimitivePassesFiniteDifferencesOver100Trials) {
    const auto checks = verify::primitive_gradient_checks(100, 99, 1e-4);
    EXPECT_GE(checks.size(), 14u);
    for (const auto& c : checks) {
        EXPECT_TRUE(c.pass) << verify::format(c);
    }
}

TEST_F(TensorTest, SoftmaxRowsSumToOneAndLayerNormStatistics) {
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = Tensor::randn({4, 7}, rng_, 5.0);
        Tensor s = ops::softmax_lastdim(x);
        Tensor n = ops::layer_norm(x, 1e-12);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0, mu = 0, var = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                total += s.at(r * 7 + c);
                mu += n.at(r * 7 + c) / 7.0;
            }
            for (std::size_t c = 0; c < 7; ++c) {
                var += (n.at(r * 7 + c) - mu) * (n.at(r * 7 + c) - mu) / 7.0;
            }
            EXPECT_NEAR(total, 1.0, 1e-6);
            EXPECT_NEAR(mu, 0.0, 1e-5);
            EXPECT_NEAR(var, 1.0, 1e-5);
        }
    }
}

TEST_F(TensorTest, ForwardIsBitIdenticalAcrossRuns) {
    DTypeScope f32(DType::f32);
    auto run = [] {
        Rng r(7);
        Tensor a = Tensor::randn({33, 17}, r), b = Tensor::randn({17, 29}, r);
        return ops::softmax_lastdim(ops::gelu(ops::matmul(a, b)));
    };
    EXPECT_TRUE(same_values(run(), run()));
}

TEST(OptimTest, WarmupCosineSchedule) {
    optim::WarmupCosine s{1e-3, 0.0, 10, 110};
    EXPECT_NEAR(s.at(0), 1e-4, 1e-15);
    EXPECT_NEAR(s.at(9), 1e-3, 1e-15);
    EXPECT_NEAR(s.at(60), 5e-4, 1e-12);
    EXPECT_NEAR(s.at(110), 0.0, 1e-15);
}

TEST(OptimTest, AdamWMinimizesQuadratic) {
    DTypeScope precision(DType::f64);
    Tensor x = Tensor::from_values({2}, {3.0, -2.0});
    x.set_requires_grad();
    nn::ParamList params{{"x", x}};
    optim::AdamW opt(params, {});
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        autograd::Graph graph;
        autograd::backward(ops::sum(ops::square(x)));
        opt.step(0.05);
    }
    EXPECT_NEAR(x.at(0), 0.0, 1e-2);
    EXPECT_NEAR(x.at(1), 0.0, 1e-2);
}

}  // namespace
}  // namespace flowssc
