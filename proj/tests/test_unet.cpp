#include <gtest/gtest.h>

#include <cmath>

#include "carbq/nn/unet.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace carbq;
using namespace carbq::nn;
using carbq::test::random_tensor;

namespace {

UNetConfig tiny(int depth = 1, int base = 2, int h = 8, int w = 8) {
    UNetConfig c;
    c.depth = depth;
    c.base_channels = base;
    c.input_h = h;
    c.input_w = w;
    c.seed = 3;
    return c;
}

Tensor<double> binary_target(Rng& rng, int n, int h, int w) {
    Tensor<double> t(n, 1, h, w);
    for (auto& v : t.values) v = rng.below(2) ? 1.0 : 0.0;
    return t;
}

} // namespace

TEST(UNetConfig, ValidationAndJson) {
    EXPECT_NO_THROW(UNetConfig{}.validate());
    auto c = tiny(3, 2, 12, 16); // 12 not divisible by 8
    EXPECT_THROW(c.validate(), InvalidArgument);
    const auto back = config_from_json(to_json(tiny()));
    EXPECT_EQ(back, tiny());
    EXPECT_THROW(config_from_json(nlohmann::json{{"depht", 2}}), InvalidArgument);
    EXPECT_EQ(config_from_json(nlohmann::json{{"epochs", 5}}).epochs, 5);
}

TEST(UNetLayout, DefaultChannelsAndOrder) {
    const auto specs = layer_layout(UNetConfig{});
    ASSERT_EQ(specs.size(), 2u * 3 + 2 + 3u * 3 + 1);
    EXPECT_EQ(specs.front().name, "enc0.conv1");
    EXPECT_EQ(specs[6].name, "bottleneck.conv1");
    EXPECT_EQ(specs[6].out_c, 64);
    EXPECT_EQ(specs[8].name, "dec2.up");
    EXPECT_EQ(specs[8].in_c, 64);
    EXPECT_EQ(specs[9].in_c, 64); // 32 upsampled + 32 skip
    EXPECT_EQ(specs.back().name, "head");
}

TEST(UNetInit, SeededHeScale) {
    const auto a = init_params<float>(UNetConfig{});
    const auto b = init_params<float>(UNetConfig{});
    EXPECT_EQ(a, b);
    auto c2 = UNetConfig{};
    c2.seed = 1;
    EXPECT_NE(init_params<float>(c2), a);
    // Sample std of the largest kernel near sqrt(2 / fan_in).
    const auto& l = a.layers[a.bottleneck(1)];
    double s2 = 0;
    for (float v : l.weight.values) s2 += double(v) * v;
    EXPECT_NEAR(std::sqrt(s2 / l.weight.size()), std::sqrt(2.0 / (64 * 9)), 0.003);
    for (const auto& layer : a.layers)
        for (float v : layer.bias) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, ShapeRangeAndDeterminism) {
    Rng rng(1);
    const auto cfg = tiny(2, 3, 16, 24);
    const auto p = init_params<float>(cfg);
    const auto x = random_tensor<float>(rng, 3, 1, 16, 24, 0.0, 1.0);
    const auto a = forward(p, x);
    EXPECT_EQ(a.shape_string(), "(3,1,16,24)");
    for (float v : a.values) {
        ASSERT_GT(v, 0.0f);
        ASSERT_LT(v, 1.0f);
    }
    EXPECT_EQ(forward(p, x), a);
    EXPECT_THROW(forward(p, random_tensor<float>(rng, 1, 1, 8, 24)), InvalidArgument);
}

TEST(Forward, ZeroHeadGivesOneHalf) {
    Rng rng(2);
    auto p = init_params<double>(tiny());
    p.layers[p.head()].weight.fill(0.0);
    for (double v : forward(p, random_tensor<double>(rng, 2, 1, 8, 8)).values) EXPECT_EQ(v, 0.5);
}

TEST(Conv3x3Relu, IdentityAndClampExamples) {
    Rng rng(3);
    const auto x = random_tensor<double>(rng, 1, 1, 4, 4, 0.0, 1.0);
    Tensor<double> k(1, 1, 3, 3);
    k(0, 0, 1, 1) = 1.0;
    EXPECT_EQ(conv3x3_relu(x, k, {0.0}), x);
    Tensor<double> zero(1, 1, 3, 3);
    for (double v : conv3x3_relu(x, zero, {-1.0}).values) EXPECT_EQ(v, 0.0);
}

TEST(Bce, AnalyticExamples) {
    Tensor<double> ones(1, 1, 2, 2, 1.0), half(1, 1, 2, 2, 0.5);
    EXPECT_NEAR(bce_loss(half, ones, 1e-7), std::log(2.0), 1e-12);
    Tensor<double> y(1, 1, 1, 2), p(1, 1, 1, 2);
    y.values = {1, 0};
    p.values = {0.9, 0.2};
    EXPECT_NEAR(bce_loss(p, y, 1e-7), -(std::log(0.9) + std::log(0.8)) / 2, 1e-12);
    EXPECT_NEAR(bce_loss(p, y, 1e-7), 0.164252, 1e-6);
    // Perfect predictions hit the clamp.
    Tensor<double> t(1, 1, 1, 2);
    t.values = {1, 0};
    EXPECT_LE(bce_loss(t, t, 1e-7), -std::log(1 - 1e-7) + 1e-15);
    EXPECT_GE(bce_loss(t, t, 1e-7), 0.0);
    EXPECT_THROW(bce_loss(p, ones, 1e-7), InvalidArgument);
}

TEST(Bce, MatchesScalarReferenceProperty) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const int h = 1 + static_cast<int>(rng.below(6)), w = 1 + static_cast<int>(rng.below(6));
        Tensor<double> p(1, 1, h, w), y(1, 1, h, w);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p.values[i] = rng.uniform();
            y.values[i] = double(rng.below(2));
        }
        const double got = bce_loss(p, y, 1e-7);
        EXPECT_NEAR(got, oracle::bce_reference(p.values, y.values, 1e-7), 1e-9);
        EXPECT_GE(got, 0.0);
    }
}

TEST(Backward, MatchesFiniteDifferences) {
    Rng rng(5);
    auto p = init_params<double>(tiny());
    oracle::randomize_biases(p, rng);
    const auto x = random_tensor<double>(rng, 2, 1, 8, 8, 0.0, 1.0);
    const auto y = binary_target(rng, 2, 8, 8);
    const auto r = oracle::finite_difference_check(p, x, y);
    EXPECT_EQ(r.checked, p.parameter_count());
    EXPECT_LE(r.max_rel_error, 1e-4) << "worst layer " << r.worst_layer;
}

TEST(Backward, MatchesFiniteDifferencesDeeper) {
    Rng rng(6);
    auto p = init_params<double>(tiny(2, 3, 8, 12));
    oracle::randomize_biases(p, rng);
    const auto x = random_tensor<double>(rng, 1, 1, 8, 12, 0.0, 1.0);
    const auto y = binary_target(rng, 1, 8, 12);
    const auto r = oracle::finite_difference_check(p, x, y);
    EXPECT_LE(r.max_rel_error, 1e-4) << "worst layer " << r.worst_layer;
}

TEST(Backward, ZeroHeadBlocksUpstreamGradients) {
    Rng rng(7);
    auto p = init_params<double>(tiny());
    p.layers[p.head()].weight.fill(0.0);
    ForwardCache<double> c;
    forward(p, random_tensor<double>(rng, 1, 1, 8, 8, 0.0, 1.0), &c);
    const auto g = backward(p, c, binary_target(rng, 1, 8, 8));
    for (std::size_t i = 0; i + 1 < g.layers.size(); ++i) {
        for (double v : g.layers[i].weight.values) ASSERT_EQ(v, 0.0) << g.layers[i].spec.name;
        for (double v : g.layers[i].bias) ASSERT_EQ(v, 0.0) << g.layers[i].spec.name;
    }
    EXPECT_NE(g.layers.back().bias[0], 0.0);
}

TEST(Backward, SaturatedCorrectPixelHasZeroGradient) {
    auto cfg = tiny(0, 1, 1, 1);
    auto p = init_params<double>(cfg);
    p.layers[p.head()].bias[0] = 60.0; // sigmoid beyond 1 - eps
    ForwardCache<double> c;
    forward(p, Tensor<double>(1, 1, 1, 1, 0.3), &c);
    const auto g = backward(p, c, Tensor<double>(1, 1, 1, 1, 1.0));
    for (const auto& l : g.layers) {
        for (double v : l.weight.values) EXPECT_EQ(v, 0.0);
        for (double v : l.bias) EXPECT_EQ(v, 0.0);
    }
}

TEST(Sgd, ExactArithmetic) {
    auto p = zero_params<double>(tiny(0, 1, 2, 2));
    auto g = zeros_like(p);
    EXPECT_EQ(sgd_step(p, g, 0.1), p);
    p.layers[0].bias[0] = 1.0;
    g.layers[0].bias[0] = 0.5;
    EXPECT_DOUBLE_EQ(sgd_step(p, g, 0.1).layers[0].bias[0], 0.95);
    EXPECT_THROW(sgd_step(p, g, 0.0), InvalidArgument);
}

TEST(Sgd, StepIsMinusLrTimesGradient) {
    Rng rng(8);
    const auto p = init_params<double>(tiny());
    ForwardCache<double> c;
    forward(p, random_tensor<double>(rng, 2, 1, 8, 8, 0.0, 1.0), &c);
    const auto g = backward(p, c, binary_target(rng, 2, 8, 8));
    const auto q = sgd_step(p, g, 0.25);
    for (std::size_t i = 0; i < p.layers.size(); ++i)
        for (std::size_t k = 0; k < p.layers[i].weight.size(); ++k)
            ASSERT_EQ(q.layers[i].weight.values[k], p.layers[i].weight.values[k] - 0.25 * g.layers[i].weight.values[k]);
}

TEST(Sgd, SmallStepDoesNotIncreaseLoss) {
    Rng rng(9);
    const auto p = init_params<double>(tiny(1, 4, 8, 8));
    const auto x = random_tensor<double>(rng, 2, 1, 8, 8, 0.0, 1.0);
    const auto y = binary_target(rng, 2, 8, 8);
    ForwardCache<double> c;
    const double before = bce_loss(forward(p, x, &c), y, 1e-7);
    const auto g = backward(p, c, y);
    for (double lr : {1e-2, 1e-3}) EXPECT_LE(bce_loss(forward(sgd_step(p, g, lr), x), y, 1e-7), before) << lr;
}

TEST(Sgd, NonFiniteGradientNamesLayer) {
    auto p = init_params<float>(tiny());
    auto g = zeros_like(p);
    g.layers[p.bottleneck(1)].weight.values[3] = std::nanf("");
    try {
        sgd_update(p, g, 0.1);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("bottleneck.conv2"), std::string::npos);
    }
}
