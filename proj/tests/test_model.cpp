#include "support/gradient_cases.hpp"

#include <sleeper/model.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

using namespace sleeper;
using namespace sleeper::testing;

namespace {

class ArchGradient : public ::testing::TestWithParam<std::string> {};

} // namespace

TEST(Model, SameSeedIsBitIdentical) {
    for (const std::string name : {"convnet-s", "convnet-m", "mlp"}) {
        ArchSpec a;
        a.name = name;
        EXPECT_EQ(build_model(a, 42).params(), build_model(a, 42).params()) << name;
    }
}

TEST(Model, DifferentSeedsDifferAlmostEverywhere) {
    ArchSpec a;
    const auto p = build_model(a, 1).params().flatten();
    const auto q = build_model(a, 2).params().flatten();
    std::size_t differ = 0;
    for (std::size_t i = 0; i < p.size(); ++i) differ += p[i] != q[i];
    EXPECT_GE(static_cast<double>(differ), 0.99 * static_cast<double>(p.size()));
}

TEST(Model, MlpOutputShape) {
    ArchSpec a = tiny("mlp", 1, 8);
    a.num_classes = 4;
    const Model m = build_model(a, 3);
    const Tensor z = m.logits(Tensor(Shape{1, 1, 8, 8}));
    EXPECT_EQ(z.shape(), (Shape{1, 4}));
}

TEST(Model, ZeroHeadGivesUniformSoftmax) {
    for (const std::string name : {"convnet-s", "mlp"}) {
        ArchSpec a = tiny(name);
        a.num_classes = 5;
        Model m = build_model(a, 9);
        auto& segs = m.params().segments;
        segs[segs.size() - 2] = Tensor(segs[segs.size() - 2].shape());
        Rng rng(1);
        const Tensor x = random_tensor(rng, {3, 2, 8, 8}, 0.0, 1.0);
        const std::vector<int> labels{0, 3, 4};
        const double ce = softmax_cross_entropy(m.forward(Var::constant(x)), labels).item();
        EXPECT_NEAR(ce, std::log(5.0), 1e-12) << name;
    }
}

TEST(Model, IdenticalImagesGiveIdenticalRows) {
    const Model m = build_model(tiny("convnet-m"), 5);
    Rng rng(2);
    const Tensor one = random_tensor(rng, {1, 2, 8, 8}, 0.0, 1.0);
    Tensor batch(Shape{4, 2, 8, 8});
    for (std::size_t b = 0; b < 4; ++b)
        std::copy(one.data().begin(), one.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * one.numel()));
    const Tensor z = m.logits(batch);
    for (std::size_t b = 1; b < 4; ++b)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(z[b * 3 + c], z[c]);
}

TEST(Model, BatchPermutationPermutesOutputs) {
    const Model m = build_model(tiny("convnet-s"), 6);
    Rng rng(3);
    const Tensor x = random_tensor(rng, {5, 2, 8, 8}, 0.0, 1.0);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Tensor y(x.shape());
    const std::size_t per = 2 * 8 * 8;
    for (std::size_t b = 0; b < 5; ++b)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(perm[b] * per), per,
                    y.data().begin() + static_cast<std::ptrdiff_t>(b * per));
    const Tensor zx = m.logits(x), zy = m.logits(y);
    for (std::size_t b = 0; b < 5; ++b)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(zy[b * 3 + c], zx[perm[b] * 3 + c], 1e-12);
}

TEST(Model, InputGradientMatchesFiniteDifferences) {
    Rng rng(4);
    const Model m = generic_point(build_model(tiny("convnet-s"), 7), rng);
    const Tensor x = generic_input(m, rng, {2, 2, 8, 8});
    const std::vector<int> labels{1, 2};
    const Var xv = Var::leaf(x);
    const auto g = grad(softmax_cross_entropy(m.forward(xv), labels), xv).value();
    const auto fd = central_differences(
        [&](const std::vector<Tensor>& in) {
            NoGradGuard ng;
            return softmax_cross_entropy(m.forward(Var::constant(in[0])), labels).item();
        },
        {x}, 1e-5);
    EXPECT_LT(relative_error({g}, fd), 1e-4);
}

TEST_P(ArchGradient, EverySegmentMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(derive_seed(seed, 77));
        const Model m = generic_point(build_model(tiny(GetParam()), seed), rng);
        const Tensor x = generic_input(m, rng, {2, 2, 8, 8});
        const std::vector<int> labels{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
        const auto params = m.parameter_vars();
        const auto g = grad(softmax_cross_entropy(m.forward(Var::constant(x), params), labels), params);
        const auto fd = central_differences(
            [&](const std::vector<Tensor>& p) { return loss_under(m, x, labels, p); }, m.params().segments, 1e-5);
        for (std::size_t k = 0; k < g.size(); ++k)
            EXPECT_LT(relative_error({g[k].value()}, {fd[k]}, 1e-8), 1e-4)
                << GetParam() << " seed " << seed << " segment " << m.params().names[k];
    }
}

INSTANTIATE_TEST_SUITE_P(Architectures, ArchGradient, ::testing::Values("convnet-s", "convnet-m", "mlp"));

TEST(Model, PenultimateFeaturesAndTaps) {
    const Model m = build_model(tiny("convnet-s"), 8);
    Rng rng(5);
    const Tensor x = random_tensor(rng, {3, 2, 8, 8}, 0.0, 1.0);
    const Tensor f = m.penultimate_features(x);
    EXPECT_EQ(f.shape(), (Shape{3, 2 * 2 * 2 * 2}));
    EXPECT_EQ(f, m.penultimate_features(x));
    EXPECT_EQ(m.activations(x, m.feature_tap()), f);
    EXPECT_THROW(m.activations(x, m.layers().size() + 1), ModelError);
}

TEST(Model, RejectsWrongInputShape) {
    const Model m = build_model(tiny("convnet-s"), 1);
    try {
        m.logits(Tensor(Shape{1, 3, 8, 8}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[1,3,8,8]"), std::string::npos);
    }
}

TEST(Model, UnknownArchitecture) {
    ArchSpec a;
    a.name = "resnet-18";
    EXPECT_THROW(build_model(a, 0), ModelError);
}

TEST(Model, CheckpointRoundTrip) {
    ArchSpec a = tiny("convnet-m", 3, 8, 3);
    a.mean = {0.4, 0.5, 0.6};
    a.stddev = {0.2, 0.25, 0.3};
    Model m = build_model(a, 11);
    for (auto& s : m.params().segments)
        for (auto& v : s.data()) v += 0.125;
    const auto path = std::filesystem::temp_directory_path() / "sleeper_checkpoint_roundtrip.bin";
    save_checkpoint(path, m);
    const Model back = load_checkpoint(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.params(), m.params());
    EXPECT_EQ(back.arch().mean, a.mean);
    EXPECT_EQ(back.seed(), 11u);
    Rng rng(6);
    const Tensor x = random_tensor(rng, {2, 3, 8, 8}, 0.0, 1.0);
    EXPECT_EQ(back.logits(x), m.logits(x));
}
