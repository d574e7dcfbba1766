#include "support/defense_oracles.hpp"

#include <sleeper/defenses.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

using namespace sleeper;
using namespace sleeper::testing;

namespace {

ArchSpec small_mlp() {
    ArchSpec a;
    a.name = "mlp";
    a.channels = 1;
    a.height = 8;
    a.width = 8;
    a.num_classes = 3;
    a.base_width = 2;
    return a;
}

const DatasetPair& tiny_data() {
    static const DatasetPair d = gen_synthetic(3, 20, 8, 41, 10, 1);
    return d;
}

TrainConfig short_training() {
    TrainConfig c;
    c.epochs = 2;
    c.lr_drop_epochs = {1};
    c.batch_size = 8;
    c.lr0 = 0.05;
    return c;
}

} // namespace

// ---------------------------------------------------------------------------
// Spectral Signatures

TEST(SpectralSignatures, ScoresMatchDenseSvd) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        // Tall (covariance route) and wide (Gram route) feature matrices.
        for (const auto& [n, d] : {std::pair<Eigen::Index, Eigen::Index>{60, 12}, {15, 40}}) {
            Eigen::MatrixXd f = gaussian(rng, n, d);
            f.col(0) *= 3.0; // a clear top direction
            const auto ours = spectral_scores(f);
            const auto oracle = svd_scores(f);
            EXPECT_LT(relative_l2(ours, oracle), 1e-8) << "seed " << seed << " n " << n << " d " << d;
        }
    }
}

TEST(SpectralSignatures, PlantedOutliersScoreHighest) {
    Rng rng(4);
    Eigen::MatrixXd f = gaussian(rng, 100, 20, 0.3);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(20);
    u(3) = 0.6;
    u(7) = 0.8;
    for (Eigen::Index i = 0; i < 10; ++i) f.row(i) += 4.0 * u.transpose();
    const auto r = spectral_signatures_from_features(f, iota_indices(100, 500), 2, 0.1);
    EXPECT_EQ(r.removed_indices, iota_indices(10, 500));
    EXPECT_DOUBLE_EQ(r.fraction_removed, 0.1);
}

TEST(SpectralSignatures, ZeroFractionRemovesNothing) {
    Rng rng(5);
    const auto r = spectral_signatures_from_features(gaussian(rng, 30, 5), iota_indices(30), 0, 0.0);
    EXPECT_TRUE(r.removed_indices.empty());
    EXPECT_EQ(r.scores.size(), 30u);
    EXPECT_THROW(spectral_signatures_from_features(gaussian(rng, 1, 5), iota_indices(1), 0, 0.1), DefenseError);
    EXPECT_THROW(spectral_signatures_from_features(gaussian(rng, 30, 5), iota_indices(30), 0, 1.5), DefenseError);
}

TEST(SpectralSignatures, StaysInsideClassAndFraction) {
    const auto& d = tiny_data().train;
    const Model m = build_model(small_mlp(), 3);
    for (const double frac : {0.0, 0.1, 0.33, 0.5, 1.0}) {
        const auto r = spectral_signatures(m, d, 1, frac);
        const auto cls = d.indices_of_class(1);
        EXPECT_LE(r.removed_indices.size(), static_cast<std::size_t>(std::floor(frac * static_cast<double>(cls.size()) + 1e-9)));
        for (auto i : r.removed_indices) EXPECT_EQ(d[i].label, 1);
        for (double s : r.scores) EXPECT_TRUE(std::isfinite(s));
    }
    EXPECT_DOUBLE_EQ(default_spectral_fraction(10, 250), 0.06);
}

TEST(SpectralSignatures, JsonRoundTrip) {
    Rng rng(6);
    const auto r = spectral_signatures_from_features(gaussian(rng, 20, 4), iota_indices(20, 3), 1, 0.25);
    const auto back = filter_result_from_json(json::parse(to_json(r).dump()));
    EXPECT_EQ(back.removed_indices, r.removed_indices);
    EXPECT_EQ(back.scores, r.scores);
    EXPECT_EQ(back.examined, r.examined);
    EXPECT_EQ(back.defense, "spectral-signatures");
}

// ---------------------------------------------------------------------------
// Activation Clustering

TEST(ActivationClustering, RemovesThePlantedMinorityBlob) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Eigen::MatrixXd f = gaussian(rng, 100, 30, 0.5);
        for (Eigen::Index i = 80; i < 100; ++i) f.row(i).array() += 2.0; // 20% shifted cluster
        const auto r = activation_clustering_from_features(f, iota_indices(100), 1, seed);
        ASSERT_FALSE(r.degenerate);
        std::size_t hits = 0;
        for (auto i : r.removed_indices) hits += i >= 80;
        ASSERT_FALSE(r.removed_indices.empty());
        EXPECT_GE(static_cast<double>(hits) / static_cast<double>(r.removed_indices.size()), 0.95) << "seed " << seed;
        EXPECT_EQ(hits, 20u);
    }
}

TEST(ActivationClustering, IdenticalFeaturesAreDegenerate) {
    const Eigen::MatrixXd f = Eigen::MatrixXd::Constant(25, 6, 0.7);
    const auto r = activation_clustering_from_features(f, iota_indices(25), 0, 1);
    EXPECT_TRUE(r.degenerate);
    EXPECT_TRUE(r.removed_indices.empty());
    EXPECT_DOUBLE_EQ(r.fraction_removed, 0.0);
}

TEST(ActivationClustering, LloydObjectiveNeverIncreases) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Eigen::MatrixXd x = gaussian(rng, 80, 4);
        Rng krng(seed + 100);
        const auto km = kmeans(x, 2 + seed % 3, krng);
        for (std::size_t i = 1; i < km.objective.size(); ++i)
            EXPECT_LE(km.objective[i], km.objective[i - 1] * (1.0 + 1e-12)) << "seed " << seed;
        EXPECT_LE(km.objective.size(), 100u);
    }
}

TEST(ActivationClustering, PcaKeepsTopComponents) {
    Rng rng(9);
    Eigen::MatrixXd f = gaussian(rng, 50, 15);
    const auto p = pca_project(f, 10);
    EXPECT_EQ(p.cols(), 10);
    // Component variances come out in decreasing order.
    for (Eigen::Index c = 1; c < p.cols(); ++c) EXPECT_GE(p.col(c - 1).squaredNorm(), p.col(c).squaredNorm() - 1e-9);
    EXPECT_EQ(pca_project(gaussian(rng, 6, 15), 10).cols(), 6);
}

TEST(ActivationClustering, OnModelFeaturesStaysInsideClass) {
    const auto& d = tiny_data().train;
    const auto r = activation_clustering(build_model(small_mlp(), 4), d, 2, 3);
    for (auto i : r.removed_indices) EXPECT_EQ(d[i].label, 2);
    EXPECT_EQ(r.examined, d.indices_of_class(2));
}

// ---------------------------------------------------------------------------
// STRIP

TEST(Strip, EntropyReferenceValues) {
    const std::vector<double> uniform(10, 0.37);
    EXPECT_NEAR(softmax_entropy(uniform), std::log(10.0), 1e-12);
    const std::vector<double> one_hot{1e4, 0.0, 0.0, 0.0};
    EXPECT_NEAR(softmax_entropy(one_hot), 0.0, 1e-12);
    const std::vector<double> two{0.0, std::log(3.0)}; // p = (1/4, 3/4)
    EXPECT_NEAR(softmax_entropy(two), -(0.25 * std::log(0.25) + 0.75 * std::log(0.75)), 1e-15);
    EXPECT_THROW(softmax_entropy({}), DefenseError);
}

TEST(Strip, ThresholdZeroNeverRejectsAndPoolMustBeNonEmpty) {
    const auto& d = tiny_data();
    const Model m = build_model(small_mlp(), 5);
    std::vector<Tensor> pool;
    for (std::size_t i = 0; i < 10; ++i) pool.push_back(d.val[i].image);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_FALSE(strip_detect(m, d.train[i].image, pool, 4, 0.0, 1).rejected);
    EXPECT_THROW(strip_entropy(m, d.train[0].image, std::vector<Tensor>{}, 4, 1), DefenseError);
}

TEST(Strip, DecisionIndependentOfCallOrder) {
    const auto& d = tiny_data();
    const Model m = build_model(small_mlp(), 6);
    std::vector<Tensor> pool;
    for (std::size_t i = 0; i < 12; ++i) pool.push_back(d.val[i].image);
    const double a = strip_entropy(m, d.train[3].image, pool, 5, 2);
    strip_entropy(m, d.train[9].image, pool, 5, 2);
    strip_entropy(m, d.train[1].image, pool, 5, 2);
    EXPECT_EQ(strip_entropy(m, d.train[3].image, pool, 5, 2), a);
}

TEST(Strip, QuantileCalibration) {
    EXPECT_DOUBLE_EQ(quantile({3.0, 1.0, 2.0, 5.0, 4.0}, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(quantile({3.0, 1.0, 2.0, 5.0, 4.0}, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(quantile({1.0, 2.0}, 0.01), 1.01);
    EXPECT_THROW(quantile({}, 0.5), DefenseError);
}

TEST(Strip, EvaluationCountsUndetectedHitsOnly) {
    const auto& d = tiny_data();
    const Model m = build_model(small_mlp(), 7);
    const auto [held, test] = strip_split(d.val);
    EXPECT_EQ(held.size() + test.size(), d.val.size());
    EvalConfig ec;
    ec.patch = TriggerPatch::colorful(1, 3, 3, 2);
    StripConfig sc;
    sc.n_overlays = 5;
    const auto e = strip_evaluate(m, held, test, ec, sc);
    EXPECT_LE(e.attack_success_rate_strip, e.attack_success_rate);
    EXPECT_GE(e.false_rejection_rate, 0.0);
    EXPECT_LE(e.false_rejection_rate, 1.0);
    EXPECT_EQ(strip_csv(e).substr(0, 39), "kind,index,entropy,rejected,prediction\n");
}

// ---------------------------------------------------------------------------
// Pipeline

TEST(DefensePipeline, ZeroRemovalIsANoOp) {
    const auto& d = tiny_data();
    const auto poisons = PerturbationSet::zeros(d.train, {1, 4}, 16.0 / 255.0);
    EvalConfig ec;
    ec.patch = TriggerPatch::colorful(1, 3, 3, 2);
    DefenseConfig dc;
    dc.remove_fraction = 0.0;
    const auto r = run_defense(d.train, d.val, poisons, {small_mlp(), short_training()}, ec, dc, 3);
    ASSERT_TRUE(r.filter);
    EXPECT_TRUE(r.filter->removed_indices.empty());
    EXPECT_EQ(r.before.val_acc, r.after.val_acc);
    EXPECT_EQ(r.before.attack_success_rate, r.after.attack_success_rate);
    const auto again = run_defense(d.train, d.val, poisons, {small_mlp(), short_training()}, ec, dc, 3);
    EXPECT_EQ(to_json(again).dump(), to_json(r).dump());
}

TEST(DefensePipeline, UnknownDefenseName) {
    EXPECT_THROW(defense_from_string("neural-cleanse"), DefenseError);
    EXPECT_EQ(defense_from_string("ss"), DefenseKind::spectral_signatures);
    EXPECT_EQ(to_string(defense_from_string("strip")), "strip");
}
