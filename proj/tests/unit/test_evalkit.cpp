#include <gtest/gtest.h>

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>

#include "common.hpp"
#include "crossan/evalkit.hpp"
#include "crossan/model.hpp"
#include "oracles.hpp"
#include "param_formula.hpp"

using namespace crossan;
using crossan::testing::sorted_rank;

namespace {

std::vector<double> gaussian(std::size_t n, Rng& rng) { return crossan::testing::randn(n, rng); }

}  // namespace

TEST(Rank, Examples) {
    EXPECT_EQ(rank_full(std::vector<double>{0.1, 0.9, 0.3}, 1), 1);
    EXPECT_EQ(rank_full(std::vector<double>{3, 2, 2}, 1), 3);
    EXPECT_EQ(rank_full(std::vector<double>(5, 0.7), 2), 5);
    EXPECT_THROW(rank_full(std::vector<double>{1, 2}, 2), RangeError);
    EXPECT_THROW(rank_full(std::vector<double>{1, 2}, -1), RangeError);
}

TEST(Metrics, Examples) {
    for (int k : {1, 5, 10, 20}) {
        EXPECT_EQ(hr_at_k(1, k), 1);
        EXPECT_EQ(ndcg_at_k(1, k), 1.0);
    }
    EXPECT_NEAR(ndcg_at_k(2, 10), 0.63093, 1e-5);
    EXPECT_EQ(hr_at_k(11, 10), 0);
    EXPECT_EQ(ndcg_at_k(11, 10), 0.0);
    EXPECT_EQ(hr_at_k(10, 10), 1);
}

TEST(Metrics, MatchSortOracleWithTies) {
    Rng rng(1);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.index(20);
        std::vector<double> s(n);
        // coarse values so ties are common
        for (auto& v : s) v = static_cast<double>(rng.index(5));
        const long target = static_cast<long>(rng.index(n));
        const long r = rank_full(s, target);
        ASSERT_EQ(r, sorted_rank(s, target));
        for (int k : {1, 3, 10}) {
            EXPECT_EQ(hr_at_k(r, k), r <= k ? 1 : 0);
            EXPECT_EQ(ndcg_at_k(r, k), r <= k ? 1.0 / std::log2(r + 1.0) : 0.0);
        }
    }
}

TEST(Metrics, SummaryAverages) {
    std::vector<RankResult> rr{{0, 0, 1, 0}, {1, 0, 2, 0}, {2, 0, 15, 0}, {3, 0, 30, 0}};
    auto s = summarize(rr, {10, 20});
    EXPECT_DOUBLE_EQ(s.hr[10], 0.5);
    EXPECT_DOUBLE_EQ(s.hr[20], 0.75);
    EXPECT_NEAR(s.ndcg[10], (1.0 + 1.0 / std::log2(3.0)) / 4.0, 1e-15);
    EXPECT_NEAR(s.ndcg[20], (1.0 + 1.0 / std::log2(3.0) + 1.0 / 4.0) / 4.0, 1e-15);
    EXPECT_EQ(s.users, 4u);
}

TEST(KsgMi, CopiedGaussianIsStronglyDependent) {
    Rng rng(2);
    auto x = gaussian(2000 * 2, rng);
    EXPECT_GE(ksg_mi(x, 2, x, 2).mi, 2.0);
}

TEST(KsgMi, IndependentGaussiansNearZero) {
    Rng rng(3);
    auto x = gaussian(2000 * 2, rng), y = gaussian(2000 * 2, rng);
    EXPECT_LE(std::abs(ksg_mi(x, 2, y, 2).mi), 0.05);
}

TEST(KsgMi, CorrelatedGaussianMatchesClosedForm) {
    Rng rng(4);
    const double rho = 0.9;
    const std::size_t n = 5000;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.normal();
        y[i] = rho * x[i] + std::sqrt(1.0 - rho * rho) * rng.normal();
    }
    const double truth = -0.5 * std::log(1.0 - rho * rho);
    EXPECT_NEAR(truth, 0.8304, 1e-4);
    EXPECT_NEAR(ksg_mi(x, 1, y, 1).mi, truth, 0.05);
}

TEST(KsgMi, SymmetricAndMonotoneInvariant) {
    Rng rng(5);
    const std::size_t n = 2000;
    std::vector<double> x(n * 2), y(n * 2);
    for (std::size_t i = 0; i < n * 2; ++i) {
        x[i] = rng.normal();
        y[i] = 0.6 * x[i] + 0.8 * rng.normal();
    }
    const double xy = ksg_mi(x, 2, y, 2).mi;
    EXPECT_NEAR(xy, ksg_mi(y, 2, x, 2).mi, 1e-9);
    auto apply = [&](auto f) {
        auto tx = x;
        for (std::size_t i = 0; i < tx.size(); ++i) tx[i] = f(tx[i], i % 2);
        return ksg_mi(tx, 2, y, 2).mi;
    };
    EXPECT_NEAR(apply([](double v, std::size_t) { return std::exp(0.5 * v); }), xy, 0.05);
    EXPECT_NEAR(apply([](double v, std::size_t) { return std::tanh(v); }), xy, 0.05);
    EXPECT_NEAR(apply([](double v, std::size_t c) { return c ? std::atan(v) : 2.0 * v + 0.1 * v * v * v; }), xy, 0.05);
}

TEST(KsgMi, DuplicatesAreJitteredAndFlagged) {
    std::vector<double> x{0, 0, 1, 2, 3, 4, 5, 6}, y{1, 2, 3, 4, 5, 6, 7, 8};
    auto r = ksg_mi(x, 1, y, 1);
    EXPECT_TRUE(r.jittered);
    EXPECT_GE(r.mi, 0.0);
    EXPECT_FALSE(ksg_mi(y, 1, y, 1).jittered);
    EXPECT_EQ(r.estimator, "KSG-1");
    EXPECT_EQ(r.samples, 8u);
}

TEST(KsgMi, TooFewSamples) {
    std::vector<double> x{1, 2, 3}, y{3, 1, 2};
    EXPECT_THROW(ksg_mi(x, 1, y, 1, 3), RangeError);
    EXPECT_THROW(ksg_mi(x, 1, std::vector<double>{1, 2}, 1), DimensionError);
}

TEST(PairedTTest, Examples) {
    std::vector<double> a{0.3, 0.5, 0.1}, b = a;
    auto r = paired_t_test(a, b);
    EXPECT_EQ(r.t, 0.0);
    EXPECT_EQ(r.p, 1.0);
    EXPECT_FALSE(r.degenerate);

    r = paired_t_test(std::vector<double>{2, 2, 2, 2}, std::vector<double>{1, 1, 1, 1});
    EXPECT_TRUE(r.degenerate);
    EXPECT_EQ(r.p, 0.0);

    r = paired_t_test(std::vector<double>{1, -1, 2, 0}, std::vector<double>{0, 0, 0, 0});
    EXPECT_NEAR(r.t, 0.7746, 1e-4);
    // two-sided p via the regularized incomplete beta: I_{v/(v+t^2)}(v/2, 1/2)
    const double v = 3.0;
    const double p = boost::math::ibeta(v / 2.0, 0.5, v / (v + r.t * r.t));
    EXPECT_NEAR(r.p, p, 1e-12);
    EXPECT_NEAR(r.p, 0.495, 5e-3);
}

TEST(PairedTTest, SwappingArgumentsNegatesT) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.index(30);
        auto a = crossan::testing::randn(n, rng), b = crossan::testing::randn(n, rng);
        auto ab = paired_t_test(a, b), ba = paired_t_test(b, a);
        EXPECT_EQ(ab.t, -ba.t);
        EXPECT_EQ(ab.p, ba.p);
        EXPECT_GE(ab.p, 0.0);
        EXPECT_LE(ab.p, 1.0);
    }
    EXPECT_THROW(paired_t_test(std::vector<double>{1}, std::vector<double>{1}), RangeError);
    EXPECT_THROW(paired_t_test(std::vector<double>{1, 2}, std::vector<double>{1}), DimensionError);
}

namespace {

ModelConfig small_model(SideVariant v, FusionMethod f, int modalities) {
    ModelConfig c;
    c.side.modalities.assign(kAllModalities.begin(), kAllModalities.begin() + modalities);
    c.side.d_side = 6;
    c.side.bottleneck = 2;
    c.side.variant = v;
    c.fusion.method = f;
    c.fusion.top_k = std::min(2, modalities);
    c.seq = SeqEncoderConfig{8, 2, 2, 5, 0.1};
    return c;
}

std::map<Modality, int> dims(const ModelConfig& c, int d) {
    std::map<Modality, int> m;
    for (auto x : c.side.modalities) m[x] = d;
    return m;
}

}  // namespace

TEST(ParamCount, MatchesClosedFormForEveryArchitecture) {
    for (auto v : {SideVariant::cross, SideVariant::independent})
        for (auto f : {FusionMethod::momef, FusionMethod::concat, FusionMethod::static_gated, FusionMethod::dynamic_gated, FusionMethod::cross_attention})
            for (int mods : {2, 4})
                for (std::size_t layers : {1u, 3u}) {
                    auto cfg = small_model(v, f, mods);
                    Model model(cfg, dims(cfg, 10), layers, 1);
                    const auto want = crossan::testing::expected_params(model.config(), 10, layers);
                    const auto got = count_trainable_params(model.params());
                    EXPECT_EQ(got.total, want.total()) << variant_name(v) << " " << fusion_name(f) << " " << mods << " " << layers;
                    EXPECT_EQ(got.by_module.at("sidenet"), want.side);
                    EXPECT_EQ(got.by_module.at("fusion"), want.fusion);
                    EXPECT_EQ(got.by_module.at("seqrec"), want.seqrec);
                    EXPECT_EQ(got.total, model.params().count_trainable());
                }
}

TEST(ParamCount, AdapterBlockExample) {
    ModelConfig cfg = small_model(SideVariant::cross, FusionMethod::momef, 2);
    cfg.side.d_side = 512;
    cfg.side.bottleneck = 128;
    Model model(cfg, dims(cfg, 4), 1, 1);
    // one block per tower
    EXPECT_EQ(count_trainable_params(model.params()).by_group.at("sidenet.adapter"), 2u * 131712u);
}

TEST(ParamCount, FrozenParametersAreNotCounted) {
    auto cfg = small_model(SideVariant::cross, FusionMethod::momef, 3);
    Model model(cfg, dims(cfg, 10), 2, 1);
    model.params().freeze_all();
    EXPECT_EQ(count_trainable_params(model.params()).total, 0u);
}
