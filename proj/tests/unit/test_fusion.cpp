#include <gtest/gtest.h>

#include <cmath>

#include "common.hpp"
#include "crossan/fusion.hpp"
#include "crossan/backbones.hpp"

using namespace crossan;
using crossan::testing::rand_var;

namespace {

struct Fuser {
    ParameterStore store;
    Rng rng{3};
    Fusion fusion;
    Fuser(FusionConfig c, std::size_t M, int d_side) : fusion(c, M, d_side, store, rng) {}
    void perturb(const std::string& name, double sd, std::uint64_t seed) {
        Rng r(seed);
        for (auto& v : store.at(name).node->value) v = r.normal(0.0, sd);
    }
};

FusionConfig cfg(FusionMethod m, int d_out, int k = 2) {
    FusionConfig c;
    c.method = m;
    c.d_out = d_out;
    c.top_k = k;
    return c;
}

std::vector<Var> features(std::size_t M, std::size_t n, std::size_t d, Rng& rng, bool grad = false) {
    std::vector<Var> f;
    for (std::size_t m = 0; m < M; ++m) f.push_back(rand_var({n, d}, rng, 1.0, grad));
    return f;
}

}  // namespace

TEST(MomefScores, ZeroGateIsUniform) {
    Fuser f(cfg(FusionMethod::momef, 4), 3, 5);
    Rng rng(1);
    auto s = momef_scores(features(3, 6, 5, rng), f.fusion.gate())->value;
    for (double v : s) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(MomefScores, HandTwoModalityCase) {
    Linear gate{tensor({2, 2}, {1, 0, 0, 1}), tensor({2}, {0, 0})};
    auto s = momef_scores({tensor({1, 1}, {1}), tensor({1, 1}, {2})}, gate)->value;
    const double e = std::exp(1.0);
    EXPECT_NEAR(s[0], 1.0 / (1.0 + e), 1e-15);
    EXPECT_NEAR(s[1], e / (1.0 + e), 1e-15);
    EXPECT_NEAR(s[0] + s[1], 1.0, 1e-15);
}

TEST(TopKSelect, Examples) {
    auto t = topk_select(tensor({1, 4}, {0.5, 0.3, 0.15, 0.05}), 2);
    EXPECT_EQ(t.selected[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_DOUBLE_EQ(t.weights->value[0], 0.625);
    EXPECT_DOUBLE_EQ(t.weights->value[1], 0.375);

    std::vector<double> s{0.1, 0.2, 0.3, 0.4};
    t = topk_select(tensor({1, 4}, s), 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(t.weights->value[i], s[i], 1e-15);

    t = topk_select(tensor({1, 4}, {0.25, 0.25, 0.25, 0.25}), 1);
    EXPECT_EQ(t.selected[0], (std::vector<std::size_t>{0}));
    EXPECT_EQ(t.weights->value, (std::vector<double>{1, 0, 0, 0}));
}

TEST(TopKSelect, OutOfRangeK) {
    Var s = tensor({1, 3}, {0.2, 0.3, 0.5});
    EXPECT_THROW(topk_select(s, 0), RangeError);
    EXPECT_THROW(topk_select(s, 4), RangeError);
    EXPECT_THROW(Fuser(cfg(FusionMethod::momef, 4, 4), 3, 4), ConfigError);
}

TEST(TopKSelect, TiesGoToLowerIndexAmongEqualScores) {
    auto t = topk_select(tensor({1, 5}, {0.1, 0.3, 0.1, 0.3, 0.2}), 3);
    EXPECT_EQ(t.selected[0], (std::vector<std::size_t>{1, 3, 4}));
}

TEST(MomefFuse, HandConvexCombinationWithIdentityProjection) {
    auto c = cfg(FusionMethod::momef, 2);
    c.identity_projection = true;
    Fuser f(c, 2, 2);
    auto e = momef_fuse({tensor({1, 2}, {1, 0}), tensor({1, 2}, {0, 1})}, tensor({1, 2}, {0.625, 0.375}), f.fusion.projections())->value;
    EXPECT_DOUBLE_EQ(e[0], 0.625);
    EXPECT_DOUBLE_EQ(e[1], 0.375);
}

TEST(MomefFuse, KEqualsOneGivesTheSelectedProjection) {
    Fuser f(cfg(FusionMethod::momef, 3, 1), 4, 5);
    f.perturb("fusion.gate.weight", 0.5, 11);
    Rng rng(2);
    auto x = features(4, 7, 5, rng);
    auto out = f.fusion.forward(x);
    for (std::size_t r = 0; r < 7; ++r) {
        const std::size_t m = out.selected[r][0];
        auto p = f.fusion.projections()[m](x[m])->value;
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.embedding->value[r * 3 + c], p[r * 3 + c]);
    }
}

TEST(MomefFuse, OnlySelectedExpertsMatter) {
    // routing is computed once; the fusion step must then ignore everything unselected
    Fuser f(cfg(FusionMethod::momef, 6, 2), 4, 5);
    f.perturb("fusion.gate.weight", 0.7, 12);
    f.perturb("fusion.gate.bias", 0.3, 13);
    Rng rng(3);
    const std::size_t n = 1000;
    auto x = features(4, n, 5, rng);
    auto out = f.fusion.forward(x);
    auto zeroed = x, permuted = x;
    for (auto& v : zeroed) v = tensor(v->shape, v->value);
    for (auto& v : permuted) v = tensor(v->shape, v->value);
    for (std::size_t r = 0; r < n; ++r) {
        ASSERT_EQ(out.selected[r].size(), 2u);
        int active = 0;
        double total = 0.0;
        for (std::size_t m = 0; m < 4; ++m) {
            const double w = out.weights->value[r * 4 + m];
            active += w != 0.0;
            total += w;
            if (std::find(out.selected[r].begin(), out.selected[r].end(), m) != out.selected[r].end()) continue;
            for (std::size_t c = 0; c < 5; ++c) {
                zeroed[m]->value[r * 5 + c] = 0.0;
                permuted[m]->value[r * 5 + c] = x[m]->value[((r + 17) % n) * 5 + (c + 2) % 5];
            }
        }
        EXPECT_EQ(active, 2);
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    EXPECT_EQ(momef_fuse(zeroed, out.weights, f.fusion.projections())->value, out.embedding->value);
    EXPECT_EQ(momef_fuse(permuted, out.weights, f.fusion.projections())->value, out.embedding->value);
}

TEST(MomefFuse, FullKUniformEqualsDynamicGated) {
    Rng rng(4);
    auto x = features(3, 9, 4, rng);
    Fuser momef(cfg(FusionMethod::momef, 5, 3), 3, 4), dyn(cfg(FusionMethod::dynamic_gated, 5), 3, 4);
    auto a = momef.fusion.forward(x).embedding->value, b = dyn.fusion.forward(x).embedding->value;
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(Baselines, StaticGatesStartUniform) {
    Fuser f(cfg(FusionMethod::static_gated, 3), 4, 2);
    Rng rng(5);
    auto out = f.fusion.forward(features(4, 5, 2, rng));
    for (double w : out.weights->value) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(Baselines, DynamicWithOneModalityIsItsProjection) {
    Fuser f(cfg(FusionMethod::dynamic_gated, 3), 1, 4);
    f.perturb("fusion.gate.weight", 1.0, 14);
    Rng rng(6);
    auto x = features(1, 4, 4, rng);
    auto out = f.fusion.forward(x);
    for (double w : out.weights->value) EXPECT_EQ(w, 1.0);
    EXPECT_EQ(out.embedding->value, f.fusion.projections()[0](x[0])->value);
}

TEST(Baselines, ConcatKeepsModalityOrder) {
    Fuser f(cfg(FusionMethod::concat, 6), 2, 3);
    std::vector<double> eye(36, 0.0);
    for (int i = 0; i < 6; ++i) eye[static_cast<std::size_t>(i * 6 + i)] = 1.0;
    f.store.at("fusion.concat.weight").node->value = eye;
    auto out = f.fusion.forward({tensor({1, 3}, {1, 2, 3}), tensor({1, 3}, {4, 5, 6})});
    EXPECT_EQ(out.embedding->value, (std::vector<double>{1, 2, 3, 4, 5, 6}));
    EXPECT_FALSE(out.weights);
}

TEST(CrossAttention, EqualFeaturesGiveThatFeature) {
    Fuser f(cfg(FusionMethod::cross_attention, 4), 3, 4);
    Rng rng(7);
    Var one = rand_var({2, 4}, rng, 1.0, false);
    // identical projections too, so the projected features coincide
    for (int m = 1; m < 3; ++m) {
        f.fusion.projections()[static_cast<std::size_t>(m)].weight->value = f.fusion.projections()[0].weight->value;
        f.fusion.projections()[static_cast<std::size_t>(m)].bias->value = f.fusion.projections()[0].bias->value;
    }
    auto out = f.fusion.forward({one, one, one});
    auto p = f.fusion.projections()[0](one)->value;
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(out.embedding->value[i], p[i], 1e-12);
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(out.weights->value[r * 3] + out.weights->value[r * 3 + 1] + out.weights->value[r * 3 + 2], 1.0, 1e-12);
}

TEST(CrossAttention, HandTwoModalityCase) {
    auto c = cfg(FusionMethod::cross_attention, 2);
    c.identity_projection = true;
    Fuser f(c, 2, 2);
    f.store.at("fusion.attn.query").node->value = {0.5, 0.5};
    auto out = f.fusion.forward({tensor({1, 2}, {1, 0}), tensor({1, 2}, {0, 2})});
    const double l0 = 0.5 / std::sqrt(2.0), l1 = 1.0 / std::sqrt(2.0);
    const double w0 = std::exp(l0) / (std::exp(l0) + std::exp(l1)), w1 = 1.0 - w0;
    EXPECT_NEAR(out.embedding->value[0], w0, 1e-12);
    EXPECT_NEAR(out.embedding->value[1], 2.0 * w1, 1e-12);
}

TEST(Fusion, EveryMethodIsFiniteAndPassesGradientCheck) {
    for (auto method : {FusionMethod::momef, FusionMethod::concat, FusionMethod::static_gated, FusionMethod::dynamic_gated,
                        FusionMethod::cross_attention}) {
        Fuser f(cfg(method, 3, 2), 3, 4);
        Rng prng(15);
        for (auto& p : f.store.all())
            for (auto& v : p.node->value) v += prng.normal(0.0, 0.3);
        Rng rng(8);
        auto x = features(3, 4, 4, rng, true);
        auto first = f.fusion.forward(x);
        EXPECT_TRUE(all_finite(first.embedding->value));
        EXPECT_EQ(first.embedding->shape, (Shape{4, 3}));
        std::vector<Var> inputs = x;
        for (const auto& p : f.store.all()) inputs.push_back(p.node);
        Var probe = rand_var({4, 3}, rng, 1.0, false);
        const auto* frozen = method == FusionMethod::momef ? &first.selected : nullptr;
        const double err = finite_diff_check([&] { return sum(mul(f.fusion.forward(x, frozen).embedding, probe)); }, inputs);
        EXPECT_LE(err, 1e-4) << fusion_name(method);
    }
}

TEST(Fusion, RoutingLogCsv) {
    FusionOutput out;
    out.weights = tensor({2, 3}, {0.625, 0.375, 0, 0, 0.2, 0.8});
    out.selected = {{0, 1}, {2, 1}};
    const auto csv = routing_log_csv({7, 9}, out, {Modality::text, Modality::image, Modality::audio});
    EXPECT_EQ(csv, "item_id,selected_modalities,weights\n7,text;image,0.625;0.375\n9,audio;image,0.8;0.2\n");
}

TEST(Fusion, WrongFeatureCountIsADimensionError) {
    Fuser f(cfg(FusionMethod::momef, 3), 3, 4);
    Rng rng(9);
    EXPECT_THROW(f.fusion.forward(features(2, 1, 4, rng)), DimensionError);
}
