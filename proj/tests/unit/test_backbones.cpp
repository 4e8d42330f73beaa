#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "common.hpp"
#include "crossan/backbones.hpp"

using namespace crossan;

namespace {

BackboneConfig small(std::uint64_t seed = 1, int layers = 4) {
    BackboneConfig c;
    c.modality = Modality::image;
    c.num_layers = layers;
    c.d_model = 16;
    c.num_heads = 2;
    c.token_count = 5;
    c.input_feat_dim = 6;
    c.seed = seed;
    return c;
}

std::vector<float> features(const BackboneConfig& c, Rng& rng) {
    std::vector<float> f(static_cast<std::size_t>(c.token_count * c.input_feat_dim));
    for (auto& v : f) v = static_cast<float>(rng.normal());
    return f;
}

}  // namespace

TEST(LayerDrop, Examples) {
    EXPECT_EQ(layerdrop_select(12, 0.5), (std::vector<int>{2, 4, 6, 8, 10, 12}));
    EXPECT_EQ(layerdrop_select(12, 1.0), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
    EXPECT_EQ(layerdrop_select(7, 0.5), (std::vector<int>{1, 3, 5, 7}));
}

TEST(LayerDrop, CountSpacingAndFinalLayer) {
    for (int n = 1; n <= 40; ++n)
        for (double r : {0.1, 0.25, 1.0 / 3.0, 0.5, 0.6, 0.75, 0.9, 1.0}) {
            auto idx = layerdrop_select(n, r);
            ASSERT_EQ(idx.size(), static_cast<std::size_t>(std::ceil(n * r - 1e-9))) << n << " " << r;
            EXPECT_EQ(idx.back(), n);
            EXPECT_GE(idx.front(), 1);
            for (std::size_t j = 1; j < idx.size(); ++j) {
                EXPECT_LT(idx[j - 1], idx[j]);
                // gaps differ by at most one layer
                const int gap = idx[j] - idx[j - 1];
                EXPECT_TRUE(gap == n / static_cast<int>(idx.size()) || gap == (n + static_cast<int>(idx.size()) - 1) / static_cast<int>(idx.size()))
                    << n << " " << r;
            }
        }
}

TEST(LayerDrop, RejectsBadArguments) {
    EXPECT_THROW(layerdrop_select(0, 0.5), ConfigError);
    EXPECT_THROW(layerdrop_select(4, 0.0), ConfigError);
    EXPECT_THROW(layerdrop_select(4, 1.5), ConfigError);
}

TEST(Backbone, SameSeedSameWeights) {
    Backbone a(small(5)), b(small(5));
    EXPECT_EQ(a.checksum(), b.checksum());
}

TEST(Backbone, SeedChangesWeights) {
    Backbone a(small(1)), b(small(2));
    EXPECT_NE(a.checksum(), b.checksum());
}

TEST(Backbone, HeadDivisibilityIsAConfigError) {
    auto c = small();
    c.num_heads = 3;
    EXPECT_THROW(Backbone{c}, ConfigError);
}

TEST(Backbone, ZeroInputGivesFiniteNonzeroStates) {
    Backbone b(small());
    std::vector<float> zero(5 * 6, 0.0f);
    auto s = b.encode(3, zero);
    EXPECT_EQ(s.item_id, 3);
    EXPECT_EQ(s.modality, Modality::image);
    for (const auto& layer : s.layers) {
        double norm = 0.0;
        for (double v : layer) {
            EXPECT_TRUE(std::isfinite(v));
            norm += v * v;
        }
        EXPECT_GT(norm, 0.0);
    }
}

TEST(Backbone, TwelveLayersKeepSixVectors) {
    auto c = small(1, 12);
    Backbone b(c);
    Rng rng(1);
    auto s = b.encode(0, features(c, rng));
    EXPECT_EQ(s.layers.size(), 6u);
    EXPECT_EQ(s.retained_indices, (std::vector<int>{2, 4, 6, 8, 10, 12}));
    for (const auto& l : s.layers) EXPECT_EQ(l.size(), 16u);
}

TEST(Backbone, EncodeIsPure) {
    auto c = small();
    Backbone b(c);
    Rng rng(2);
    auto f = features(c, rng);
    auto first = b.encode(0, f);
    // unrelated work in between must not matter
    b.encode(1, features(c, rng));
    auto again = b.encode(0, f);
    EXPECT_EQ(first.layers, again.layers);
    Backbone twin(c);
    EXPECT_EQ(twin.encode(0, f).layers, first.layers);
}

TEST(Backbone, ShapeMismatchNamesExpectedDims) {
    Backbone b(small());
    std::vector<float> f(7, 0.0f);
    try {
        b.encode(0, f);
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("5 x 6"), std::string::npos) << e.what();
    }
}

TEST(Backbone, NonFiniteInputRejected) {
    Backbone b(small());
    std::vector<float> f(30, 0.0f);
    f[4] = std::nanf("");
    EXPECT_THROW(b.encode(0, f), NumericError);
}

TEST(Backbone, FirstTokenPoolingVersusMean) {
    auto c = small();
    Rng rng(3);
    auto f = features(c, rng);
    Backbone first(c);
    c.pooling = Pooling::mean;
    Backbone mean(c);
    EXPECT_EQ(first.checksum(), mean.checksum());
    EXPECT_NE(first.encode(0, f).layers, mean.encode(0, f).layers);
}

TEST(BackboneSet, ModalitySeedsDiffer) {
    BackboneSetConfig sc;
    sc.seed = 9;
    EXPECT_NE(sc.modality_seed(Modality::text), sc.modality_seed(Modality::image));
    EXPECT_EQ(sc.modality_seed(Modality::audio), sc.modality_seed(Modality::audio));
    auto c = sc.for_modality(Modality::video, 4, 8);
    EXPECT_EQ(c.seed, sc.modality_seed(Modality::video));
    EXPECT_EQ(c.token_count, 4);
    EXPECT_EQ(c.input_feat_dim, 8);
}

TEST(BackboneSet, RejectsMismatchedRetainedCounts) {
    BackboneSet set;
    set.add(Backbone(small(1, 4)));
    auto c = small(1, 6);
    c.modality = Modality::text;
    EXPECT_THROW(set.add(Backbone(c)), ConfigError);
    EXPECT_THROW(set.at(Modality::audio), ConfigError);
}

TEST(Backbone, ConcurrentEncodeMatchesSerial) {
    auto c = small();
    Backbone b(c);
    Rng rng(4);
    std::vector<std::vector<float>> inputs;
    for (int i = 0; i < 16; ++i) inputs.push_back(features(c, rng));
    std::vector<Backbone::RowMat> serial, parallel(16);
    for (const auto& f : inputs) serial.push_back(b.encode_matrix(f));
    std::vector<std::thread> pool;
    for (int w = 0; w < 4; ++w)
        pool.emplace_back([&, w] {
            for (int i = w; i < 16; i += 4) parallel[static_cast<std::size_t>(i)] = b.encode_matrix(inputs[static_cast<std::size_t>(i)]);
        });
    for (auto& t : pool) t.join();
    for (int i = 0; i < 16; ++i) EXPECT_EQ(serial[static_cast<std::size_t>(i)], parallel[static_cast<std::size_t>(i)]);
}

TEST(Backbone, BatchedEncodeIgnoresBatchComposition) {
    for (auto pooling : {Pooling::first_token, Pooling::mean})
        for (int tokens : {3, 5, 8, 9}) {
            auto c = small(3, 3);
            c.token_count = tokens;
            c.pooling = pooling;
            Backbone b(c);
            Rng rng(5);
            std::vector<std::vector<float>> inputs;
            for (int i = 0; i < 40; ++i) inputs.push_back(features(c, rng));
            std::vector<std::span<const float>> all(inputs.begin(), inputs.end());
            std::vector<Backbone::RowMat> alone;
            for (auto f : all) alone.push_back(b.encode_matrix(f));
            for (std::size_t lo : {0u, 1u, 7u})
                for (std::size_t len : {1u, 2u, 3u, 6u, 13u, 33u}) {
                    if (lo + len > all.size()) continue;
                    const auto got = b.encode_batch(std::span(all).subspan(lo, len));
                    ASSERT_EQ(got.size(), len);
                    for (std::size_t i = 0; i < len; ++i) EXPECT_EQ(got[i], alone[lo + i]) << tokens << " " << lo << " " << len << " " << i;
                }
        }
}
