// SPDX-License-Identifier: Apache-2.0
//
// Deterministic frozen per-modality transformer encoders. They stand in for
// pretrained modality encoders: weights come from a seed, never from training,
// and only pooled per-layer hidden states leave the encoder.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <map>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crossan/error.hpp"
#include "crossan/util.hpp"

namespace crossan {

enum class Modality : std::uint32_t { text = 0, image = 1, video = 2, audio = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {Modality::text, Modality::image, Modality::video, Modality::audio};

inline std::string_view modality_name(Modality m) {
    switch (m) {
        case Modality::text: return "text";
        case Modality::image: return "image";
        case Modality::video: return "video";
        case Modality::audio: return "audio";
    }
    return "?";
}

inline Modality parse_modality(std::string_view s) {
    for (auto m : kAllModalities)
        if (modality_name(m) == s) return m;
    throw ConfigError("unknown modality '" + std::string(s) + "' (expected text, image, video or audio)");
}

enum class Pooling { first_token, mean };

struct BackboneConfig {
    Modality modality = Modality::text;
    int num_layers = 12;
    int d_model = 256;
    int num_heads = 4;
    int token_count = 16;
    int input_feat_dim = 32;
    int ffn_mult = 4;
    double keep_ratio = 0.5;
    Pooling pooling = Pooling::first_token;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_layers < 1) throw ConfigError("backbone num_layers must be >= 1");
        if (d_model < 1 || num_heads < 1 || token_count < 1 || input_feat_dim < 1 || ffn_mult < 1)
            throw ConfigError("backbone dimensions must be positive");
        if (d_model % num_heads != 0)
            throw ConfigError("backbone d_model " + std::to_string(d_model) + " not divisible by num_heads " + std::to_string(num_heads));
        if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("layerdrop keep_ratio must be in (0, 1]");
    }
};

// Pooled hidden states of one item for one modality, one vector per retained layer.
struct ModalityHiddenStates {
    int item_id = 0;
    Modality modality = Modality::text;
    std::vector<std::vector<double>> layers;
    std::vector<int> retained_indices;
};

// ceil(num_layers * keep_ratio) layers, evenly spaced downward from the final
// layer: index_j = num_layers - ceil(j * num_layers / count), 1-indexed, ascending.
inline std::vector<int> layerdrop_select(int num_layers, double keep_ratio = 0.5) {
    if (num_layers < 1) throw ConfigError("layerdrop_select: num_layers must be >= 1");
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("layerdrop_select: keep_ratio must be in (0, 1]");
    const long count = std::max(1L, static_cast<long>(std::ceil(num_layers * keep_ratio - 1e-9)));
    std::vector<int> out;
    for (long j = count - 1; j >= 0; --j) out.push_back(num_layers - static_cast<int>((j * num_layers + count - 1) / count));
    return out;
}

class Backbone {
   public:
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    explicit Backbone(BackboneConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        retained_ = layerdrop_select(cfg_.num_layers, cfg_.keep_ratio);
        Rng rng(cfg_.seed);
        const auto d = static_cast<Eigen::Index>(cfg_.d_model);
        const auto f = d * cfg_.ffn_mult;
        const auto in = static_cast<Eigen::Index>(cfg_.input_feat_dim);
        const auto T = static_cast<Eigen::Index>(cfg_.token_count);
        const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
        auto normal = [&rng](Eigen::Index r, Eigen::Index c, double sd) {
            RowMat m(r, c);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
            return m;
        };
        w_in_ = normal(in, d, 1.0 / std::sqrt(static_cast<double>(in)));
        pos_ = normal(T, d, 0.1);
        ln_emb_ = Norm::identity(d);
        layers_.reserve(static_cast<std::size_t>(cfg_.num_layers));
        for (int l = 1; l <= cfg_.num_layers; ++l) {
            Layer L;
            L.wq = normal(d, d, sd_d);
            L.wk = normal(d, d, sd_d);
            L.wv = normal(d, d, sd_d);
            L.wo = normal(d, d, sd_d);
            L.ln1 = Norm::identity(d);
            L.w1 = normal(d, f, sd_d);
            L.b1 = Eigen::RowVectorXd::Zero(f);
            L.w2 = normal(f, d, 1.0 / std::sqrt(static_cast<double>(f)));
            L.b2 = Eigen::RowVectorXd::Zero(d);
            L.ln2 = Norm::identity(d);
            layers_.push_back(std::move(L));
        }
    }

    Backbone(const Backbone&) = delete;
    Backbone& operator=(const Backbone&) = delete;
    Backbone(Backbone&&) = default;

    const BackboneConfig& config() const { return cfg_; }
    const std::vector<int>& retained() const { return retained_; }

    // Weights are plain Eigen matrices, outside any autodiff graph: there is
    // no gradient buffer to fill. Visits (name, values) in a fixed order.
    template <typename F>
    void for_each_weight(F&& f) const {
        const std::string pre = "backbone." + std::string(modality_name(cfg_.modality)) + ".";
        f(pre + "input_proj", w_in_);
        f(pre + "pos_embed", pos_);
        f(pre + "embed_ln.gamma", ln_emb_.gamma);
        f(pre + "embed_ln.beta", ln_emb_.beta);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const Layer& L = layers_[l];
            const std::string lp = pre + "layer" + std::to_string(l + 1) + ".";
            f(lp + "wq", L.wq);
            f(lp + "wk", L.wk);
            f(lp + "wv", L.wv);
            f(lp + "wo", L.wo);
            f(lp + "ln1.gamma", L.ln1.gamma);
            f(lp + "ln1.beta", L.ln1.beta);
            f(lp + "ffn.w1", L.w1);
            f(lp + "ffn.b1", L.b1);
            f(lp + "ffn.w2", L.w2);
            f(lp + "ffn.b2", L.b2);
            f(lp + "ln2.gamma", L.ln2.gamma);
            f(lp + "ln2.beta", L.ln2.beta);
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_weight([&](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    // Hash of the live weight memory, recomputed on every call.
    std::uint64_t checksum() const {
        Fnv1a h;
        for_each_weight([&](const std::string& name, const auto& m) {
            h.update(name);
            for (Eigen::Index i = 0; i < m.size(); ++i) h.update_le(m.data()[i]);
        });
        return h.digest();
    }

    // Pooled states for the retained layers, written as rows [retained x d_model].
    RowMat encode_matrix(std::span<const float> features) const {
        const std::span<const float> one[] = {features};
        return std::move(encode_batch(one).front());
    }

    // Items are stacked as row blocks so the dense layers run as one product;
    // attention stays inside each block. An item's bits do not depend on what
    // else is in the batch: blocks are padded to a multiple of 8 rows so each
    // item fills whole column groups of Eigen's packed kernel, per-head
    // operands are copied into Eigen-owned buffers, and row reductions are
    // plain loops (Eigen's vectorized reductions change order with the row's
    // address).
    std::vector<RowMat> encode_batch(std::span<const std::span<const float>> items) const {
        const auto T = static_cast<Eigen::Index>(cfg_.token_count);
        const auto in = static_cast<Eigen::Index>(cfg_.input_feat_dim);
        const auto d = static_cast<Eigen::Index>(cfg_.d_model);
        const auto n = static_cast<Eigen::Index>(items.size());
        const Eigen::Index P = (T + 7) / 8 * 8;  // rows per item block
        RowMat x = RowMat::Zero(n * P, in);
        for (Eigen::Index b = 0; b < n; ++b) {
            const auto& features = items[static_cast<std::size_t>(b)];
            if (features.size() != static_cast<std::size_t>(T * in))
                throw DimensionError("encode: expected features [" + std::to_string(T) + " x " + std::to_string(in) + "] (" +
                                     std::to_string(T * in) + " values), got " + std::to_string(features.size()));
            for (Eigen::Index i = 0; i < T * in; ++i) {
                const double v = features[static_cast<std::size_t>(i)];
                if (!std::isfinite(v)) throw NumericError("encode: non-finite input feature");
                x.data()[b * P * in + i] = v;
            }
        }
        RowMat h;
        h.noalias() = x * w_in_;
        for (Eigen::Index b = 0; b < n; ++b) h.middleRows(b * P, T) += pos_;
        ln_emb_.apply(h);

        std::vector<RowMat> out(items.size(), RowMat(static_cast<Eigen::Index>(retained_.size()), d));
        std::size_t next = 0;
        const auto H = static_cast<Eigen::Index>(cfg_.num_heads);
        const Eigen::Index dh = d / H;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        RowMat q, k, v, qh, kh, vh, att = RowMat::Zero(n * P, d), scores(T, T), ctx(T, dh), proj, ffn;
        for (int l = 1; l <= cfg_.num_layers; ++l) {
            const Layer& L = layers_[static_cast<std::size_t>(l - 1)];
            q.noalias() = h * L.wq;
            k.noalias() = h * L.wk;
            v.noalias() = h * L.wv;
            for (Eigen::Index b = 0; b < n; ++b)
                for (Eigen::Index hd = 0; hd < H; ++hd) {
                    qh = q.block(b * P, hd * dh, T, dh);
                    kh = k.block(b * P, hd * dh, T, dh);
                    vh = v.block(b * P, hd * dh, T, dh);
                    scores.noalias() = qh * kh.transpose();
                    scores *= sc;
                    for (Eigen::Index r = 0; r < T; ++r) {
                        const double mx = scores.row(r).maxCoeff();
                        scores.row(r) = (scores.row(r).array() - mx).exp();
                        scores.row(r) /= scores.row(r).sum();
                    }
                    ctx.noalias() = scores * vh;
                    att.block(b * P, hd * dh, T, dh) = ctx;
                }
            proj.noalias() = att * L.wo;
            h += proj;
            L.ln1.apply(h);
            ffn.noalias() = h * L.w1;
            ffn.rowwise() += L.b1;
            ffn = ffn.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t * 0.70710678118654752440)); });
            proj.noalias() = ffn * L.w2;
            h += proj;
            h.rowwise() += L.b2;
            L.ln2.apply(h);
            if (next < retained_.size() && retained_[next] == l) {
                const auto r = static_cast<Eigen::Index>(next);
                for (Eigen::Index b = 0; b < n; ++b) {
                    RowMat& o = out[static_cast<std::size_t>(b)];
                    if (cfg_.pooling == Pooling::first_token) {
                        for (Eigen::Index c = 0; c < d; ++c) o(r, c) = h(b * P, c);
                    } else {
                        for (Eigen::Index c = 0; c < d; ++c) {
                            double s = 0.0;
                            for (Eigen::Index t = 0; t < T; ++t) s += h(b * P + t, c);
                            o(r, c) = s / static_cast<double>(T);
                        }
                    }
                }
                ++next;
            }
        }
        for (const auto& o : out)
            if (!o.allFinite()) throw NumericError("encode: non-finite hidden state");
        return out;
    }

    ModalityHiddenStates encode(int item_id, std::span<const float> features) const {
        RowMat m = encode_matrix(features);
        ModalityHiddenStates s;
        s.item_id = item_id;
        s.modality = cfg_.modality;
        s.retained_indices = retained_;
        for (Eigen::Index r = 0; r < m.rows(); ++r) s.layers.emplace_back(m.row(r).data(), m.row(r).data() + m.cols());
        return s;
    }

   private:
    struct Norm {
        Eigen::RowVectorXd gamma, beta;
        static Norm identity(Eigen::Index d) { return {Eigen::RowVectorXd::Ones(d), Eigen::RowVectorXd::Zero(d)}; }
        void apply(RowMat& h) const {
            const Eigen::Index d = h.cols();
            for (Eigen::Index r = 0; r < h.rows(); ++r) {
                double* row = h.data() + r * d;
                double mu = 0.0;
                for (Eigen::Index c = 0; c < d; ++c) mu += row[c];
                mu /= static_cast<double>(d);
                double var = 0.0;
                for (Eigen::Index c = 0; c < d; ++c) {
                    row[c] -= mu;
                    var += row[c] * row[c];
                }
                const double inv = 1.0 / std::sqrt(var / static_cast<double>(d) + 1e-5);
                for (Eigen::Index c = 0; c < d; ++c) row[c] = row[c] * inv * gamma[c] + beta[c];
            }
        }
    };
    struct Layer {
        RowMat wq, wk, wv, wo, w1, w2;
        Eigen::RowVectorXd b1, b2;
        Norm ln1, ln2;
    };

    BackboneConfig cfg_;
    std::vector<int> retained_;
    RowMat w_in_, pos_;
    Norm ln_emb_;
    std::vector<Layer> layers_;
};

// Run-level backbone settings shared by all modalities. Token count and input
// width come from each modality's feature file.
struct BackboneSetConfig {
    int num_layers = 12;
    int d_model = 256;
    int num_heads = 4;
    int ffn_mult = 4;
    double keep_ratio = 0.5;
    Pooling pooling = Pooling::first_token;
    std::uint64_t seed = 0;

    // Seed of one modality's weights; independent of the run seed.
    std::uint64_t modality_seed(Modality m) const { return Rng::stream(seed, "backbone." + std::string(modality_name(m))).bits(); }

    BackboneConfig for_modality(Modality m, int token_count, int feat_dim) const {
        BackboneConfig c;
        c.modality = m;
        c.num_layers = num_layers;
        c.d_model = d_model;
        c.num_heads = num_heads;
        c.token_count = token_count;
        c.input_feat_dim = feat_dim;
        c.ffn_mult = ffn_mult;
        c.keep_ratio = keep_ratio;
        c.pooling = pooling;
        c.seed = modality_seed(m);
        return c;
    }
};

class BackboneSet {
   public:
    void add(Backbone b) {
        const Modality m = b.config().modality;
        if (!items_.empty() && b.retained().size() != items_.begin()->second.retained().size())
            throw ConfigError("backbones disagree on retained layer count");
        items_.erase(m);
        items_.emplace(m, std::move(b));
    }
    const Backbone& at(Modality m) const {
        auto it = items_.find(m);
        if (it == items_.end()) throw ConfigError("no backbone for modality " + std::string(modality_name(m)));
        return it->second;
    }
    bool contains(Modality m) const { return items_.count(m) != 0; }
    std::size_t retained_count() const { return items_.empty() ? 0 : items_.begin()->second.retained().size(); }
    std::map<Modality, std::uint64_t> checksums() const {
        std::map<Modality, std::uint64_t> out;
        for (const auto& [m, b] : items_) out[m] = b.checksum();
        return out;
    }

   private:
    std::map<Modality, Backbone> items_;
};

}  // namespace crossan
