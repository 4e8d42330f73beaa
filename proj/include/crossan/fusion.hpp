// SPDX-License-Identifier: Apache-2.0
//
// Fusion of the per-modality side outputs into one item embedding. MOMEF
// scores every modality per item, keeps the top k and mixes their projected
// features with renormalized weights.
#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "crossan/backbones.hpp"
#include "crossan/diffcore.hpp"
#include "crossan/error.hpp"
#include "crossan/parameters.hpp"

namespace crossan {

enum class FusionMethod { momef, concat, static_gated, dynamic_gated, cross_attention };

inline std::string_view fusion_name(FusionMethod m) {
    switch (m) {
        case FusionMethod::momef: return "momef";
        case FusionMethod::concat: return "concat";
        case FusionMethod::static_gated: return "static_gated";
        case FusionMethod::dynamic_gated: return "dynamic_gated";
        case FusionMethod::cross_attention: return "cross_attention";
    }
    return "?";
}

inline FusionMethod parse_fusion(std::string_view s) {
    for (auto m : {FusionMethod::momef, FusionMethod::concat, FusionMethod::static_gated, FusionMethod::dynamic_gated, FusionMethod::cross_attention})
        if (fusion_name(m) == s) return m;
    throw ConfigError("unknown fusion method '" + std::string(s) + "'");
}

struct FusionConfig {
    FusionMethod method = FusionMethod::momef;
    int top_k = 2;
    int d_out = 64;
    bool identity_projection = false;  // needs d_side == d_out

    void validate(std::size_t num_modalities) const {
        if (d_out < 1) throw ConfigError("fusion d_out must be positive");
        if (method == FusionMethod::momef && (top_k < 1 || static_cast<std::size_t>(top_k) > num_modalities))
            throw ConfigError("top_k=" + std::to_string(top_k) + " outside [1, " + std::to_string(num_modalities) + "]");
    }
};

struct Linear {
    Var weight, bias;
    Var operator()(const Var& x) const { return add_row(matmul(x, weight), bias); }
};

// Affine gating over the concatenated features, softmaxed per item.
inline Var momef_scores(const std::vector<Var>& features, const Linear& gate) { return softmax(gate(concat_cols(features))); }

inline TopK topk_select(const Var& scores, int k) {
    if (k < 1) throw RangeError("top-k: k must be >= 1, got " + std::to_string(k));
    return topk_renormalize(scores, static_cast<std::size_t>(k));
}

// Sum over modalities of weight * proj_m(f_m). Zero weights skip their term,
// so features outside the selection never reach the output.
inline Var momef_fuse(const std::vector<Var>& features, const Var& weights, const std::vector<Linear>& proj) {
    if (features.size() != proj.size()) throw DimensionError("momef_fuse: feature and projection counts differ");
    std::vector<Var> projected;
    for (std::size_t m = 0; m < features.size(); ++m) projected.push_back(proj[m](features[m]));
    return row_weighted_sum(projected, weights);
}

struct FusionOutput {
    Var embedding;                                   // [n x d_out]
    Var weights;                                     // [n x M]; null for concat
    std::vector<std::vector<std::size_t>> selected;  // momef only
};

class Fusion {
   public:
    Fusion(FusionConfig cfg, std::size_t num_modalities, int d_side, ParameterStore& store, Rng& rng)
        : cfg_(cfg), M_(num_modalities) {
        cfg_.validate(M_);
        const auto ds = static_cast<std::size_t>(d_side);
        const auto dout = static_cast<std::size_t>(cfg_.d_out);
        if (cfg_.method == FusionMethod::concat) {
            concat_.weight = store.add_normal("fusion.concat.weight", {M_ * ds, dout}, 1.0 / std::sqrt(static_cast<double>(M_ * ds)), rng);
            concat_.bias = store.add_constant("fusion.concat.bias", {dout}, 0.0);
            return;
        }
        if (cfg_.identity_projection && ds != dout) throw ConfigError("identity fusion projection needs d_side == d_out");
        for (std::size_t m = 0; m < M_; ++m) {
            const std::string p = "fusion.proj" + std::to_string(m) + ".";
            Linear L;
            if (cfg_.identity_projection) {
                std::vector<double> eye(ds * dout, 0.0);
                for (std::size_t i = 0; i < ds; ++i) eye[i * dout + i] = 1.0;
                L.weight = store.add(p + "weight", {ds, dout}, std::move(eye));
            } else {
                L.weight = store.add_normal(p + "weight", {ds, dout}, 1.0 / std::sqrt(static_cast<double>(ds)), rng);
            }
            L.bias = store.add_constant(p + "bias", {dout}, 0.0);
            proj_.push_back(L);
        }
        switch (cfg_.method) {
            case FusionMethod::momef:
            case FusionMethod::dynamic_gated:
                gate_.weight = store.add_constant("fusion.gate.weight", {M_ * ds, M_}, 0.0);
                gate_.bias = store.add_constant("fusion.gate.bias", {M_}, 0.0);
                break;
            case FusionMethod::static_gated: static_logits_ = store.add_constant("fusion.static.logits", {M_}, 0.0); break;
            case FusionMethod::cross_attention:
                query_ = store.add_normal("fusion.attn.query", {dout, 1}, 1.0 / std::sqrt(static_cast<double>(dout)), rng);
                break;
            case FusionMethod::concat: break;
        }
    }

    const FusionConfig& config() const { return cfg_; }
    const std::vector<Linear>& projections() const { return proj_; }
    const Linear& gate() const { return gate_; }

    // `frozen_selection` pins the MOMEF top-k mask (gradient checks).
    FusionOutput forward(const std::vector<Var>& f, const std::vector<std::vector<std::size_t>>* frozen_selection = nullptr) const {
        if (f.size() != M_) throw DimensionError("fusion: expected " + std::to_string(M_) + " modality features, got " + std::to_string(f.size()));
        FusionOutput out;
        switch (cfg_.method) {
            case FusionMethod::momef: {
                Var scores = momef_scores(f, gate_);
                if (frozen_selection) {
                    out.selected = *frozen_selection;
                    out.weights = renormalize_selection(scores, out.selected);
                } else {
                    auto top = topk_select(scores, cfg_.top_k);
                    out.selected = std::move(top.selected);
                    out.weights = top.weights;
                }
                out.embedding = momef_fuse(f, out.weights, proj_);
                break;
            }
            case FusionMethod::concat: out.embedding = concat_(concat_cols(f)); break;
            case FusionMethod::static_gated: {
                Var w = softmax(static_logits_);
                out.embedding = weighted_sum(project(f), w);
                // Same weights for every item.
                std::vector<double> rows;
                for (std::size_t r = 0; r < f[0]->rows(); ++r) rows.insert(rows.end(), w->value.begin(), w->value.end());
                out.weights = tensor({f[0]->rows(), M_}, std::move(rows));
                break;
            }
            case FusionMethod::dynamic_gated:
                out.weights = momef_scores(f, gate_);
                out.embedding = row_weighted_sum(project(f), out.weights);
                break;
            case FusionMethod::cross_attention: {
                auto P = project(f);
                std::vector<Var> logits;
                for (const auto& p : P) logits.push_back(matmul(p, query_));
                out.weights = softmax(scale(concat_cols(logits), 1.0 / std::sqrt(static_cast<double>(cfg_.d_out))));
                out.embedding = row_weighted_sum(P, out.weights);
                break;
            }
        }
        return out;
    }

   private:
    std::vector<Var> project(const std::vector<Var>& f) const {
        std::vector<Var> out;
        for (std::size_t m = 0; m < M_; ++m) out.push_back(proj_[m](f[m]));
        return out;
    }

    FusionConfig cfg_;
    std::size_t M_;
    std::vector<Linear> proj_;
    Linear gate_, concat_;
    Var static_logits_, query_;
};

// CSV "item_id,selected_modalities,weights"; lists are ';'-separated in selection order.
inline std::string routing_log_csv(const std::vector<int>& items, const FusionOutput& out, const std::vector<Modality>& modalities) {
    std::ostringstream os;
    os.precision(10);
    os << "item_id,selected_modalities,weights\n";
    const std::size_t M = modalities.size();
    for (std::size_t r = 0; r < items.size(); ++r) {
        os << items[r] << ',';
        std::vector<std::size_t> sel;
        if (!out.selected.empty()) sel = out.selected[r];
        else
            for (std::size_t m = 0; m < M; ++m) sel.push_back(m);
        for (std::size_t i = 0; i < sel.size(); ++i) os << (i ? ";" : "") << modality_name(modalities[sel[i]]);
        os << ',';
        for (std::size_t i = 0; i < sel.size(); ++i) {
            os << (i ? ";" : "");
            if (out.weights) os << out.weights->value[r * M + sel[i]];
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace crossan
