// SPDX-License-Identifier: Apache-2.0
//
// Side adapter towers, one per modality. Layer i of tower t adapts a gated
// convex mixture of the previous side states and its own backbone state:
//
//   h^t_i = Adapter^t_i( a_H * P^t_i(b^t_i) + sum_m a_m * h^m_{i-1} ),  a = softmax(gate^t_i)
//
// The cross variant mixes every tower's previous state; the independent
// variant mixes only the tower's own.
#pragma once

#include <cmath>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "crossan/backbones.hpp"
#include "crossan/diffcore.hpp"
#include "crossan/error.hpp"
#include "crossan/hscache.hpp"
#include "crossan/parameters.hpp"

namespace crossan {

enum class SideVariant { cross, independent };

inline std::string_view variant_name(SideVariant v) { return v == SideVariant::cross ? "cross" : "independent"; }

inline SideVariant parse_variant(std::string_view s) {
    if (s == "cross") return SideVariant::cross;
    if (s == "independent") return SideVariant::independent;
    throw ConfigError("unknown side variant '" + std::string(s) + "' (expected cross or independent)");
}

enum class EntryInit { random, identity };

struct SideConfig {
    std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};
    int d_side = 512;
    int bottleneck = 0;  // 0 means d_side / 4
    SideVariant variant = SideVariant::cross;
    EntryInit entry_init = EntryInit::random;
    // Sensitivity flag: side layer i reads the backbone state one retained
    // layer earlier than the default pairing.
    bool prev_backbone_state = false;

    int bottleneck_dim() const { return bottleneck > 0 ? bottleneck : std::max(1, d_side / 4); }

    void validate() const {
        if (modalities.size() < 2) throw ConfigError("side network needs at least 2 modalities");
        for (std::size_t i = 0; i < modalities.size(); ++i)
            for (std::size_t j = 0; j < i; ++j)
                if (modalities[i] == modalities[j]) throw ConfigError("duplicate modality " + std::string(modality_name(modalities[i])));
        if (d_side < 1 || bottleneck < 0) throw ConfigError("d_side and bottleneck must be positive");
    }
};

struct AdapterBlock {
    Var down, down_bias, up, up_bias;
};

struct EntryProjection {
    Var weight, bias;
};

// x [n x d_model] -> [n x d_side]
inline Var entry_project(const Var& x, const EntryProjection& p) { return add_row(matmul(x, p.weight), p.bias); }

inline Var adapter_forward(const AdapterBlock& a, const Var& x) {
    Var hidden = gelu(add_row(matmul(x, a.down), a.down_bias));
    return add(x, add_row(matmul(hidden, a.up), a.up_bias));
}

inline void require_finite(const Var& v, const std::string& what) {
    if (!all_finite(v->value)) throw NumericError(what + ": non-finite input");
}

// prev: previous side states of the mixed towers; own_backbone: already
// projected backbone state. Gate logits are ordered (H, prev...).
inline Var side_layer_mix(const std::vector<Var>& prev, const Var& own_backbone, const Var& gate_logits) {
    if (gate_logits->numel() != prev.size() + 1)
        throw DimensionError("side layer: " + std::to_string(gate_logits->numel()) + " gate logits for " + std::to_string(prev.size() + 1) + " inputs");
    require_finite(own_backbone, "side layer backbone state");
    for (const auto& p : prev) require_finite(p, "side layer previous state");
    std::vector<Var> xs{own_backbone};
    xs.insert(xs.end(), prev.begin(), prev.end());
    return weighted_sum(xs, softmax(gate_logits));
}

inline Var side_layer_forward(const std::vector<Var>& prev, const Var& own_backbone, const Var& gate_logits, const AdapterBlock& adapter) {
    return adapter_forward(adapter, side_layer_mix(prev, own_backbone, gate_logits));
}

struct SideOutput {
    std::vector<Var> final;                    // per configured modality, [n x d_side]
    std::vector<std::vector<Var>> states;      // [tower][layer 0..L]
};

class SideNet {
   public:
    SideNet(SideConfig cfg, const std::map<Modality, int>& d_model, std::size_t num_layers, ParameterStore& store, Rng& rng)
        : cfg_(std::move(cfg)), layers_(num_layers) {
        cfg_.validate();
        if (num_layers < 1) throw ConfigError("side network needs at least one layer");
        const auto ds = static_cast<std::size_t>(cfg_.d_side);
        const auto bn = static_cast<std::size_t>(cfg_.bottleneck_dim());
        const std::size_t G = cfg_.variant == SideVariant::cross ? cfg_.modalities.size() + 1 : 2;
        for (auto m : cfg_.modalities) {
            auto it = d_model.find(m);
            if (it == d_model.end()) throw ConfigError("side network: no hidden states for modality " + std::string(modality_name(m)));
            const auto dm = static_cast<std::size_t>(it->second);
            if (cfg_.entry_init == EntryInit::identity && dm != ds)
                throw ConfigError("identity entry projection needs d_model == d_side");
            Tower tower;
            for (std::size_t l = 1; l <= num_layers; ++l) {
                const std::string p = "sidenet." + std::string(modality_name(m)) + ".layer" + std::to_string(l) + ".";
                Layer L;
                if (cfg_.entry_init == EntryInit::identity) {
                    std::vector<double> eye(dm * ds, 0.0);
                    for (std::size_t i = 0; i < dm; ++i) eye[i * ds + i] = 1.0;
                    L.entry.weight = store.add(p + "entry.weight", {dm, ds}, std::move(eye));
                } else {
                    L.entry.weight = store.add_normal(p + "entry.weight", {dm, ds}, 1.0 / std::sqrt(static_cast<double>(dm)), rng);
                }
                L.entry.bias = store.add_constant(p + "entry.bias", {ds}, 0.0);
                L.adapter.down = store.add_normal(p + "adapter.down", {ds, bn}, 1.0 / std::sqrt(static_cast<double>(ds)), rng);
                L.adapter.down_bias = store.add_constant(p + "adapter.down_bias", {bn}, 0.0);
                L.adapter.up = store.add_constant(p + "adapter.up", {bn, ds}, 0.0);
                L.adapter.up_bias = store.add_constant(p + "adapter.up_bias", {ds}, 0.0);
                std::vector<double> logits(G, 0.0);
                if (cfg_.variant == SideVariant::cross) logits[0] = std::log(static_cast<double>(cfg_.modalities.size()));
                L.gate = store.add(p + "gate", {G}, std::move(logits));
                tower.push_back(std::move(L));
            }
            towers_.push_back(std::move(tower));
        }
    }

    const SideConfig& config() const { return cfg_; }
    std::size_t num_layers() const { return layers_; }
    std::size_t gate_width() const { return towers_[0][0].gate->numel(); }

    // Which retained backbone state (0-based) feeds side layer i (1-based).
    std::size_t backbone_index(std::size_t i) const {
        if (!cfg_.prev_backbone_state) return i - 1;
        return i >= 2 ? i - 2 : 0;
    }

    // inputs[t][l]: tower t's retained backbone layer l, [n x d_model].
    SideOutput forward(const std::vector<std::vector<Var>>& inputs) const {
        const std::size_t M = cfg_.modalities.size();
        if (inputs.size() != M) throw DimensionError("side forward: expected hidden states for " + std::to_string(M) + " modalities");
        for (std::size_t t = 0; t < M; ++t)
            if (inputs[t].size() != layers_)
                throw DimensionError("side forward: modality " + std::string(modality_name(cfg_.modalities[t])) + " has " +
                                     std::to_string(inputs[t].size()) + " layers, expected " + std::to_string(layers_));
        SideOutput out;
        out.states.resize(M);
        // Layer-0 state: the first retained backbone state through layer 1's entry projection.
        for (std::size_t t = 0; t < M; ++t) out.states[t].push_back(entry_project(inputs[t][0], towers_[t][0].entry));
        for (std::size_t i = 1; i <= layers_; ++i) {
            for (std::size_t t = 0; t < M; ++t) {
                const Layer& L = towers_[t][i - 1];
                Var own = i == 1 ? out.states[t][0] : entry_project(inputs[t][backbone_index(i)], L.entry);
                std::vector<Var> prev;
                if (cfg_.variant == SideVariant::cross)
                    for (std::size_t m = 0; m < M; ++m) prev.push_back(out.states[m][i - 1]);
                else
                    prev.push_back(out.states[t][i - 1]);
                out.states[t].push_back(side_layer_forward(prev, own, L.gate, L.adapter));
            }
        }
        for (std::size_t t = 0; t < M; ++t) out.final.push_back(out.states[t].back());
        return out;
    }

    SideOutput forward(const HiddenStateSource& src, std::span<const int> items) const {
        std::vector<std::vector<Var>> inputs;
        for (auto m : cfg_.modalities) inputs.push_back(src.layer_inputs(m, items));
        return forward(inputs);
    }

    const Var& gate_logits(std::size_t tower, std::size_t layer) const { return towers_.at(tower).at(layer - 1).gate; }
    const AdapterBlock& adapter(std::size_t tower, std::size_t layer) const { return towers_.at(tower).at(layer - 1).adapter; }
    const EntryProjection& entry(std::size_t tower, std::size_t layer) const { return towers_.at(tower).at(layer - 1).entry; }

    // Softmaxed gate values, ordered (H, mixed towers...).
    std::vector<double> gate_values(std::size_t tower, std::size_t layer) const { return softmax(tensor({gate_width()}, gate_logits(tower, layer)->value))->value; }

    // CSV "tower,layer,H,text,image,video,audio"; layer 0 is the bottom side layer.
    std::string gate_heatmap_csv() const {
        std::ostringstream os;
        os.precision(10);
        os << "tower,layer,H,text,image,video,audio\n";
        for (std::size_t t = 0; t < towers_.size(); ++t)
            for (std::size_t i = 1; i <= layers_; ++i) {
                auto g = gate_values(t, i);
                std::map<Modality, double> by_mod;
                if (cfg_.variant == SideVariant::cross)
                    for (std::size_t m = 0; m < cfg_.modalities.size(); ++m) by_mod[cfg_.modalities[m]] = g[m + 1];
                else
                    by_mod[cfg_.modalities[t]] = g[1];
                os << modality_name(cfg_.modalities[t]) << ',' << (i - 1) << ',' << g[0];
                for (auto m : kAllModalities) {
                    os << ',';
                    if (auto it = by_mod.find(m); it != by_mod.end()) os << it->second;
                }
                os << '\n';
            }
        return os.str();
    }

   private:
    struct Layer {
        EntryProjection entry;
        AdapterBlock adapter;
        Var gate;
    };
    using Tower = std::vector<Layer>;

    SideConfig cfg_;
    std::size_t layers_;
    std::vector<Tower> towers_;
};

}  // namespace crossan
