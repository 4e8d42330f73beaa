// SPDX-License-Identifier: Apache-2.0
//
// Side network + fusion + sequential encoder behind one parameter store, and
// the checkpoint container.
#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "crossan/diffcore.hpp"
#include "crossan/error.hpp"
#include "crossan/fusion.hpp"
#include "crossan/hscache.hpp"
#include "crossan/parameters.hpp"
#include "crossan/seqrec.hpp"
#include "crossan/sidenet.hpp"

namespace crossan {

struct ModelConfig {
    SideConfig side;
    FusionConfig fusion;
    SeqEncoderConfig seq;
};

struct ItemForward {
    SideOutput side;
    FusionOutput fused;
};

class Model {
   public:
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    Model(ModelConfig cfg, const std::map<Modality, int>& d_model, std::size_t num_layers, std::uint64_t seed)
        : cfg_(normalized(std::move(cfg))), init_(Rng::stream(seed, "init")),
          side_(cfg_.side, d_model, num_layers, store_, init_),
          fusion_(cfg_.fusion, cfg_.side.modalities.size(), cfg_.side.d_side, store_, init_),
          seq_(cfg_.seq, store_, init_) {}

    Model(const ModelConfig& cfg, const HiddenStateSource& src, std::uint64_t seed)
        : Model(cfg, dims_of(cfg.side.modalities, src), src.layer_count(), seed) {}

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return store_; }
    const ParameterStore& params() const { return store_; }
    const SideNet& side() const { return side_; }
    const Fusion& fusion() const { return fusion_; }
    const SeqEncoder& encoder() const { return seq_; }

    ItemForward items(const HiddenStateSource& src, std::span<const int> ids,
                      const std::vector<std::vector<std::size_t>>* frozen_selection = nullptr) const {
        ItemForward f;
        f.side = side_.forward(src, ids);
        f.fused = fusion_.forward(f.side.final, frozen_selection);
        return f;
    }

    // Per-slot encoder states for a batch, given embeddings of its unique items.
    Var user_states(const Var& item_emb, std::span<const int> unique, const TrainBatch& b, Rng* dropout_rng, bool training) const {
        std::vector<long> rows(b.items.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (b.items[r] < 0) {
                rows[r] = -1;
                continue;
            }
            auto it = std::lower_bound(unique.begin(), unique.end(), static_cast<int>(b.items[r]));
            if (it == unique.end() || *it != b.items[r]) throw ContractError("batch item without embedding");
            rows[r] = it - unique.begin();
        }
        return seq_.forward(gather_rows(item_emb, rows), b.valid, dropout_rng, training);
    }

    struct StepOutput {
        Var loss;
        ItemForward items;
        std::vector<int> unique;
    };

    StepOutput loss(const HiddenStateSource& src, const TrainBatch& b, std::span<const double> popularity, Rng* dropout_rng,
                    bool training = true) const {
        StepOutput out;
        out.unique = b.unique_items();
        out.items = items(src, out.unique);
        Var states = user_states(out.items.fused.embedding, out.unique, b, dropout_rng, training);
        out.loss = in_batch_loss(states, out.items.fused.embedding, out.unique, b, popularity);
        return out;
    }

    // Fused embeddings of the whole catalog, [num_items x d_hidden].
    RowMat catalog(const HiddenStateSource& src, int num_items, int chunk = 256) const {
        RowMat E(num_items, cfg_.seq.d_hidden);
        for (int lo = 0; lo < num_items; lo += chunk) {
            const int hi = std::min(num_items, lo + chunk);
            std::vector<int> ids(static_cast<std::size_t>(hi - lo));
            std::iota(ids.begin(), ids.end(), lo);
            auto f = items(src, ids);
            const auto& v = f.fused.embedding->value;
            for (int r = 0; r < hi - lo; ++r)
                for (int c = 0; c < cfg_.seq.d_hidden; ++c) E(lo + r, c) = v[static_cast<std::size_t>(r * cfg_.seq.d_hidden + c)];
        }
        return E;
    }

    // Final-slot state of each context window, [n x d_hidden].
    RowMat context_states(const RowMat& catalog, std::span<const HeldOutExample> examples) const {
        TrainBatch b = make_context_batch(examples, cfg_.seq.max_seq_len);
        const auto L = b.window;
        const auto d = static_cast<std::size_t>(cfg_.seq.d_hidden);
        std::vector<double> x(b.items.size() * d, 0.0);
        for (std::size_t r = 0; r < b.items.size(); ++r)
            if (b.items[r] >= 0)
                for (std::size_t c = 0; c < d; ++c) x[r * d + c] = catalog(b.items[r], static_cast<Eigen::Index>(c));
        Var h = seq_.forward(tensor({b.items.size(), d}, std::move(x)), b.valid, nullptr, false);
        RowMat out(static_cast<Eigen::Index>(examples.size()), static_cast<Eigen::Index>(d));
        for (std::size_t u = 0; u < examples.size(); ++u)
            for (std::size_t c = 0; c < d; ++c) out(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(c)) = h->value[(u * L + L - 1) * d + c];
        return out;
    }

    std::map<std::string, std::vector<double>> snapshot() const {
        std::map<std::string, std::vector<double>> s;
        for (const auto& p : store_.all()) s[p.name] = p.node->value;
        return s;
    }

    void restore(const std::map<std::string, std::vector<double>>& s) {
        for (auto& p : store_.all()) {
            auto it = s.find(p.name);
            if (it == s.end()) throw FormatError("checkpoint lacks parameter '" + p.name + "'");
            if (it->second.size() != p.node->numel())
                throw FormatError("checkpoint parameter '" + p.name + "' has " + std::to_string(it->second.size()) + " values, model expects " +
                                  std::to_string(p.node->numel()));
            p.node->value = it->second;
        }
        if (s.size() != store_.all().size()) throw FormatError("checkpoint holds parameters this model does not have");
    }

   private:
    static ModelConfig normalized(ModelConfig c) {
        c.fusion.d_out = c.seq.d_hidden;
        return c;
    }
    static std::map<Modality, int> dims_of(const std::vector<Modality>& ms, const HiddenStateSource& src) {
        std::map<Modality, int> d;
        for (auto m : ms) d[m] = src.d_model(m);
        return d;
    }

    ModelConfig cfg_;
    ParameterStore store_;
    Rng init_;
    SideNet side_;
    Fusion fusion_;
    SeqEncoder seq_;
};

// ---------------------------------------------------------------------------
// Checkpoint: "CRCK", version, config JSON text, then per parameter
// (name, rank, dims, float64 values) in registration order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_json;
    std::vector<std::pair<std::string, Shape>> shapes;
    std::map<std::string, std::vector<double>> values;
};

inline std::string encode_checkpoint(const Model& model, const std::string& config_json) {
    ByteWriter w;
    w.put_bytes("CRCK");
    w.put(kCheckpointVersion);
    w.put_string(config_json);
    w.put(static_cast<std::uint32_t>(model.params().all().size()));
    for (const auto& p : model.params().all()) {
        w.put_string(p.name);
        w.put(static_cast<std::uint32_t>(p.node->shape.size()));
        for (auto d : p.node->shape) w.put(static_cast<std::uint64_t>(d));
        for (double v : p.node->value) w.put(v);
    }
    return std::move(w.bytes());
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const std::string& config_json) {
    write_file_atomic(path, encode_checkpoint(model, config_json));
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what) {
    ByteReader r(bytes, what);
    if (r.get_bytes(4) != "CRCK") throw FormatError(what + ": bad magic (expected CRCK)");
    if (auto v = r.get<std::uint32_t>(); v != kCheckpointVersion) throw FormatError(what + ": unsupported checkpoint version " + std::to_string(v));
    Checkpoint c;
    c.config_json = r.get_string();
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_string();
        const auto rank = r.get<std::uint32_t>();
        if (rank < 1 || rank > 2) throw FormatError(what + ": parameter '" + name + "' has rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        std::vector<double> vals(shape_numel(shape));
        for (auto& v : vals) v = r.get<double>();
        c.shapes.emplace_back(name, shape);
        c.values.emplace(std::move(name), std::move(vals));
    }
    if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after checkpoint payload");
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
    return decode_checkpoint(read_file(path), path.filename().string());
}

}  // namespace crossan
