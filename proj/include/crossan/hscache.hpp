// SPDX-License-Identifier: Apache-2.0
//
// Persistent per-item hidden-state cache. Backbones are frozen, so their
// pooled states are a pure function of (dataset, backbone seed, retained
// layers) and can be computed once and reused by every training run.
#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <exception>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "crossan/backbones.hpp"
#include "crossan/datakit.hpp"
#include "crossan/diffcore.hpp"
#include "crossan/error.hpp"
#include "crossan/util.hpp"

namespace crossan {

inline BackboneSet build_backbones(const BackboneSetConfig& cfg, const InteractionDataset& ds, const std::vector<Modality>& modalities) {
    BackboneSet set;
    for (auto m : modalities) {
        const auto& f = ds.feature(m);
        set.add(Backbone(cfg.for_modality(m, f.token_count, f.feat_dim)));
    }
    return set;
}

struct CacheKey {
    std::uint64_t dataset_hash = 0;
    std::uint64_t backbone_seed = 0;
    std::vector<int> retained;

    bool operator==(const CacheKey&) const = default;
};

inline constexpr std::uint32_t kCacheFormatVersion = 1;

inline std::filesystem::path cache_path(const std::filesystem::path& dir, Modality m) {
    return dir / ("cache_" + std::string(modality_name(m)) + ".crhc");
}

// One modality's cached states: item-major, then layer-major, float32.
class CacheFile {
   public:
    static CacheFile open(const std::filesystem::path& path, const std::optional<CacheKey>& expect = std::nullopt) {
        if (!std::filesystem::exists(path)) throw IoError("cache file not found: " + path.string());
        return parse(read_file(path), path.filename().string(), expect);
    }

    static CacheFile parse(std::string_view bytes, const std::string& what, const std::optional<CacheKey>& expect = std::nullopt) {
        ByteReader r(bytes, what);
        if (r.get_bytes(4) != "CRHC") throw FormatError(what + ": bad magic (expected CRHC)");
        if (auto v = r.get<std::uint32_t>(); v != kCacheFormatVersion) throw FormatError(what + ": unsupported cache version " + std::to_string(v));
        CacheFile c;
        c.modality_ = static_cast<Modality>(r.get<std::uint32_t>());
        if (static_cast<std::uint32_t>(c.modality_) > 3) throw FormatError(what + ": unknown modality id");
        c.d_model_ = static_cast<int>(r.get<std::uint32_t>());
        c.layers_ = static_cast<int>(r.get<std::uint32_t>());
        c.items_ = static_cast<int>(r.get<std::uint32_t>());
        c.key_.dataset_hash = r.get<std::uint64_t>();
        c.key_.backbone_seed = r.get<std::uint64_t>();
        for (int l = 0; l < c.layers_; ++l) c.key_.retained.push_back(static_cast<int>(r.get<std::uint32_t>()));
        const std::size_t n = static_cast<std::size_t>(c.items_) * static_cast<std::size_t>(c.layers_) * static_cast<std::size_t>(c.d_model_);
        if (r.remaining() != n * sizeof(float) + sizeof(std::uint64_t))
            throw FormatError(what + ": size mismatch, header declares " + std::to_string(n) + " floats plus checksum, file holds " +
                              std::to_string(r.remaining()) + " payload bytes");
        const auto payload = r.get_bytes(n * sizeof(float));
        const auto stored = r.get<std::uint64_t>();
        Fnv1a h;
        h.update(payload.data(), payload.size());
        if (h.digest() != stored) throw ChecksumError(what + ": payload checksum mismatch");
        c.data_.resize(n);
        std::memcpy(c.data_.data(), payload.data(), payload.size());
        c.checksum_ = stored;
        if (expect && !(*expect == c.key_))
            throw IntegrityError(what + ": stale cache, key (dataset " + hex64(c.key_.dataset_hash) + ", backbone seed " +
                                 hex64(c.key_.backbone_seed) + ") does not match the requested dataset/backbone/layers");
        return c;
    }

    Modality modality() const { return modality_; }
    int d_model() const { return d_model_; }
    int layer_count() const { return layers_; }
    int item_count() const { return items_; }
    const CacheKey& key() const { return key_; }
    std::uint64_t checksum() const { return checksum_; }

    // [layer_count x d_model] floats of one item.
    std::span<const float> item(int id) const {
        if (id < 0 || id >= items_)
            throw RangeError("cache lookup: item " + std::to_string(id) + " outside [0, " + std::to_string(items_) + ")");
        const std::size_t n = static_cast<std::size_t>(layers_) * static_cast<std::size_t>(d_model_);
        return {data_.data() + static_cast<std::size_t>(id) * n, n};
    }

    ModalityHiddenStates lookup(int id) const {
        auto block = item(id);
        ModalityHiddenStates s;
        s.item_id = id;
        s.modality = modality_;
        s.retained_indices = key_.retained;
        for (int l = 0; l < layers_; ++l) {
            auto row = block.subspan(static_cast<std::size_t>(l) * static_cast<std::size_t>(d_model_), static_cast<std::size_t>(d_model_));
            s.layers.emplace_back(row.begin(), row.end());
        }
        return s;
    }

    static std::string encode(Modality m, int d_model, const CacheKey& key, int item_count, std::span<const float> payload) {
        ByteWriter w;
        w.put_bytes("CRHC");
        w.put(kCacheFormatVersion);
        w.put(static_cast<std::uint32_t>(m));
        w.put(static_cast<std::uint32_t>(d_model));
        w.put(static_cast<std::uint32_t>(key.retained.size()));
        w.put(static_cast<std::uint32_t>(item_count));
        w.put(key.dataset_hash);
        w.put(key.backbone_seed);
        for (int l : key.retained) w.put(static_cast<std::uint32_t>(l));
        ByteWriter body;
        for (float v : payload) body.put(v);
        Fnv1a h;
        h.update(body.bytes().data(), body.bytes().size());
        w.put_bytes(body.bytes());
        w.put(h.digest());
        return std::move(w.bytes());
    }

   private:
    Modality modality_ = Modality::text;
    int d_model_ = 0, layers_ = 0, items_ = 0;
    CacheKey key_;
    std::vector<float> data_;
    std::uint64_t checksum_ = 0;
};

inline CacheKey cache_key_for(const Backbone& b, std::uint64_t dataset_hash) {
    return {dataset_hash, b.config().seed, b.retained()};
}

inline constexpr int kEncodeChunk = 64;  // items per batched backbone call

// Encodes every item of every modality once and writes one cache file per
// modality. Items may be sharded over `jobs` threads; the single writer
// emits them in item order, so the bytes never depend on `jobs`.
inline std::vector<std::filesystem::path> precompute_cache(const InteractionDataset& ds, const BackboneSet& backbones,
                                                           const std::vector<Modality>& modalities, const std::filesystem::path& out_dir,
                                                           int jobs = 1) {
    std::vector<std::string> missing;
    for (auto m : modalities)
        if (!ds.features.count(m)) missing.emplace_back(modality_name(m));
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
        throw IntegrityError("precompute_cache: missing feature file for modality: " + list);
    }
    std::filesystem::create_directories(out_dir);
    const auto hash = ds.content_hash();
    std::vector<std::filesystem::path> written;
    for (auto m : modalities) {
        const Backbone& b = backbones.at(m);
        const auto& f = ds.feature(m);
        const std::size_t per_item = b.retained().size() * static_cast<std::size_t>(b.config().d_model);
        std::vector<float> payload(per_item * static_cast<std::size_t>(f.item_count));
        auto work = [&](int lo, int hi) {
            for (int c = lo; c < hi; c += kEncodeChunk) {
                std::vector<std::span<const float>> chunk;
                for (int i = c; i < std::min(hi, c + kEncodeChunk); ++i) chunk.push_back(f.item(i));
                const auto states = b.encode_batch(chunk);
                for (std::size_t j = 0; j < states.size(); ++j) {
                    float* dst = payload.data() + (static_cast<std::size_t>(c) + j) * per_item;
                    for (Eigen::Index e = 0; e < states[j].size(); ++e) dst[e] = static_cast<float>(states[j].data()[e]);
                }
            }
        };
        const int workers = std::clamp(jobs, 1, std::max(1, f.item_count));
        if (workers == 1) {
            work(0, f.item_count);
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w) {
                const int lo = f.item_count * w / workers, hi = f.item_count * (w + 1) / workers;
                pool.emplace_back([&, w, lo, hi] {
                    try {
                        work(lo, hi);
                    } catch (...) {
                        errors[static_cast<std::size_t>(w)] = std::current_exception();
                    }
                });
            }
            for (auto& t : pool) t.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
        }
        const auto path = cache_path(out_dir, m);
        write_file_atomic(path, CacheFile::encode(m, b.config().d_model, cache_key_for(b, hash), f.item_count, payload));
        written.push_back(path);
    }
    return written;
}

// ---------------------------------------------------------------------------
// Hidden-state sources consumed by the side network

class HiddenStateSource {
   public:
    virtual ~HiddenStateSource() = default;
    virtual std::size_t layer_count() const = 0;
    virtual int d_model(Modality m) const = 0;
    // One untracked [items x d_model] node per retained layer.
    virtual std::vector<Var> layer_inputs(Modality m, std::span<const int> items) const = 0;
};

class CachedSource final : public HiddenStateSource {
   public:
    void add(CacheFile f) {
        if (!files_.empty() && f.layer_count() != files_.begin()->second.layer_count())
            throw ConfigError("cache files disagree on retained layer count");
        files_.insert_or_assign(f.modality(), std::move(f));
    }

    static CachedSource open_dir(const std::filesystem::path& dir, const BackboneSet& backbones, const std::vector<Modality>& modalities,
                                 std::uint64_t dataset_hash) {
        CachedSource src;
        for (auto m : modalities) {
            const auto p = cache_path(dir, m);
            if (!std::filesystem::exists(p))
                throw IoError("no hidden-state cache for modality " + std::string(modality_name(m)) + " at " + p.string() + " (run `cache` first)");
            src.add(CacheFile::open(p, cache_key_for(backbones.at(m), dataset_hash)));
        }
        return src;
    }

    const CacheFile& file(Modality m) const {
        auto it = files_.find(m);
        if (it == files_.end()) throw ConfigError("cache has no modality " + std::string(modality_name(m)));
        return it->second;
    }

    std::size_t layer_count() const override { return files_.empty() ? 0 : static_cast<std::size_t>(files_.begin()->second.layer_count()); }
    int d_model(Modality m) const override { return file(m).d_model(); }

    std::vector<Var> layer_inputs(Modality m, std::span<const int> items) const override {
        const auto& f = file(m);
        const auto L = static_cast<std::size_t>(f.layer_count());
        const auto d = static_cast<std::size_t>(f.d_model());
        std::vector<std::vector<double>> out(L, std::vector<double>(items.size() * d));
        for (std::size_t r = 0; r < items.size(); ++r) {
            auto block = f.item(items[r]);
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t c = 0; c < d; ++c) out[l][r * d + c] = static_cast<double>(block[l * d + c]);
        }
        std::vector<Var> vars;
        for (auto& v : out) vars.push_back(tensor({items.size(), d}, std::move(v)));
        return vars;
    }

   private:
    std::map<Modality, CacheFile> files_;
};

// Runs the frozen backbones for every requested item on every call.
class OnTheFlySource final : public HiddenStateSource {
   public:
    OnTheFlySource(const InteractionDataset& ds, const BackboneSet& backbones) : ds_(ds), backbones_(backbones) {}

    std::size_t layer_count() const override { return backbones_.retained_count(); }
    int d_model(Modality m) const override { return backbones_.at(m).config().d_model; }

    std::vector<Var> layer_inputs(Modality m, std::span<const int> items) const override {
        const Backbone& b = backbones_.at(m);
        const auto& f = ds_.feature(m);
        const auto L = b.retained().size();
        const auto d = static_cast<std::size_t>(b.config().d_model);
        std::vector<std::vector<double>> out(L, std::vector<double>(items.size() * d));
        for (std::size_t lo = 0; lo < items.size(); lo += kEncodeChunk) {
            const std::size_t hi = std::min(items.size(), lo + kEncodeChunk);
            std::vector<std::span<const float>> chunk;
            for (std::size_t r = lo; r < hi; ++r) {
                if (items[r] < 0 || items[r] >= f.item_count) throw RangeError("on-the-fly encode: item " + std::to_string(items[r]) + " out of range");
                chunk.push_back(f.item(items[r]));
            }
            const auto states = b.encode_batch(chunk);
            for (std::size_t r = lo; r < hi; ++r)
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t c = 0; c < d; ++c)
                        out[l][r * d + c] = states[r - lo](static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(c));
        }
        std::vector<Var> vars;
        for (auto& v : out) vars.push_back(tensor({items.size(), d}, std::move(v)));
        return vars;
    }

   private:
    const InteractionDataset& ds_;
    const BackboneSet& backbones_;
};

}  // namespace crossan
