// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal interaction data, on-disk dataset formats, the
// leave-one-out split and the smoothed popularity table.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossan/backbones.hpp"
#include "crossan/error.hpp"
#include "crossan/log.hpp"
#include "crossan/util.hpp"

namespace crossan {

struct SyntheticConfig {
    int num_users = 2000;
    int num_items = 500;
    int latent_dim = 8;
    int min_len = 5;
    int max_len = 15;
    std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};
    std::vector<double> noise{0.1, 0.1, 0.5, 0.5};       // sigma_m
    std::vector<double> corruption{0.0, 0.0, 0.5, 0.5};  // rho_m
    int token_count = 16;
    int feat_dim = 32;
    // Each modality observes its own block of latent factors when true;
    // every modality observes all factors when false.
    bool partial_views = true;
    double drift = 0.3;  // user preference moves this far toward each consumed item
    double temperature = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_users < 1 || num_items < 1 || latent_dim < 1 || token_count < 1 || feat_dim < 1)
            throw ConfigError("dataset sizes must be positive");
        if (modalities.empty()) throw ConfigError("dataset needs at least one modality");
        if (noise.size() != modalities.size() || corruption.size() != modalities.size())
            throw ConfigError("noise and corruption need one entry per modality");
        for (double s : noise)
            if (!(s >= 0.0)) throw ConfigError("noise sigma must be >= 0");
        for (double r : corruption)
            if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("corruption fraction must be in [0, 1]");
        if (min_len < 3 || min_len > max_len || max_len > num_items)
            throw ConfigError("unsatisfiable sequence length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) +
                              "] for " + std::to_string(num_items) + " items (need 3 <= min <= max <= num_items)");
        if (!(drift >= 0.0 && drift <= 1.0)) throw ConfigError("drift must be in [0, 1]");
        if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    }
};

// Raw per-item features of one modality, item-major, each item a
// [token_count x feat_dim] row-major block.
struct FeatureMatrix {
    int item_count = 0;
    int token_count = 0;
    int feat_dim = 0;
    std::vector<float> data;

    std::span<const float> item(int i) const {
        const auto n = static_cast<std::size_t>(token_count) * static_cast<std::size_t>(feat_dim);
        return {data.data() + static_cast<std::size_t>(i) * n, n};
    }
};

struct InteractionDataset {
    std::string name = "synthetic";
    int num_items = 0;
    std::vector<Modality> modalities;
    std::vector<std::vector<int>> sequences;  // indexed by user id, chronological
    std::map<Modality, FeatureMatrix> features;
    std::map<Modality, std::vector<std::uint8_t>> corrupted;  // synthetic ground truth, optional
    std::vector<std::vector<double>> latents;                 // synthetic ground truth, not persisted
    std::uint64_t seed = 0;

    int num_users() const { return static_cast<int>(sequences.size()); }

    const FeatureMatrix& feature(Modality m) const {
        auto it = features.find(m);
        if (it == features.end()) throw IntegrityError("dataset has no features for modality " + std::string(modality_name(m)));
        return it->second;
    }

    std::uint64_t content_hash() const {
        Fnv1a h;
        h.update_le(static_cast<std::uint32_t>(num_items));
        for (auto m : modalities) h.update_le(static_cast<std::uint32_t>(m));
        h.update_le(static_cast<std::uint64_t>(sequences.size()));
        for (const auto& s : sequences) {
            h.update_le(static_cast<std::uint32_t>(s.size()));
            for (int i : s) h.update_le(static_cast<std::int32_t>(i));
        }
        for (auto m : modalities) {
            const auto& f = feature(m);
            h.update_le(static_cast<std::uint32_t>(f.token_count));
            h.update_le(static_cast<std::uint32_t>(f.feat_dim));
            h.update(f.data.data(), f.data.size() * sizeof(float));
        }
        return h.digest();
    }
};

// Latent coordinates observed by modality slot `slot` out of `count`.
inline std::vector<int> latent_view(int slot, int count, int latent_dim, bool partial) {
    std::vector<int> dims;
    if (!partial || count <= 1) {
        dims.resize(static_cast<std::size_t>(latent_dim));
        std::iota(dims.begin(), dims.end(), 0);
        return dims;
    }
    const int block = std::max(1, latent_dim / count);
    for (int k = 0; k < block; ++k) dims.push_back((slot * block + k) % latent_dim);
    return dims;
}

inline InteractionDataset generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    InteractionDataset ds;
    ds.num_items = cfg.num_items;
    ds.modalities = cfg.modalities;
    ds.seed = cfg.seed;
    const auto N = static_cast<std::size_t>(cfg.num_items);
    const auto D = static_cast<std::size_t>(cfg.latent_dim);

    Rng latent_rng = Rng::stream(cfg.seed, "data.latent");
    ds.latents.assign(N, std::vector<double>(D));
    for (auto& z : ds.latents)
        for (auto& v : z) v = latent_rng.normal();

    const auto T = static_cast<std::size_t>(cfg.token_count);
    const auto F = static_cast<std::size_t>(cfg.feat_dim);
    for (std::size_t mi = 0; mi < cfg.modalities.size(); ++mi) {
        const Modality m = cfg.modalities[mi];
        Rng rng = Rng::stream(cfg.seed, "data.features." + std::string(modality_name(m)));
        const auto view = latent_view(static_cast<int>(mi), static_cast<int>(cfg.modalities.size()), cfg.latent_dim, cfg.partial_views);
        const std::size_t V = view.size();
        std::vector<double> A(T * F * V), bias(T * F);
        for (auto& a : A) a = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(V)));
        for (auto& b : bias) b = rng.normal();

        std::vector<std::size_t> perm(N);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        const auto n_bad = static_cast<std::size_t>(std::llround(cfg.corruption[mi] * static_cast<double>(N)));
        std::vector<std::uint8_t> bad(N, 0);
        for (std::size_t i = 0; i < n_bad; ++i) bad[perm[i]] = 1;

        FeatureMatrix fm{cfg.num_items, cfg.token_count, cfg.feat_dim, std::vector<float>(N * T * F)};
        const double sigma = cfg.noise[mi];
        for (std::size_t item = 0; item < N; ++item) {
            float* out = fm.data.data() + item * T * F;
            if (bad[item]) {
                for (std::size_t e = 0; e < T * F; ++e) out[e] = static_cast<float>(rng.normal());
                continue;
            }
            const auto& z = ds.latents[item];
            for (std::size_t e = 0; e < T * F; ++e) {
                double v = bias[e];
                for (std::size_t k = 0; k < V; ++k) v += A[e * V + k] * z[static_cast<std::size_t>(view[k])];
                if (sigma > 0.0) v += sigma * rng.normal();
                out[e] = static_cast<float>(v);
            }
        }
        ds.features.emplace(m, std::move(fm));
        ds.corrupted.emplace(m, std::move(bad));
    }

    Rng user_rng = Rng::stream(cfg.seed, "data.users");
    ds.sequences.resize(static_cast<std::size_t>(cfg.num_users));
    std::vector<double> logits(N);
    std::vector<double> pref(D);
    for (auto& seq : ds.sequences) {
        for (auto& p : pref) p = user_rng.normal();
        const int len = user_rng.uniform_int(cfg.min_len, cfg.max_len);
        std::vector<std::uint8_t> taken(N, 0);
        for (int t = 0; t < len; ++t) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < N; ++j) {
                if (taken[j]) continue;
                double s = 0.0;
                for (std::size_t k = 0; k < D; ++k) s += pref[k] * ds.latents[j][k];
                logits[j] = s / cfg.temperature;
                mx = std::max(mx, logits[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < N; ++j)
                if (!taken[j]) z += (logits[j] = std::exp(logits[j] - mx));
            double u = user_rng.uniform() * z;
            std::size_t pick = N;
            for (std::size_t j = 0; j < N; ++j) {
                if (taken[j]) continue;
                pick = j;
                u -= logits[j];
                if (u <= 0.0) break;
            }
            taken[pick] = 1;
            seq.push_back(static_cast<int>(pick));
            for (std::size_t k = 0; k < D; ++k) pref[k] = (1.0 - cfg.drift) * pref[k] + cfg.drift * ds.latents[pick][k];
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Leave-one-out split

struct TrainSequence {
    int user = 0;
    std::vector<int> items;  // item t+1 is predicted from items[0..t]
};

struct HeldOutExample {
    int user = 0;
    std::vector<int> context;
    int target = 0;
};

struct SplitViews {
    std::vector<TrainSequence> train;  // users with at least one training pair
    std::vector<HeldOutExample> valid;
    std::vector<HeldOutExample> test;
    std::map<int, std::vector<int>> interacted;  // I_u: items of the user's training prefix
    int excluded_users = 0;
    long train_pairs = 0;
};

inline SplitViews split_leave_one_out(const InteractionDataset& ds) {
    SplitViews v;
    for (int u = 0; u < ds.num_users(); ++u) {
        const auto& s = ds.sequences[static_cast<std::size_t>(u)];
        if (s.size() < 3) {
            ++v.excluded_users;
            continue;
        }
        const std::size_t n = s.size();
        v.test.push_back({u, std::vector<int>(s.begin(), s.end() - 1), s[n - 1]});
        v.valid.push_back({u, std::vector<int>(s.begin(), s.end() - 2), s[n - 2]});
        std::vector<int> prefix(s.begin(), s.end() - 2);
        auto uniq = prefix;
        std::sort(uniq.begin(), uniq.end());
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        v.interacted[u] = std::move(uniq);
        if (prefix.size() >= 2) {
            v.train_pairs += static_cast<long>(prefix.size() - 1);
            v.train.push_back({u, std::move(prefix)});
        }
    }
    if (v.excluded_users > 0) log_info("split: excluded ", v.excluded_users, " users with fewer than 3 interactions");
    const long short_users = static_cast<long>(v.valid.size()) - static_cast<long>(v.train.size());
    if (short_users > 0) log_info("split: ", short_users, " users contribute only validation/test targets");
    return v;
}

// p_i = (count_i + 1) / (N + |V|) over the training prefixes.
inline std::vector<double> popularity_table(const SplitViews& views, int num_items) {
    std::vector<double> counts(static_cast<std::size_t>(num_items), 0.0);
    double total = 0.0;
    for (const auto& ex : views.valid) {
        // The training prefix is exactly the validation context.
        for (int i : ex.context) {
            counts[static_cast<std::size_t>(i)] += 1.0;
            total += 1.0;
        }
    }
    if (total == 0.0) throw ContractError("popularity_table: empty training view");
    const double denom = total + static_cast<double>(num_items);
    for (auto& c : counts) c = (c + 1.0) / denom;
    return counts;
}

// ---------------------------------------------------------------------------
// On-disk format

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

inline std::string encode_feature_file(const FeatureMatrix& f) {
    ByteWriter w;
    w.put_bytes("CRSF");
    w.put(kFeatureFormatVersion);
    w.put(static_cast<std::uint32_t>(f.item_count));
    w.put(static_cast<std::uint32_t>(f.token_count));
    w.put(static_cast<std::uint32_t>(f.feat_dim));
    for (float v : f.data) w.put(v);
    return std::move(w.bytes());
}

inline FeatureMatrix decode_feature_file(std::string_view bytes, const std::string& what) {
    ByteReader r(bytes, what);
    if (r.get_bytes(4) != "CRSF") throw FormatError(what + ": bad magic (expected CRSF)");
    if (auto v = r.get<std::uint32_t>(); v != kFeatureFormatVersion) throw FormatError(what + ": unsupported version " + std::to_string(v));
    FeatureMatrix f;
    f.item_count = static_cast<int>(r.get<std::uint32_t>());
    f.token_count = static_cast<int>(r.get<std::uint32_t>());
    f.feat_dim = static_cast<int>(r.get<std::uint32_t>());
    const std::size_t n = static_cast<std::size_t>(f.item_count) * static_cast<std::size_t>(f.token_count) * static_cast<std::size_t>(f.feat_dim);
    if (r.remaining() != n * sizeof(float))
        throw FormatError(what + ": payload has " + std::to_string(r.remaining()) + " bytes, header declares " + std::to_string(n * sizeof(float)));
    f.data.resize(n);
    for (auto& v : f.data) v = r.get<float>();
    return f;
}

inline std::filesystem::path feature_path(const std::filesystem::path& dir, Modality m) {
    return dir / ("features_" + std::string(modality_name(m)) + ".crsf");
}

inline nlohmann::json dataset_manifest(const InteractionDataset& ds) {
    nlohmann::json j;
    j["name"] = ds.name;
    j["num_users"] = ds.num_users();
    j["num_items"] = ds.num_items;
    j["modalities"] = nlohmann::json::array();
    for (auto m : ds.modalities) j["modalities"].push_back(modality_name(m));
    j["content_hash"] = hex64(ds.content_hash());
    j["seed"] = ds.seed;
    nlohmann::json bad = nlohmann::json::object();
    for (const auto& [m, mask] : ds.corrupted) {
        auto& arr = bad[std::string(modality_name(m))] = nlohmann::json::array();
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) arr.push_back(i);
    }
    j["corrupted"] = bad;
    return j;
}

inline void write_dataset(const InteractionDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string lines;
    for (int u = 0; u < ds.num_users(); ++u) {
        nlohmann::json j{{"user", u}, {"items", ds.sequences[static_cast<std::size_t>(u)]}};
        lines += j.dump() + "\n";
    }
    write_file_atomic(dir / "interactions.jsonl", lines);
    for (auto m : ds.modalities) write_file_atomic(feature_path(dir, m), encode_feature_file(ds.feature(m)));
    write_file_atomic(dir / "manifest.json", dataset_manifest(ds).dump(2) + "\n");
}

inline InteractionDataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir.string());
    InteractionDataset ds;
    std::optional<nlohmann::json> manifest;
    if (fs::exists(dir / "manifest.json")) {
        try {
            manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest.json: " + std::string(e.what()));
        }
        ds.name = manifest->value("name", std::string("dataset"));
        ds.seed = manifest->value("seed", std::uint64_t{0});
        for (const auto& m : manifest->at("modalities")) ds.modalities.push_back(parse_modality(m.get<std::string>()));
    } else {
        for (auto m : kAllModalities)
            if (fs::exists(feature_path(dir, m))) ds.modalities.push_back(m);
    }
    if (ds.modalities.empty()) throw IntegrityError("dataset " + dir.string() + " has no modality feature files");

    std::vector<std::string> missing;
    for (auto m : ds.modalities)
        if (!fs::exists(feature_path(dir, m))) missing.emplace_back(modality_name(m));
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
        throw IntegrityError("missing feature file for modality: " + list);
    }
    for (auto m : ds.modalities) {
        auto p = feature_path(dir, m);
        ds.features.emplace(m, decode_feature_file(read_file(p), p.filename().string()));
    }
    ds.num_items = ds.features.at(ds.modalities[0]).item_count;
    if (manifest) {
        const int declared = manifest->at("num_items").get<int>();
        for (const auto& [m, f] : ds.features)
            if (f.item_count != declared)
                throw FormatError("feature header mismatch: " + feature_path(dir, m).filename().string() + " declares item_count " +
                                  std::to_string(f.item_count) + ", manifest declares " + std::to_string(declared));
        ds.num_items = declared;
    }

    std::ifstream in(dir / "interactions.jsonl");
    if (!in) throw IntegrityError("missing interactions file " + (dir / "interactions.jsonl").string());
    std::string line;
    int line_no = 0;
    std::map<int, std::vector<int>> by_user;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            const int user = j.at("user").get<int>();
            auto items = j.at("items").get<std::vector<int>>();
            if (user < 0) throw FormatError("negative user id");
            for (int i : items)
                if (i < 0) throw FormatError("negative item id");
            if (by_user.count(user)) throw FormatError("duplicate user " + std::to_string(user));
            by_user[user] = std::move(items);
        } catch (const std::exception& e) {
            throw FormatError("interactions.jsonl line " + std::to_string(line_no) + ": malformed record (" + e.what() + ")");
        }
    }
    if (!by_user.empty()) ds.sequences.resize(static_cast<std::size_t>(by_user.rbegin()->first) + 1);
    for (auto& [u, items] : by_user) ds.sequences[static_cast<std::size_t>(u)] = std::move(items);

    std::vector<int> offenders;
    for (const auto& s : ds.sequences)
        for (int i : s)
            for (const auto& [m, f] : ds.features)
                if (i >= f.item_count && std::find(offenders.begin(), offenders.end(), i) == offenders.end()) offenders.push_back(i);
    if (!offenders.empty()) {
        std::sort(offenders.begin(), offenders.end());
        std::string list;
        for (std::size_t k = 0; k < std::min<std::size_t>(10, offenders.size()); ++k) list += (k ? ", " : "") + std::to_string(offenders[k]);
        throw IntegrityError("interactions reference items without features (" + std::to_string(offenders.size()) + " total), first: " + list);
    }

    if (manifest && manifest->contains("corrupted")) {
        for (const auto& [name, ids] : manifest->at("corrupted").items()) {
            auto m = parse_modality(name);
            std::vector<std::uint8_t> mask(static_cast<std::size_t>(ds.num_items), 0);
            for (const auto& id : ids) mask.at(id.get<std::size_t>()) = 1;
            ds.corrupted.emplace(m, std::move(mask));
        }
    }
    if (manifest && manifest->contains("content_hash")) {
        const auto expect = parse_hex64(manifest->at("content_hash").get<std::string>());
        if (expect != ds.content_hash()) throw IntegrityError("dataset content hash does not match manifest in " + dir.string());
    }
    return ds;
}

}  // namespace crossan
