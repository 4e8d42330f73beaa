// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document, every field defaulted, unknown keys
// rejected.
#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossan/backbones.hpp"
#include "crossan/datakit.hpp"
#include "crossan/error.hpp"
#include "crossan/fusion.hpp"
#include "crossan/model.hpp"
#include "crossan/seqrec.hpp"
#include "crossan/sidenet.hpp"
#include "crossan/train.hpp"
#include "crossan/util.hpp"

namespace crossan {

enum class StateMode { cached, on_the_fly };

struct EvalConfig {
    std::vector<int> ks{10, 20};
    std::string split = "test";
};

struct RunConfig {
    std::uint64_t seed = 0;
    SyntheticConfig dataset;
    BackboneSetConfig backbones;
    SideConfig sidenet;
    FusionConfig fusion;
    SeqEncoderConfig seqrec;
    TrainConfig train;
    StateMode mode = StateMode::cached;
    EvalConfig eval;

    ModelConfig model() const { return {sidenet, fusion, seqrec}; }

    void validate() const {
        dataset.validate();
        BackboneConfig probe = backbones.for_modality(Modality::text, 1, 1);
        probe.validate();
        sidenet.validate();
        for (auto m : sidenet.modalities)
            if (std::find(dataset.modalities.begin(), dataset.modalities.end(), m) == dataset.modalities.end())
                throw ConfigError("sidenet modality " + std::string(modality_name(m)) + " is not in the dataset");
        seqrec.validate();
        FusionConfig f = fusion;
        f.d_out = seqrec.d_hidden;
        f.validate(sidenet.modalities.size());
        train.validate_config();
        if (eval.ks.empty()) throw ConfigError("eval.ks must not be empty");
        for (int k : eval.ks)
            if (k < 1) throw ConfigError("eval.ks entries must be >= 1");
        if (eval.split != "test" && eval.split != "valid") throw ConfigError("eval.split must be 'test' or 'valid'");
    }
};

namespace detail {

class Fields {
   public:
    Fields(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
    }

    template <typename T>
    bool get(const char* key, T& out) {
        known_.insert(key);
        if (!j_.contains(key)) return false;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + where(key) + ": " + e.what());
        }
        return true;
    }

    template <typename E, typename Parse>
    void get_enum(const char* key, E& out, Parse parse) {
        std::string s;
        if (get(key, s)) out = parse(s);
    }

    void get_modalities(const char* key, std::vector<Modality>& out) {
        std::vector<std::string> names;
        if (!get(key, names)) return;
        out.clear();
        for (const auto& n : names) out.push_back(parse_modality(n));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!known_.count(k)) throw ConfigError("unknown config key '" + where(k.c_str()) + "'");
    }

   private:
    std::string where(const char* key) const { return section_.empty() ? key : section_ + "." + key; }

    const nlohmann::json& j_;
    std::string section_;
    std::set<std::string> known_;
};

inline nlohmann::json section_or_empty(const nlohmann::json& j, const char* name) {
    return j.contains(name) ? j.at(name) : nlohmann::json::object();
}

inline std::vector<std::string> names_of(const std::vector<Modality>& ms) {
    std::vector<std::string> out;
    for (auto m : ms) out.emplace_back(modality_name(m));
    return out;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::Fields top(j, "");
    top.get("seed", c.seed);
    nlohmann::json ignore;
    for (const char* s : {"dataset", "backbones", "sidenet", "fusion", "seqrec", "train", "eval"}) top.get(s, ignore);
    top.finish();

    {
        auto sj = detail::section_or_empty(j, "dataset");
        detail::Fields f(sj, "dataset");
        auto& d = c.dataset;
        f.get("num_users", d.num_users);
        f.get("num_items", d.num_items);
        f.get("latent_dim", d.latent_dim);
        f.get("min_len", d.min_len);
        f.get("max_len", d.max_len);
        f.get_modalities("modalities", d.modalities);
        f.get("noise", d.noise);
        f.get("corruption", d.corruption);
        f.get("token_count", d.token_count);
        f.get("feat_dim", d.feat_dim);
        f.get("partial_views", d.partial_views);
        f.get("drift", d.drift);
        f.get("temperature", d.temperature);
        f.get("seed", d.seed);
        f.finish();
    }
    {
        auto sj = detail::section_or_empty(j, "backbones");
        detail::Fields f(sj, "backbones");
        auto& b = c.backbones;
        f.get("num_layers", b.num_layers);
        f.get("d_model", b.d_model);
        f.get("num_heads", b.num_heads);
        f.get("ffn_mult", b.ffn_mult);
        f.get("keep_ratio", b.keep_ratio);
        f.get_enum("pooling", b.pooling, [](const std::string& s) {
            if (s == "first_token") return Pooling::first_token;
            if (s == "mean") return Pooling::mean;
            throw ConfigError("backbones.pooling must be 'first_token' or 'mean'");
        });
        f.get("seed", b.seed);
        f.finish();
    }
    {
        auto sj = detail::section_or_empty(j, "sidenet");
        detail::Fields f(sj, "sidenet");
        auto& s = c.sidenet;
        f.get_modalities("modalities", s.modalities);
        f.get("d_side", s.d_side);
        f.get("bottleneck", s.bottleneck);
        f.get_enum("variant", s.variant, parse_variant);
        f.get_enum("entry_init", s.entry_init, [](const std::string& v) {
            if (v == "random") return EntryInit::random;
            if (v == "identity") return EntryInit::identity;
            throw ConfigError("sidenet.entry_init must be 'random' or 'identity'");
        });
        f.get("prev_backbone_state", s.prev_backbone_state);
        f.finish();
    }
    {
        auto sj = detail::section_or_empty(j, "fusion");
        detail::Fields f(sj, "fusion");
        f.get_enum("method", c.fusion.method, parse_fusion);
        f.get("top_k", c.fusion.top_k);
        f.finish();
    }
    {
        auto sj = detail::section_or_empty(j, "seqrec");
        detail::Fields f(sj, "seqrec");
        auto& q = c.seqrec;
        f.get("d_hidden", q.d_hidden);
        f.get("num_blocks", q.num_blocks);
        f.get("num_heads", q.num_heads);
        f.get("max_seq_len", q.max_seq_len);
        f.get("dropout", q.dropout);
        f.finish();
    }
    {
        auto sj = detail::section_or_empty(j, "train");
        detail::Fields f(sj, "train");
        auto& t = c.train;
        f.get("lr", t.lr);
        f.get("batch_size", t.batch_size);
        f.get("max_epochs", t.max_epochs);
        f.get("patience", t.patience);
        f.get("validate", t.validate);
        f.get_enum("mode", c.mode, [](const std::string& s) {
            if (s == "cached") return StateMode::cached;
            if (s == "on_the_fly") return StateMode::on_the_fly;
            throw ConfigError("train.mode must be 'cached' or 'on_the_fly'");
        });
        f.finish();
    }
    {
        auto sj = detail::section_or_empty(j, "eval");
        detail::Fields f(sj, "eval");
        f.get("ks", c.eval.ks);
        f.get("split", c.eval.split);
        f.finish();
    }
    c.fusion.d_out = c.seqrec.d_hidden;
    c.validate();
    return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
    using nlohmann::json;
    json j;
    j["seed"] = c.seed;
    const auto& d = c.dataset;
    j["dataset"] = {{"num_users", d.num_users},     {"num_items", d.num_items},
                    {"latent_dim", d.latent_dim},   {"min_len", d.min_len},
                    {"max_len", d.max_len},         {"modalities", detail::names_of(d.modalities)},
                    {"noise", d.noise},             {"corruption", d.corruption},
                    {"token_count", d.token_count}, {"feat_dim", d.feat_dim},
                    {"partial_views", d.partial_views}, {"drift", d.drift},
                    {"temperature", d.temperature}, {"seed", d.seed}};
    const auto& b = c.backbones;
    j["backbones"] = {{"num_layers", b.num_layers}, {"d_model", b.d_model},       {"num_heads", b.num_heads}, {"ffn_mult", b.ffn_mult},
                      {"keep_ratio", b.keep_ratio}, {"pooling", b.pooling == Pooling::mean ? "mean" : "first_token"}, {"seed", b.seed}};
    const auto& s = c.sidenet;
    j["sidenet"] = {{"modalities", detail::names_of(s.modalities)},
                    {"d_side", s.d_side},
                    {"bottleneck", s.bottleneck_dim()},
                    {"variant", variant_name(s.variant)},
                    {"entry_init", s.entry_init == EntryInit::identity ? "identity" : "random"},
                    {"prev_backbone_state", s.prev_backbone_state}};
    j["fusion"] = {{"method", fusion_name(c.fusion.method)}, {"top_k", c.fusion.top_k}};
    const auto& q = c.seqrec;
    j["seqrec"] = {{"d_hidden", q.d_hidden}, {"num_blocks", q.num_blocks}, {"num_heads", q.num_heads}, {"max_seq_len", q.max_seq_len}, {"dropout", q.dropout}};
    const auto& t = c.train;
    j["train"] = {{"lr", t.lr},           {"batch_size", t.batch_size}, {"max_epochs", t.max_epochs},
                  {"patience", t.patience}, {"validate", t.validate},   {"mode", c.mode == StateMode::cached ? "cached" : "on_the_fly"}};
    j["eval"] = {{"ks", c.eval.ks}, {"split", c.eval.split}};
    return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace crossan
