// SPDX-License-Identifier: Apache-2.0
//
// Single-binary driver. Subcommands: gen-data, cache, train, eval, ablate,
// mi, heatmap. Exit codes: 0 ok, 1 bad input, 2 runtime failure.
//
// Needs CLI11.hpp on the include path; only the executable includes this.
#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crossan/experiment.hpp"

namespace crossan::cli {

namespace fs = std::filesystem;

struct Options {
    std::string config, data, out, checkpoint, split, grid, cache;
    std::vector<std::string> checkpoints;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    int mi_k = 3;
};

inline RunConfig resolve_config(const Options& o) {
    RunConfig cfg = o.config.empty() ? run_config_from_json(nlohmann::json::object()) : load_run_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    return cfg;
}

inline void require(const std::string& value, const char* flag, const char* cmd) {
    if (value.empty()) throw ConfigError(std::string(cmd) + " requires " + flag);
}

inline fs::path cache_dir_for(const Options& o) { return o.cache.empty() ? default_cache_dir(o.data) : fs::path(o.cache); }

inline int cmd_gen_data(const Options& o) {
    require(o.out, "--out", "gen-data");
    RunConfig cfg = resolve_config(o);
    if (o.seed) cfg.dataset.seed = *o.seed;
    const auto ds = generate_synthetic(cfg.dataset);
    write_dataset(ds, o.out);
    std::cout << dataset_manifest(ds).dump(2) << '\n';
    return 0;
}

inline int cmd_cache(const Options& o) {
    require(o.data, "--data", "cache");
    const RunConfig cfg = resolve_config(o);
    const auto ds = load_dataset(o.data);
    const fs::path out = o.out.empty() ? default_cache_dir(o.data) : fs::path(o.out);
    const auto backbones = build_backbones(cfg.backbones, ds, cfg.sidenet.modalities);
    for (const auto& p : precompute_cache(ds, backbones, cfg.sidenet.modalities, out, o.jobs)) std::cout << p.string() << '\n';
    return 0;
}

inline int cmd_train(const Options& o) {
    require(o.data, "--data", "train");
    require(o.out, "--out", "train");
    const RunConfig cfg = resolve_config(o);
    const auto data = prepare(load_dataset(o.data));
    const auto stack = make_states(cfg, data, cfg.mode, cache_dir_for(o), false);
    const auto r = run_train_eval(cfg, data, *stack.source, o.out);
    std::cout << r.metrics.dump(2) << '\n';
    return 0;
}

inline int cmd_eval(const Options& o) {
    require(o.checkpoint, "--checkpoint", "eval");
    require(o.data, "--data", "eval");
    const auto ck = load_checkpoint(o.checkpoint);
    RunConfig cfg = run_config_from_json(nlohmann::json::parse(ck.config_json));
    if (!o.split.empty()) cfg.eval.split = o.split;
    cfg.validate();
    const auto data = prepare(load_dataset(o.data));
    const auto stack = make_states(cfg, data, cfg.mode, cache_dir_for(o), false);
    auto [_, model] = model_from_checkpoint(ck, *stack.source);
    const auto ev = evaluate(*model, *stack.source, split_examples(data, cfg.eval.split), data.ds.num_items, cfg.eval.ks);
    const fs::path out = o.out.empty() ? fs::path(o.checkpoint).parent_path() / ("eval_" + cfg.eval.split) : fs::path(o.out);
    fs::create_directories(out);
    const auto metrics = metrics_json(cfg, data.hash, ev, "per_user.csv");
    write_file_atomic(out / "per_user.csv", per_user_csv(ev, cfg.eval.ks));
    write_file_atomic(out / "metrics.json", metrics.dump(2) + "\n");
    std::cout << metrics.dump(2) << '\n';
    return 0;
}

inline int cmd_ablate(const Options& o) {
    require(o.data, "--data", "ablate");
    require(o.grid, "--grid", "ablate");
    require(o.out, "--out", "ablate");
    const RunConfig base = resolve_config(o);
    if (!fs::exists(o.grid)) throw ConfigError("grid file not found: " + o.grid);
    nlohmann::json gj;
    try {
        gj = nlohmann::json::parse(read_file(o.grid));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("grid " + o.grid + " is not valid JSON: " + e.what());
    }
    const auto grid = ablation_grid_from_json(gj, base);
    const auto data = prepare(load_dataset(o.data));
    const auto res = ablate(base, grid, data, cache_dir_for(o), o.out, o.jobs);
    std::cout << res.csv;
    if (grid.compare != "none") std::cout << '\n' << res.ttest_csv;
    return 0;
}

inline int cmd_mi(const Options& o) {
    require(o.data, "--data", "mi");
    if (o.checkpoints.empty()) throw ConfigError("mi requires at least one --checkpoint");
    const auto data = prepare(load_dataset(o.data));
    nlohmann::json report;
    report["dataset_hash"] = hex64(data.hash);
    report["k"] = o.mi_k;
    report["estimator"] = "ksg1";
    std::map<std::string, double> by_variant;
    for (const auto& path : o.checkpoints) {
        const auto ck = load_checkpoint(path);
        const RunConfig cfg = run_config_from_json(nlohmann::json::parse(ck.config_json));
        const auto stack = make_states(cfg, data, cfg.mode, cache_dir_for(o), false);
        auto [_, model] = model_from_checkpoint(ck, *stack.source);
        const auto mi = tower_mi(*model, *stack.source, data.ds.num_items, o.mi_k);
        report["models"].push_back({{"checkpoint", path}, {"variant", variant_name(cfg.sidenet.variant)}, {"mi_nats", mi.mi}, {"samples", mi.samples}});
        by_variant[std::string(variant_name(cfg.sidenet.variant))] = mi.mi;
    }
    if (by_variant.count("cross") && by_variant.count("independent"))
        report["cross_minus_independent"] = by_variant["cross"] - by_variant["independent"];
    const std::string text = report.dump(2) + "\n";
    if (!o.out.empty()) write_file_atomic(o.out, text);
    std::cout << text;
    return 0;
}

inline int cmd_heatmap(const Options& o) {
    require(o.checkpoint, "--checkpoint", "heatmap");
    const auto ck = load_checkpoint(o.checkpoint);
    const RunConfig cfg = run_config_from_json(nlohmann::json::parse(ck.config_json));
    std::map<Modality, int> dims;
    for (auto m : cfg.sidenet.modalities) dims[m] = cfg.backbones.d_model;
    const int layers = static_cast<int>(layerdrop_select(cfg.backbones.num_layers, cfg.backbones.keep_ratio).size());
    Model model(cfg.model(), dims, layers, cfg.seed);
    model.restore(ck.values);
    const std::string csv = model.side().gate_heatmap_csv();
    if (!o.out.empty()) write_file_atomic(o.out, csv);
    else std::cout << csv;
    return 0;
}

inline int run(int argc, char** argv) {
    CLI::App app{"crossan: side-adapter multimodal sequential recommendation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", CROSSAN_VERSION);
    Options o;
    std::uint64_t seed = 0;

    auto add_seed = [&](CLI::App* c) { c->add_option("--seed", seed, "Run seed (overrides the config)"); };
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multimodal dataset");
    gen->add_option("--config", o.config, "Run config JSON");
    gen->add_option("--out", o.out, "Output dataset directory");
    add_seed(gen);

    auto* cache = app.add_subcommand("cache", "Precompute frozen-backbone hidden states");
    cache->add_option("--config", o.config, "Run config JSON");
    cache->add_option("--data", o.data, "Dataset directory");
    cache->add_option("--out", o.out, "Cache directory (default DATA/cache)");
    cache->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

    auto* train_cmd = app.add_subcommand("train", "Train and evaluate one model");
    train_cmd->add_option("--config", o.config, "Run config JSON");
    train_cmd->add_option("--data", o.data, "Dataset directory");
    train_cmd->add_option("--cache", o.cache, "Cache directory (default DATA/cache)");
    train_cmd->add_option("--out", o.out, "Run directory");
    add_seed(train_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the full catalog");
    eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
    eval_cmd->add_option("--data", o.data, "Dataset directory");
    eval_cmd->add_option("--cache", o.cache, "Cache directory (default DATA/cache)");
    eval_cmd->add_option("--split", o.split, "test or valid")->check(CLI::IsMember({"test", "valid"}));
    eval_cmd->add_option("--out", o.out, "Output directory");

    auto* abl = app.add_subcommand("ablate", "Run an ablation grid");
    abl->add_option("--config", o.config, "Base run config JSON");
    abl->add_option("--grid", o.grid, "Grid JSON");
    abl->add_option("--data", o.data, "Dataset directory");
    abl->add_option("--cache", o.cache, "Cache directory (default DATA/cache)");
    abl->add_option("--out", o.out, "Output directory");
    abl->add_option("--jobs", o.jobs, "Cells run in parallel")->check(CLI::PositiveNumber);
    add_seed(abl);

    auto* mi = app.add_subcommand("mi", "Text/image tower mutual information (KSG)");
    mi->add_option("--checkpoint", o.checkpoints, "Checkpoint file (repeatable)");
    mi->add_option("--data", o.data, "Dataset directory");
    mi->add_option("--cache", o.cache, "Cache directory (default DATA/cache)");
    mi->add_option("--k", o.mi_k, "Neighbour count")->check(CLI::PositiveNumber);
    mi->add_option("--out", o.out, "Report JSON path");

    auto* heat = app.add_subcommand("heatmap", "Export the gate bank as CSV");
    heat->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
    heat->add_option("--out", o.out, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        if (e.get_exit_code() != 0) std::cerr << app.help();
        return 1;
    }
    for (auto* c : app.get_subcommands())
        for (auto* opt : c->get_options())
            if (opt->get_name() == "--seed" && opt->count() > 0) o.seed = seed;

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (name == "gen-data") return cmd_gen_data(o);
        if (name == "cache") return cmd_cache(o);
        if (name == "train") return cmd_train(o);
        if (name == "eval") return cmd_eval(o);
        if (name == "ablate") return cmd_ablate(o);
        if (name == "mi") return cmd_mi(o);
        if (name == "heatmap") return cmd_heatmap(o);
    } catch (const ConfigError& e) {
        std::cerr << "crossan " << name << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "crossan " << name << ": error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace crossan::cli
