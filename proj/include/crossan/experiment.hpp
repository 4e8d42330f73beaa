// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipeline pieces shared by the CLI and the acceptance suite:
// data preparation, hidden-state sources, train+eval runs with their output
// directory, the ablation grid and the MI comparison.
#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossan/config.hpp"
#include "crossan/datakit.hpp"
#include "crossan/evalkit.hpp"
#include "crossan/hscache.hpp"
#include "crossan/log.hpp"
#include "crossan/model.hpp"
#include "crossan/train.hpp"

#ifndef CROSSAN_VERSION
#define CROSSAN_VERSION "0.1.0"
#endif

namespace crossan {

namespace fs = std::filesystem;

struct PreparedData {
    InteractionDataset ds;
    SplitViews views;
    std::vector<double> popularity;
    std::uint64_t hash = 0;
};

inline PreparedData prepare(InteractionDataset ds) {
    PreparedData p;
    p.hash = ds.content_hash();
    p.views = split_leave_one_out(ds);
    if (p.views.valid.empty()) throw ContractError("dataset has no user with at least 3 interactions");
    p.popularity = popularity_table(p.views, ds.num_items);
    p.ds = std::move(ds);
    return p;
}

// Backbones plus whichever hidden-state source the run asks for.
// The source may point into the backbones, so they live on the heap and keep
// their address when the stack is moved.
struct StateStack {
    std::unique_ptr<BackboneSet> backbones;
    std::unique_ptr<HiddenStateSource> source;
};

inline fs::path default_cache_dir(const fs::path& data_dir) { return data_dir / "cache"; }

// `cache_dir` empty means on-the-fly. With `build_missing`, absent or stale
// cache files are (re)built first.
inline StateStack make_states(const RunConfig& cfg, const PreparedData& data, StateMode mode, const fs::path& cache_dir, bool build_missing,
                              int jobs = 1) {
    StateStack s;
    s.backbones = std::make_unique<BackboneSet>(build_backbones(cfg.backbones, data.ds, cfg.sidenet.modalities));
    if (mode == StateMode::on_the_fly) {
        s.source = std::make_unique<OnTheFlySource>(data.ds, *s.backbones);
        return s;
    }
    if (build_missing) {
        std::vector<Modality> todo;
        for (auto m : cfg.sidenet.modalities) {
            const auto p = cache_path(cache_dir, m);
            bool ok = false;
            if (fs::exists(p)) {
                try {
                    CacheFile::open(p, cache_key_for(s.backbones->at(m), data.hash));
                    ok = true;
                } catch (const Error& e) {
                    log_info("rebuilding cache for ", modality_name(m), ": ", e.what());
                }
            }
            if (!ok) todo.push_back(m);
        }
        if (!todo.empty()) precompute_cache(data.ds, *s.backbones, todo, cache_dir, jobs);
    }
    s.source = std::make_unique<CachedSource>(CachedSource::open_dir(cache_dir, *s.backbones, cfg.sidenet.modalities, data.hash));
    return s;
}

struct RunOutcome {
    TrainResult train;
    EvalResult eval;
    nlohmann::json metrics;
};

inline std::string model_label(const RunConfig& c) {
    std::string s = std::string(variant_name(c.sidenet.variant)) + "+" + std::string(fusion_name(c.fusion.method));
    if (c.fusion.method == FusionMethod::momef) s += "@" + std::to_string(c.fusion.top_k);
    return s;
}

inline nlohmann::json metrics_json(const RunConfig& c, std::uint64_t dataset_hash, const EvalResult& ev, const std::string& per_user_csv) {
    nlohmann::json j;
    j["model"] = model_label(c);
    j["dataset_hash"] = hex64(dataset_hash);
    j["split"] = c.eval.split;
    j["users"] = ev.summary.users;
    for (int k : c.eval.ks) {
        j["HR@" + std::to_string(k)] = ev.summary.hr.at(k);
        j["NDCG@" + std::to_string(k)] = ev.summary.ndcg.at(k);
    }
    j["per_user_csv"] = per_user_csv;
    return j;
}

inline std::string per_user_csv(const EvalResult& ev, const std::vector<int>& ks) {
    std::ostringstream os;
    os.precision(17);
    os << "user,target,rank";
    for (int k : ks) os << ",hr@" << k << ",ndcg@" << k;
    os << '\n';
    for (const auto& r : ev.ranks) {
        os << r.user << ',' << r.target << ',' << r.rank;
        for (int k : ks) os << ',' << hr_at_k(r.rank, k) << ',' << ndcg_at_k(r.rank, k);
        os << '\n';
    }
    return os.str();
}

inline std::span<const HeldOutExample> split_examples(const PreparedData& d, const std::string& split) {
    return split == "valid" ? std::span<const HeldOutExample>(d.views.valid) : std::span<const HeldOutExample>(d.views.test);
}

// Trains, evaluates and, when `out` is non-empty, writes the run directory:
// config.resolved.json, run.json, ckpt, train_log.jsonl, metrics.json, per_user.csv.
inline RunOutcome run_train_eval(const RunConfig& cfg, const PreparedData& data, const HiddenStateSource& src, const fs::path& out,
                                 const StepCallback& on_step = {}) {
    RunOutcome r;
    Model model(cfg.model(), src, cfg.seed);
    std::string log_lines;
    if (!out.empty()) {
        fs::create_directories(out);
        write_file_atomic(out / "config.resolved.json", to_json(cfg).dump(2) + "\n");
        nlohmann::json run{{"seed", cfg.seed}, {"dataset_hash", hex64(data.hash)}, {"version", CROSSAN_VERSION}};
        write_file_atomic(out / "run.json", run.dump(2) + "\n");
    }
    auto on_epoch = [&](const EpochLog& e) {
        nlohmann::json j{{"epoch", e.epoch}, {"loss", e.loss}, {"val_hr10", e.val_hr10}, {"seconds", e.seconds}};
        log_lines += j.dump() + "\n";
        if (!out.empty()) write_file_atomic(out / "train_log.jsonl", log_lines);
    };
    r.train = train(model, src, data.views, data.popularity, cfg.train, cfg.seed, on_step, on_epoch);
    r.eval = evaluate(model, src, split_examples(data, cfg.eval.split), data.ds.num_items, cfg.eval.ks);
    r.metrics = metrics_json(cfg, data.hash, r.eval, out.empty() ? "" : "per_user.csv");
    if (!out.empty()) {
        write_file_atomic(out / "train_log.jsonl", log_lines);
        save_checkpoint(out / "ckpt", model, to_json(cfg).dump());
        write_file_atomic(out / "per_user.csv", per_user_csv(r.eval, cfg.eval.ks));
        write_file_atomic(out / "metrics.json", r.metrics.dump(2) + "\n");
    }
    return r;
}

// Rebuilds a model from a checkpoint; its embedded config must agree with the dataset.
inline std::pair<RunConfig, std::unique_ptr<Model>> model_from_checkpoint(const Checkpoint& ck, const HiddenStateSource& src) {
    RunConfig cfg = run_config_from_json(nlohmann::json::parse(ck.config_json));
    auto model = std::make_unique<Model>(cfg.model(), src, cfg.seed);
    model->restore(ck.values);
    return {cfg, std::move(model)};
}

// ---------------------------------------------------------------------------
// Mutual information between tower outputs

// Final text and image side outputs of every catalog item.
inline std::pair<std::vector<double>, std::vector<double>> tower_outputs(const Model& model, const HiddenStateSource& src, int num_items,
                                                                       Modality a = Modality::text, Modality b = Modality::image) {
    const auto& ms = model.config().side.modalities;
    auto ia = std::find(ms.begin(), ms.end(), a), ib = std::find(ms.begin(), ms.end(), b);
    if (ia == ms.end() || ib == ms.end()) throw ConfigError("mi: model lacks the text or image tower");
    std::vector<double> X, Y;
    for (int lo = 0; lo < num_items; lo += 256) {
        const int hi = std::min(num_items, lo + 256);
        std::vector<int> ids(static_cast<std::size_t>(hi - lo));
        std::iota(ids.begin(), ids.end(), lo);
        auto out = model.side().forward(src, ids);
        const auto& xa = out.final[static_cast<std::size_t>(ia - ms.begin())]->value;
        const auto& xb = out.final[static_cast<std::size_t>(ib - ms.begin())]->value;
        X.insert(X.end(), xa.begin(), xa.end());
        Y.insert(Y.end(), xb.begin(), xb.end());
    }
    return {std::move(X), std::move(Y)};
}

inline MIReport tower_mi(const Model& model, const HiddenStateSource& src, int num_items, int k = 3) {
    auto [X, Y] = tower_outputs(model, src, num_items);
    const auto d = static_cast<std::size_t>(model.config().side.d_side);
    return ksg_mi(std::move(X), d, std::move(Y), d, k);
}

struct MICompare {
    MIReport cross, independent;
};

inline MICompare mi_compare(const Model& cross, const Model& indep, const HiddenStateSource& src, int num_items, int k = 3) {
    if (cross.config().side.d_side != indep.config().side.d_side) throw ConfigError("mi_compare: models disagree on d_side");
    return {tower_mi(cross, src, num_items, k), tower_mi(indep, src, num_items, k)};
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationGrid {
    std::vector<SideVariant> variants;
    std::vector<FusionMethod> fusion;
    std::vector<int> top_k;
    std::vector<std::vector<Modality>> modalities;
    std::vector<double> lr;
    std::vector<int> d_side;
    std::vector<std::uint64_t> seeds;
    std::string compare = "variant";  // grid dimension whose values are t-tested pairwise
};

inline AblationGrid ablation_grid_from_json(const nlohmann::json& j, const RunConfig& base) {
    AblationGrid g;
    detail::Fields f(j, "grid");
    std::vector<std::string> variants, fusion;
    std::vector<std::vector<std::string>> mods;
    f.get("variant", variants);
    f.get("fusion", fusion);
    f.get("top_k", g.top_k);
    f.get("modalities", mods);
    f.get("lr", g.lr);
    f.get("d_side", g.d_side);
    f.get("seeds", g.seeds);
    f.get("compare", g.compare);
    f.finish();
    for (const auto& v : variants) g.variants.push_back(parse_variant(v));
    for (const auto& m : fusion) g.fusion.push_back(parse_fusion(m));
    for (const auto& set : mods) {
        std::vector<Modality> ms;
        for (const auto& n : set) ms.push_back(parse_modality(n));
        g.modalities.push_back(ms);
    }
    if (g.variants.empty()) g.variants = {base.sidenet.variant};
    if (g.fusion.empty()) g.fusion = {base.fusion.method};
    if (g.top_k.empty()) g.top_k = {base.fusion.top_k};
    if (g.modalities.empty()) g.modalities = {base.sidenet.modalities};
    if (g.lr.empty()) g.lr = {base.train.lr};
    if (g.d_side.empty()) g.d_side = {base.sidenet.d_side};
    if (g.seeds.empty()) g.seeds = {base.seed};
    static const std::set<std::string> dims{"variant", "fusion", "top_k", "modalities", "lr", "d_side", "none"};
    if (!dims.count(g.compare)) throw ConfigError("grid.compare must name a grid dimension");
    return g;
}

struct AblationCell {
    std::string id;
    RunConfig config;
    std::map<std::string, std::string> coords;  // dimension -> value label
};

inline std::string modality_set_label(const std::vector<Modality>& ms) {
    std::string s;
    for (auto m : ms) s += (s.empty() ? "" : "+") + std::string(1, static_cast<char>(std::toupper(modality_name(m)[0])));
    return s;
}

inline std::vector<AblationCell> expand_grid(const RunConfig& base, const AblationGrid& g) {
    std::vector<AblationCell> cells;
    for (auto v : g.variants)
        for (auto fm : g.fusion)
            for (int k : g.top_k)
                for (const auto& ms : g.modalities)
                    for (double lr : g.lr)
                        for (int ds : g.d_side) {
                            AblationCell c;
                            c.config = base;
                            c.config.sidenet.variant = v;
                            c.config.fusion.method = fm;
                            c.config.fusion.top_k = k;
                            c.config.sidenet.modalities = ms;
                            c.config.train.lr = lr;
                            c.config.sidenet.d_side = ds;
                            if (base.sidenet.bottleneck > 0 && ds != base.sidenet.d_side) c.config.sidenet.bottleneck = std::max(1, ds / 4);
                            std::ostringstream lrs;
                            lrs << lr;
                            c.coords = {{"variant", std::string(variant_name(v))},
                                        {"fusion", std::string(fusion_name(fm))},
                                        {"top_k", std::to_string(k)},
                                        {"modalities", modality_set_label(ms)},
                                        {"lr", lrs.str()},
                                        {"d_side", std::to_string(ds)}};
                            if (fm == FusionMethod::momef && (k < 1 || static_cast<std::size_t>(k) > ms.size())) {
                                log_info("ablate: skipping cell ", c.coords["variant"], "/", c.coords["modalities"], " top_k=", k,
                                         ": top_k exceeds the ", ms.size(), " modalities in use");
                                continue;
                            }
                            if (fm != FusionMethod::momef && g.top_k.size() > 1 && k != g.top_k.front()) continue;  // top_k is MOMEF-only
                            try {
                                c.config.validate();
                            } catch (const ConfigError& e) {
                                log_info("ablate: skipping infeasible cell: ", e.what());
                                continue;
                            }
                            c.id = "cell" + std::to_string(cells.size());
                            cells.push_back(std::move(c));
                        }
    return cells;
}

struct AblationResult {
    std::string csv;
    std::string ttest_csv;
    std::vector<AblationCell> cells;
    std::map<std::string, std::vector<RunOutcome>> runs;  // cell id -> per seed
};

// One train+eval per (cell, seed) on the same dataset and split. Cells run on
// up to `jobs` threads; results are gathered in grid order.
inline AblationResult ablate(const RunConfig& base, const AblationGrid& grid, const PreparedData& data, const fs::path& cache_dir,
                             const fs::path& out, int jobs = 1) {
    AblationResult res;
    res.cells = expand_grid(base, grid);
    // One state stack per distinct modality set.
    std::map<std::string, StateStack> stacks;
    for (const auto& c : res.cells) {
        const auto key = modality_set_label(c.config.sidenet.modalities);
        if (!stacks.count(key)) stacks.emplace(key, make_states(c.config, data, base.mode, cache_dir, true, jobs));
    }
    struct Task {
        std::size_t cell;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (std::size_t c = 0; c < res.cells.size(); ++c)
        for (auto s : grid.seeds) tasks.push_back({c, s});
    std::vector<RunOutcome> outcomes(tasks.size());
    std::vector<std::exception_ptr> errors(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t t; (t = next.fetch_add(1)) < tasks.size();) {
            try {
                const auto& cell = res.cells[tasks[t].cell];
                RunConfig cfg = cell.config;
                cfg.seed = tasks[t].seed;
                const auto& src = *stacks.at(modality_set_label(cfg.sidenet.modalities)).source;
                const fs::path dir = out.empty() ? fs::path() : out / cell.id / ("seed" + std::to_string(cfg.seed));
                outcomes[t] = run_train_eval(cfg, data, src, dir);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::ostringstream csv;
    csv.precision(10);
    csv << "cell,variant,fusion,top_k,modalities,lr,d_side,seed";
    for (int k : base.eval.ks) csv << ",HR@" << k << ",NDCG@" << k;
    csv << '\n';
    for (std::size_t t = 0; t < tasks.size(); ++t) res.runs[res.cells[tasks[t].cell].id].push_back(outcomes[t]);
    for (const auto& c : res.cells) {
        const auto& runs = res.runs[c.id];
        auto prefix = [&](const std::string& seed) {
            csv << c.id << ',' << c.coords.at("variant") << ',' << c.coords.at("fusion") << ',' << c.coords.at("top_k") << ','
                << c.coords.at("modalities") << ',' << c.coords.at("lr") << ',' << c.coords.at("d_side") << ',' << seed;
        };
        for (std::size_t s = 0; s < runs.size(); ++s) {
            prefix(std::to_string(grid.seeds[s]));
            for (int k : base.eval.ks) csv << ',' << runs[s].eval.summary.hr.at(k) << ',' << runs[s].eval.summary.ndcg.at(k);
            csv << '\n';
        }
        prefix("mean");
        for (int k : base.eval.ks) {
            double h = 0.0, n = 0.0;
            for (const auto& r : runs) {
                h += r.eval.summary.hr.at(k);
                n += r.eval.summary.ndcg.at(k);
            }
            csv << ',' << h / static_cast<double>(runs.size()) << ',' << n / static_cast<double>(runs.size());
        }
        csv << '\n';
    }
    res.csv = csv.str();

    // Paired t-tests on per-user HR@10 (averaged over seeds) between cells
    // that differ only in the compared dimension.
    std::ostringstream tt;
    tt.precision(10);
    tt << "dimension,cell_a,cell_b,value_a,value_b,mean_diff,t,p,degenerate\n";
    if (grid.compare != "none") {
        auto per_user = [&](const std::string& id) {
            const auto& runs = res.runs.at(id);
            std::vector<double> v(runs[0].eval.ranks.size(), 0.0);
            for (const auto& r : runs)
                for (std::size_t u = 0; u < v.size(); ++u) v[u] += hr_at_k(r.eval.ranks[u].rank, 10) / static_cast<double>(runs.size());
            return v;
        };
        for (std::size_t a = 0; a < res.cells.size(); ++a)
            for (std::size_t b = a + 1; b < res.cells.size(); ++b) {
                bool same_rest = true;
                for (const auto& [dim, val] : res.cells[a].coords)
                    if (dim != grid.compare && res.cells[b].coords.at(dim) != val) same_rest = false;
                if (!same_rest || res.cells[a].coords.at(grid.compare) == res.cells[b].coords.at(grid.compare)) continue;
                const auto va = per_user(res.cells[a].id), vb = per_user(res.cells[b].id);
                if (va.size() < 2) continue;
                auto t = paired_t_test(va, vb);
                double md = 0.0;
                for (std::size_t u = 0; u < va.size(); ++u) md += (va[u] - vb[u]) / static_cast<double>(va.size());
                tt << grid.compare << ',' << res.cells[a].id << ',' << res.cells[b].id << ',' << res.cells[a].coords.at(grid.compare) << ','
                   << res.cells[b].coords.at(grid.compare) << ',' << md << ',' << t.t << ',' << t.p << ',' << (t.degenerate ? 1 : 0) << '\n';
            }
    }
    res.ttest_csv = tt.str();
    if (!out.empty()) {
        fs::create_directories(out);
        write_file_atomic(out / "ablation.csv", res.csv);
        write_file_atomic(out / "ttest.csv", res.ttest_csv);
    }
    return res;
}

}  // namespace crossan
