// SPDX-License-Identifier: Apache-2.0
//
// Training loop, full-catalog evaluation and the cached vs on-the-fly epoch
// timing comparison.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "crossan/datakit.hpp"
#include "crossan/error.hpp"
#include "crossan/evalkit.hpp"
#include "crossan/hscache.hpp"
#include "crossan/log.hpp"
#include "crossan/model.hpp"
#include "crossan/parameters.hpp"

namespace crossan {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 256;
    int max_epochs = 50;
    int patience = 5;
    bool validate = true;  // false: run max_epochs with no early stopping

    void validate_config() const {
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (max_epochs < 0 || patience < 1) throw ConfigError("max_epochs must be >= 0 and patience >= 1");
    }
};

struct EvalResult {
    std::vector<RankResult> ranks;
    MetricSummary summary;
};

inline EvalResult evaluate(const Model& model, const HiddenStateSource& src, std::span<const HeldOutExample> examples, int num_items,
                           const std::vector<int>& ks = {10, 20}) {
    EvalResult r;
    if (examples.empty()) {
        r.summary = summarize(r.ranks, ks);
        return r;
    }
    const auto E = model.catalog(src, num_items);
    constexpr std::size_t chunk = 512;
    std::vector<double> scores(static_cast<std::size_t>(num_items));
    for (std::size_t lo = 0; lo < examples.size(); lo += chunk) {
        const std::size_t hi = std::min(examples.size(), lo + chunk);
        const auto H = model.context_states(E, examples.subspan(lo, hi - lo));
        const Model::RowMat S = H * E.transpose();
        for (std::size_t u = lo; u < hi; ++u) {
            const auto row = S.row(static_cast<Eigen::Index>(u - lo));
            std::copy(row.data(), row.data() + num_items, scores.begin());
            const auto& ex = examples[u];
            r.ranks.push_back({ex.user, ex.target, rank_full(scores, ex.target), scores[static_cast<std::size_t>(ex.target)]});
        }
    }
    r.summary = summarize(r.ranks, ks);
    return r;
}

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;      // mean step loss
    double val_hr10 = -1.0; // -1 when validation is off
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    std::vector<double> step_losses;
    int best_epoch = 0;
    double best_val_hr10 = -1.0;
    long steps = 0;
};

using StepCallback = std::function<void(long step, const Model& model, const Model::StepOutput& out)>;
using EpochCallback = std::function<void(const EpochLog&)>;

inline TrainResult train(Model& model, const HiddenStateSource& src, const SplitViews& views, std::span<const double> popularity,
                         const TrainConfig& cfg, std::uint64_t seed, const StepCallback& on_step = {}, const EpochCallback& on_epoch = {}) {
    cfg.validate_config();
    if (views.train_pairs == 0 || views.train.empty())
        throw ContractError("no training pairs: every user has fewer than 4 interactions, refusing to train");
    Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
    Rng order_rng = Rng::stream(seed, "batch_order");
    Rng drop_rng = Rng::stream(seed, "dropout");
    std::vector<std::size_t> order(views.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult res;
    auto best = model.snapshot();
    int since_best = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), order_rng.engine());
        double total = 0.0;
        long n = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const TrainSequence*> seqs;
            for (std::size_t i = lo; i < hi; ++i) seqs.push_back(&views.train[order[i]]);
            const TrainBatch batch = make_train_batch(seqs, views.interacted, model.config().seq.max_seq_len);
            Adam::zero_grad(model.params());
            Model::StepOutput out;
            try {
                out = model.loss(src, batch, popularity, &drop_rng, true);
                backward(out.loss);
            } catch (const NumericError& e) {
                throw NumericError("non-finite loss at step " + std::to_string(res.steps) + " (epoch " + std::to_string(epoch) + "): " + e.what());
            }
            opt.step(model.params());
            const double l = out.loss->item();
            res.step_losses.push_back(l);
            total += l;
            ++n;
            if (on_step) on_step(res.steps, model, out);
            ++res.steps;
        }
        EpochLog log;
        log.epoch = epoch;
        log.loss = n ? total / static_cast<double>(n) : 0.0;
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (cfg.validate) {
            log.val_hr10 = evaluate(model, src, views.valid, static_cast<int>(popularity.size()), {10}).summary.hr.at(10);
            if (log.val_hr10 > res.best_val_hr10) {
                res.best_val_hr10 = log.val_hr10;
                res.best_epoch = epoch;
                best = model.snapshot();
                since_best = 0;
            } else {
                ++since_best;
            }
        }
        log_info("epoch ", epoch, " loss ", log.loss, cfg.validate ? " val_hr10 " + std::to_string(log.val_hr10) : std::string(), " (",
                 log.seconds, " s)");
        res.epochs.push_back(log);
        if (on_epoch) on_epoch(log);
        if (cfg.validate && since_best >= cfg.patience) break;
    }
    if (cfg.validate) model.restore(best);
    else res.best_epoch = cfg.max_epochs;
    return res;
}

// ---------------------------------------------------------------------------
// Epoch timing

struct EpochTiming {
    std::vector<double> epoch_seconds;
    std::vector<double> step_losses;
    double median_seconds = 0.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Trains a fresh model for `epochs` epochs without validation and times each epoch.
inline EpochTiming time_epochs(const ModelConfig& mcfg, const HiddenStateSource& src, const SplitViews& views, std::span<const double> popularity,
                               TrainConfig tcfg, std::uint64_t seed, int epochs) {
    EpochTiming t;
    if (epochs <= 0) return t;
    tcfg.max_epochs = epochs;
    tcfg.validate = false;
    Model model(mcfg, src, seed);
    auto res = train(model, src, views, popularity, tcfg, seed, {}, [&](const EpochLog& e) { t.epoch_seconds.push_back(e.seconds); });
    t.step_losses = std::move(res.step_losses);
    t.median_seconds = median(t.epoch_seconds);
    return t;
}

struct EpochTimeReport {
    EpochTiming cached, on_the_fly;
    double ratio = 0.0;             // cached / on-the-fly median seconds
    double max_rel_loss_diff = 0.0;
};

inline double max_relative_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw EquivalenceError("loss trajectories differ in length: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-300});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

inline EpochTimeReport epoch_time_report(const ModelConfig& mcfg, const HiddenStateSource& cached, const HiddenStateSource& on_the_fly,
                                         const SplitViews& views, std::span<const double> popularity, const TrainConfig& tcfg,
                                         std::uint64_t seed, int epochs = 3, double tolerance = 1e-6) {
    EpochTimeReport r;
    r.cached = time_epochs(mcfg, cached, views, popularity, tcfg, seed, epochs);
    r.on_the_fly = time_epochs(mcfg, on_the_fly, views, popularity, tcfg, seed, epochs);
    r.max_rel_loss_diff = max_relative_diff(r.cached.step_losses, r.on_the_fly.step_losses);
    if (r.max_rel_loss_diff > tolerance)
        throw EquivalenceError("cached and on-the-fly losses diverge: max relative difference " + std::to_string(r.max_rel_loss_diff) +
                               " exceeds " + std::to_string(tolerance));
    r.ratio = r.on_the_fly.median_seconds > 0.0 ? r.cached.median_seconds / r.on_the_fly.median_seconds : 0.0;
    return r;
}

}  // namespace crossan
