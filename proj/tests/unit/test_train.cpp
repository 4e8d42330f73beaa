#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "crossan/experiment.hpp"
#include "world.hpp"

using namespace crossan;
using crossan::testing::World;

namespace {

TrainConfig quick(double lr = 1e-3, int epochs = 2) {
    TrainConfig t;
    t.lr = lr;
    t.batch_size = 16;
    t.max_epochs = epochs;
    t.validate = false;
    return t;
}

World& world() {
    static World w;
    return w;
}

}  // namespace

TEST(Train, RefusesWithoutTrainingPairs) {
    auto cfg = crossan::testing::tiny_run_config();
    cfg.dataset.min_len = 3;
    cfg.dataset.max_len = 3;
    World w(cfg);
    EXPECT_EQ(w.views.train_pairs, 0);
    Model model(w.cfg.model(), w.cached, w.cfg.seed);
    try {
        train(model, w.cached, w.views, w.pop, quick(), 1);
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("fewer than 4"), std::string::npos) << e.what();
    }
}

TEST(Train, ZeroStepSizeMatchesUntrainedLosses) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 3);
    const auto before = model.snapshot();
    const auto res = train(model, w.cached, w.views, w.pop, quick(0.0, 1), 5);
    EXPECT_EQ(model.snapshot(), before);

    // replay the same batches on an untouched model
    Model fresh(w.cfg.model(), w.cached, 3);
    Rng order_rng = Rng::stream(5, "batch_order"), drop_rng = Rng::stream(5, "dropout");
    std::vector<std::size_t> order(w.views.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    std::vector<double> losses;
    for (std::size_t lo = 0; lo < order.size(); lo += 16) {
        std::vector<const TrainSequence*> seqs;
        for (std::size_t i = lo; i < std::min(order.size(), lo + 16); ++i) seqs.push_back(&w.views.train[order[i]]);
        const auto b = make_train_batch(seqs, w.views.interacted, w.cfg.seqrec.max_seq_len);
        losses.push_back(fresh.loss(w.cached, b, w.pop, &drop_rng, true).loss->item());
    }
    EXPECT_EQ(res.step_losses, losses);
}

TEST(Train, FixedSeedIsBitwiseReproducible) {
    auto& w = world();
    Model a(w.cfg.model(), w.cached, 9), b(w.cfg.model(), w.cached, 9);
    const auto ra = train(a, w.cached, w.views, w.pop, quick(), 4);
    const auto rb = train(b, w.cached, w.views, w.pop, quick(), 4);
    EXPECT_EQ(ra.step_losses, rb.step_losses);
    EXPECT_EQ(a.snapshot(), b.snapshot());
    Model c(w.cfg.model(), w.cached, 9);
    EXPECT_NE(train(c, w.cached, w.views, w.pop, quick(), 5).step_losses, ra.step_losses);
}

TEST(Train, LossDecreasesOnAverage) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 1);
    const auto r = train(model, w.cached, w.views, w.pop, quick(3e-3, 6), 1);
    ASSERT_EQ(r.epochs.size(), 6u);
    EXPECT_LT(r.epochs.back().loss, r.epochs.front().loss);
}

TEST(Train, BackbonesStayFrozen) {
    auto& w = world();
    std::vector<std::uint64_t> before;
    for (auto m : w.cfg.sidenet.modalities) before.push_back(w.backbones.at(m).checksum());
    Model model(w.cfg.model(), w.cached, 2);
    for (const auto& p : model.params().all()) EXPECT_NE(p.name.rfind("backbone", 0), 0u) << p.name;
    train(model, w.cached, w.views, w.pop, quick(), 2);
    std::vector<std::uint64_t> after;
    for (auto m : w.cfg.sidenet.modalities) after.push_back(w.backbones.at(m).checksum());
    EXPECT_EQ(before, after);
}

TEST(Train, GatesStayOnSimplexEveryStep) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 4);
    long checked = 0;
    auto on_step = [&](long, const Model& m, const Model::StepOutput& out) {
        const auto& side = m.side();
        for (std::size_t t = 0; t < side.config().modalities.size(); ++t)
            for (std::size_t l = 1; l <= side.num_layers(); ++l) {
                const auto g = side.gate_values(t, l);
                double s = 0.0;
                for (double v : g) {
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
        const auto& wts = out.items.fused.weights->value;
        const std::size_t M = side.config().modalities.size();
        for (std::size_t r = 0; r < wts.size() / M; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < M; ++c) s += wts[r * M + c];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
        ++checked;
    };
    const auto r = train(model, w.cached, w.views, w.pop, quick(1e-2, 2), 1, on_step);
    EXPECT_EQ(checked, r.steps);
    EXPECT_GT(checked, 0);
}

TEST(Train, NonFiniteLossNamesTheStep) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 6);
    auto poison = [&](long step, const Model&, const Model::StepOutput&) {
        if (step == 2) model.params().all().front().node->value[0] = std::nan("");
    };
    try {
        train(model, w.cached, w.views, w.pop, quick(), 1, poison);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
    }
}

TEST(Train, EarlyStoppingRestoresBestEpoch) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 7);
    TrainConfig t = quick(1e-3, 12);
    t.validate = true;
    t.patience = 2;
    const auto r = train(model, w.cached, w.views, w.pop, t, 1);
    ASSERT_FALSE(r.epochs.empty());
    double best = -1.0;
    int best_epoch = 0;
    for (const auto& e : r.epochs)
        if (e.val_hr10 > best) {
            best = e.val_hr10;
            best_epoch = e.epoch;
        }
    EXPECT_EQ(r.best_epoch, best_epoch);
    EXPECT_EQ(r.best_val_hr10, best);
    EXPECT_LE(static_cast<int>(r.epochs.size()), std::min(12, best_epoch + 2));
    const double now = evaluate(model, w.cached, w.views.valid, w.ds.num_items, {10}).summary.hr.at(10);
    EXPECT_EQ(now, best);
}

TEST(Evaluate, MatchesDirectScoring) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 8);
    const auto ev = evaluate(model, w.cached, w.views.test, w.ds.num_items);
    ASSERT_EQ(ev.ranks.size(), w.views.test.size());
    const auto E = model.catalog(w.cached, w.ds.num_items);
    for (std::size_t u = 0; u < w.views.test.size(); u += 7) {
        const auto H = model.context_states(E, std::span<const HeldOutExample>(&w.views.test[u], 1));
        std::vector<double> s(static_cast<std::size_t>(w.ds.num_items));
        for (int i = 0; i < w.ds.num_items; ++i) {
            std::vector<double> h(H.row(0).data(), H.row(0).data() + H.cols()), e(E.row(i).data(), E.row(i).data() + E.cols());
            s[static_cast<std::size_t>(i)] = score(h, e);
        }
        const long r = rank_full(s, w.views.test[u].target);
        EXPECT_EQ(ev.ranks[u].rank, r);
        EXPECT_GE(r, 1);
        EXPECT_LE(r, w.ds.num_items);
    }
}

TEST(Checkpoint, RoundTripRestoresEveryParameter) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 10);
    train(model, w.cached, w.views, w.pop, quick(), 1);
    const std::string bytes = encode_checkpoint(model, to_json(w.cfg).dump());
    const auto ck = decode_checkpoint(bytes, "mem");
    EXPECT_EQ(ck.values, model.snapshot());
    EXPECT_EQ(nlohmann::json::parse(ck.config_json), to_json(w.cfg));
    Model other(w.cfg.model(), w.cached, 11);
    other.restore(ck.values);
    EXPECT_EQ(other.snapshot(), model.snapshot());
    const auto a = evaluate(model, w.cached, w.views.test, w.ds.num_items), b = evaluate(other, w.cached, w.views.test, w.ds.num_items);
    for (std::size_t i = 0; i < a.ranks.size(); ++i) EXPECT_EQ(a.ranks[i].rank, b.ranks[i].rank);
}

TEST(Checkpoint, DamagedFilesAreRejected) {
    auto& w = world();
    Model model(w.cfg.model(), w.cached, 10);
    const std::string bytes = encode_checkpoint(model, "{}");
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad, "mem"), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3), "mem"), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes + "z", "mem"), FormatError);
    auto ck = decode_checkpoint(bytes, "mem");
    ck.values.begin()->second.pop_back();
    EXPECT_THROW(model.restore(ck.values), FormatError);
    EXPECT_THROW(load_checkpoint(w.dir / "missing.ckpt"), ConfigError);
}

TEST(StateStack, OnTheFlySourceSurvivesMoves) {
    const auto cfg = crossan::testing::tiny_run_config();
    const auto data = prepare(generate_synthetic(cfg.dataset));
    auto held = std::make_unique<StateStack>(make_states(cfg, data, StateMode::on_the_fly, {}, false));
    std::map<int, StateStack> moved;
    moved.emplace(0, std::move(*held));
    held.reset();
    const std::vector<int> items{0, 3, 5};
    const auto in = moved.at(0).source->layer_inputs(Modality::text, items);
    const auto fresh = moved.at(0).backbones->at(Modality::text).encode_matrix(data.ds.feature(Modality::text).item(3));
    ASSERT_EQ(in.size(), static_cast<std::size_t>(fresh.rows()));
    for (Eigen::Index c = 0; c < fresh.cols(); ++c) EXPECT_EQ(in[0]->value[static_cast<std::size_t>(fresh.cols() + c)], fresh(0, c));
}
