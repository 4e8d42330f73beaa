// SPDX-License-Identifier: Apache-2.0
//
// Causal transformer over fused item embeddings, dot-product scoring and the
// in-batch popularity-debiased cross-entropy.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crossan/datakit.hpp"
#include "crossan/diffcore.hpp"
#include "crossan/error.hpp"
#include "crossan/parameters.hpp"

namespace crossan {

struct SeqEncoderConfig {
    int d_hidden = 64;
    int num_blocks = 2;
    int num_heads = 2;
    int max_seq_len = 10;
    double dropout = 0.1;

    void validate() const {
        if (d_hidden < 1 || num_blocks < 0 || num_heads < 1 || max_seq_len < 1) throw ConfigError("sequence encoder sizes must be positive");
        if (d_hidden % num_heads != 0)
            throw ConfigError("d_hidden " + std::to_string(d_hidden) + " not divisible by num_heads " + std::to_string(num_heads));
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    }
};

class SeqEncoder {
   public:
    SeqEncoder(SeqEncoderConfig cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg_.d_hidden);
        const auto L = static_cast<std::size_t>(cfg_.max_seq_len);
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        pos_ = store.add_normal("seqrec.pos_embed", {L, d}, 0.02, rng);
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const std::string p = "seqrec.block" + std::to_string(b) + ".";
            Block B;
            B.ln1_g = store.add_constant(p + "ln1.gamma", {d}, 1.0);
            B.ln1_b = store.add_constant(p + "ln1.beta", {d}, 0.0);
            for (const char* n : {"q", "k", "v", "o"}) {
                B.attn.push_back(store.add_normal(p + "attn.w" + n, {d, d}, sd, rng));
                B.attn.push_back(store.add_constant(p + "attn.b" + n, {d}, 0.0));
            }
            B.ln2_g = store.add_constant(p + "ln2.gamma", {d}, 1.0);
            B.ln2_b = store.add_constant(p + "ln2.beta", {d}, 0.0);
            B.w1 = store.add_normal(p + "ffn.w1", {d, d}, sd, rng);
            B.b1 = store.add_constant(p + "ffn.b1", {d}, 0.0);
            B.w2 = store.add_normal(p + "ffn.w2", {d, d}, sd, rng);
            B.b2 = store.add_constant(p + "ffn.b2", {d}, 0.0);
            blocks_.push_back(std::move(B));
        }
        final_g_ = store.add_constant("seqrec.final_ln.gamma", {d}, 1.0);
        final_b_ = store.add_constant("seqrec.final_ln.beta", {d}, 0.0);
    }

    const SeqEncoderConfig& config() const { return cfg_; }

    // x: [B*L x d] left-padded windows of L = max_seq_len rows (padding rows
    // zero, valid[r] == 0). Returns per-position states of the same shape.
    Var forward(const Var& x, std::span<const std::uint8_t> valid, Rng* dropout_rng, bool training) const {
        const auto L = static_cast<std::size_t>(cfg_.max_seq_len);
        const auto d = static_cast<std::size_t>(cfg_.d_hidden);
        if (x->cols() != d || x->rows() % L != 0 || valid.size() != x->rows())
            throw DimensionError("seq_encode: input " + shape_str(x->shape) + " is not a stack of [" + std::to_string(L) + " x " + std::to_string(d) + "] windows");
        if (training && cfg_.dropout > 0.0 && !dropout_rng) throw ContractError("seq_encode: training dropout needs an rng");
        std::vector<long> pos_index(x->rows());
        for (std::size_t r = 0; r < pos_index.size(); ++r) pos_index[r] = static_cast<long>(r % L);
        Var h = add(x, gather_rows(pos_, pos_index));
        h = drop(h, dropout_rng, training);
        for (const auto& B : blocks_) {
            Var a = layer_norm(h, B.ln1_g, B.ln1_b);
            Var q = add_row(matmul(a, B.attn[0]), B.attn[1]);
            Var k = add_row(matmul(a, B.attn[2]), B.attn[3]);
            Var v = add_row(matmul(a, B.attn[4]), B.attn[5]);
            Var att = causal_attention(q, k, v, L, static_cast<std::size_t>(cfg_.num_heads), valid);
            h = add(h, drop(add_row(matmul(att, B.attn[6]), B.attn[7]), dropout_rng, training));
            Var f = layer_norm(h, B.ln2_g, B.ln2_b);
            f = add_row(matmul(gelu(add_row(matmul(f, B.w1), B.b1)), B.w2), B.b2);
            h = add(h, drop(f, dropout_rng, training));
        }
        return layer_norm(h, final_g_, final_b_);
    }

   private:
    struct Block {
        Var ln1_g, ln1_b, ln2_g, ln2_b, w1, b1, w2, b2;
        std::vector<Var> attn;  // wq bq wk bk wv bv wo bo
    };

    Var drop(const Var& x, Rng* rng, bool training) const {
        if (!training || cfg_.dropout == 0.0) return x;
        return dropout(x, cfg_.dropout, *rng, true);
    }

    SeqEncoderConfig cfg_;
    Var pos_, final_g_, final_b_;
    std::vector<Block> blocks_;
};

inline double score(std::span<const double> user_state, std::span<const double> item) {
    if (user_state.size() != item.size()) throw DimensionError("score: dims " + std::to_string(user_state.size()) + " vs " + std::to_string(item.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < item.size(); ++i) s += user_state[i] * item[i];
    return s;
}

inline double debiased_logit(double y_hat, double p) {
    if (!(p > 0.0)) throw DomainError("debiased_logit: popularity must be > 0, got " + std::to_string(p));
    return y_hat - std::log(p);
}

// ---------------------------------------------------------------------------
// Batches

// Left-padded windows of the most recent max_seq_len inputs. Slot r of user b
// is row b*L + r; targets[row] is the next item or -1.
struct TrainBatch {
    std::vector<int> users;
    std::size_t window = 0;
    std::vector<long> items;     // -1 for padding
    std::vector<std::uint8_t> valid;
    std::vector<long> targets;   // -1 where no loss term
    std::vector<std::vector<int>> interacted;  // I_u per batch user, sorted

    std::size_t size() const { return users.size(); }

    // Sorted unique ids of every input and target item in the batch.
    std::vector<int> unique_items() const {
        std::vector<int> u;
        for (long i : items)
            if (i >= 0) u.push_back(static_cast<int>(i));
        for (long t : targets)
            if (t >= 0) u.push_back(static_cast<int>(t));
        std::sort(u.begin(), u.end());
        u.erase(std::unique(u.begin(), u.end()), u.end());
        return u;
    }
};

// Right-aligns the last `window` inputs of `seq`. With targets, the final item
// is only a target and every slot predicts the item that follows it.
inline void place_window(TrainBatch& b, const std::vector<int>& seq, bool with_targets) {
    const std::size_t L = b.window;
    const std::size_t n_in = with_targets ? seq.size() - 1 : seq.size();
    const std::size_t take = std::min(L, n_in);
    const std::size_t first = n_in - take;
    for (std::size_t r = 0; r < L; ++r) {
        const std::size_t pad = L - take;
        if (r < pad) {
            b.items.push_back(-1);
            b.valid.push_back(0);
            b.targets.push_back(-1);
            continue;
        }
        const std::size_t src = first + (r - pad);
        b.items.push_back(seq[src]);
        b.valid.push_back(1);
        b.targets.push_back(with_targets ? seq[src + 1] : -1);
    }
}

inline TrainBatch make_train_batch(std::span<const TrainSequence* const> seqs, const std::map<int, std::vector<int>>& interacted, int max_seq_len) {
    if (seqs.empty()) throw ContractError("empty batch");
    TrainBatch b;
    b.window = static_cast<std::size_t>(max_seq_len);
    for (const auto* s : seqs) {
        if (s->items.size() < 2) throw ContractError("training sequence of user " + std::to_string(s->user) + " has no next-item pair");
        b.users.push_back(s->user);
        place_window(b, s->items, true);
        auto it = interacted.find(s->user);
        b.interacted.push_back(it == interacted.end() ? std::vector<int>{} : it->second);
    }
    return b;
}

// Windows for scoring the item after each context (no targets).
inline TrainBatch make_context_batch(std::span<const HeldOutExample> examples, int max_seq_len) {
    TrainBatch b;
    b.window = static_cast<std::size_t>(max_seq_len);
    for (const auto& ex : examples) {
        if (ex.context.empty()) throw ContractError("empty evaluation context for user " + std::to_string(ex.user));
        b.users.push_back(ex.user);
        place_window(b, ex.context, false);
        b.interacted.emplace_back();
    }
    return b;
}

// In-batch debiased cross-entropy. `states`: [B*L x d] encoder output;
// `item_emb`: [|U| x d] embeddings of `unique` (sorted ids). Candidates are the
// batch's unique targets; a candidate other than the row's own target is a
// negative unless the user has interacted with it.
inline Var in_batch_loss(const Var& states, const Var& item_emb, std::span<const int> unique, const TrainBatch& b,
                         std::span<const double> popularity) {
    auto local = [&](long id) {
        auto it = std::lower_bound(unique.begin(), unique.end(), static_cast<int>(id));
        if (it == unique.end() || *it != id) throw ContractError("batch item " + std::to_string(id) + " has no embedding");
        return static_cast<long>(it - unique.begin());
    };
    std::vector<long> rows;
    std::vector<int> cand;
    for (std::size_t r = 0; r < b.targets.size(); ++r)
        if (b.targets[r] >= 0) {
            rows.push_back(static_cast<long>(r));
            cand.push_back(static_cast<int>(b.targets[r]));
        }
    if (rows.empty()) throw ContractError("batch has no training targets");
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    std::vector<long> cand_local;
    std::vector<double> neg_log_p;
    for (int c : cand) {
        if (c < 0 || static_cast<std::size_t>(c) >= popularity.size()) throw RangeError("popularity table does not cover item " + std::to_string(c));
        cand_local.push_back(local(c));
        neg_log_p.push_back(-std::log(popularity[static_cast<std::size_t>(c)]));
    }
    const std::size_t P = rows.size(), C = cand.size();
    std::vector<std::uint8_t> mask(P * C, 0);
    std::vector<std::size_t> targets(P);
    for (std::size_t p = 0; p < P; ++p) {
        const std::size_t r = static_cast<std::size_t>(rows[p]);
        const auto& I = b.interacted[r / b.window];
        const int tgt = static_cast<int>(b.targets[r]);
        for (std::size_t c = 0; c < C; ++c) {
            if (cand[c] == tgt) {
                targets[p] = c;
                mask[p * C + c] = 1;
            } else {
                mask[p * C + c] = std::binary_search(I.begin(), I.end(), cand[c]) ? 0 : 1;
            }
        }
    }
    Var h = gather_rows(states, rows);
    Var e = gather_rows(item_emb, cand_local);
    Var logits = add_row(matmul(h, transpose(e)), tensor({C}, std::move(neg_log_p)));
    return masked_softmax_xent(logits, mask, targets);
}

}  // namespace crossan
