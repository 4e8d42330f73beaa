// Loop-level reference implementations shared by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "crossan/seqrec.hpp"

namespace crossan::testing {

// Straight loop over users and positions: numerator exp(y - ln p) against the
// same term for every unique batch target outside the user's history.
inline double loss_oracle(const std::vector<double>& states, const std::vector<double>& emb, const std::vector<int>& unique, std::size_t d,
                          const TrainBatch& b, const std::vector<double>& pop) {
    auto row_of = [&](int item) {
        for (std::size_t i = 0; i < unique.size(); ++i)
            if (unique[i] == item) return i;
        return unique.size();
    };
    std::set<int> pool;
    for (long t : b.targets)
        if (t >= 0) pool.insert(static_cast<int>(t));
    auto logit = [&](std::size_t r, int item) {
        double y = 0.0;
        const std::size_t e = row_of(item);
        for (std::size_t c = 0; c < d; ++c) y += states[r * d + c] * emb[e * d + c];
        return y - std::log(pop[static_cast<std::size_t>(item)]);
    };
    double total = 0.0;
    int terms = 0;
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
        if (b.targets[r] < 0) continue;
        const int target = static_cast<int>(b.targets[r]);
        const auto& I = b.interacted[r / b.window];
        const double num = std::exp(logit(r, target));
        double den = num;
        for (int j : pool) {
            if (j == target) continue;
            if (std::find(I.begin(), I.end(), j) != I.end()) continue;
            den += std::exp(logit(r, j));
        }
        total += -std::log(num / den);
        ++terms;
    }
    return total / terms;
}

// Position of the target after sorting every score descending, with the
// target placed behind anything it ties with.
inline long sorted_rank(const std::vector<double>& s, long target) {
    std::vector<long> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0L);
    std::sort(idx.begin(), idx.end(), [&](long a, long b) {
        if (s[a] != s[b]) return s[a] > s[b];
        if (a == target || b == target) return b == target;
        return a < b;
    });
    return std::find(idx.begin(), idx.end(), target) - idx.begin() + 1;
}

struct RandomBatch {
    std::vector<TrainSequence> seqs;
    std::map<int, std::vector<int>> interacted;
    TrainBatch batch;
    std::vector<int> unique;
};

// Users with 2..8 random items; I_u is everything the user touched.
inline RandomBatch random_batch(Rng& rng, int users, int num_items, int window) {
    RandomBatch rb;
    for (int u = 0; u < users; ++u) {
        TrainSequence s;
        s.user = u;
        const int len = 2 + static_cast<int>(rng.index(7));
        for (int i = 0; i < len; ++i) s.items.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(num_items))));
        std::vector<int> I(s.items.begin(), s.items.end());
        std::sort(I.begin(), I.end());
        I.erase(std::unique(I.begin(), I.end()), I.end());
        rb.interacted[u] = I;
        rb.seqs.push_back(s);
    }
    std::vector<const TrainSequence*> ptrs;
    for (const auto& s : rb.seqs) ptrs.push_back(&s);
    rb.batch = make_train_batch(ptrs, rb.interacted, window);
    rb.unique = rb.batch.unique_items();
    return rb;
}

inline std::vector<double> random_popularity(Rng& rng, int n) {
    std::vector<double> p(static_cast<std::size_t>(n));
    double z = 0.0;
    for (auto& v : p) z += (v = 0.1 + rng.uniform());
    for (auto& v : p) v /= z;
    return p;
}

}  // namespace crossan::testing
