// SPDX-License-Identifier: Apache-2.0
//
// Full-catalog ranking metrics, KSG mutual information, paired t-test and
// trainable-parameter accounting.
#pragma once

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crossan/error.hpp"
#include "crossan/log.hpp"
#include "crossan/parameters.hpp"
#include "crossan/util.hpp"

namespace crossan {

struct RankResult {
    int user = 0;
    int target = 0;
    long rank = 0;
    double target_score = 0.0;
};

// Pessimistic ties: every other item scoring at least the target ranks above it.
inline long rank_full(std::span<const double> scores, long target) {
    if (target < 0 || static_cast<std::size_t>(target) >= scores.size())
        throw RangeError("rank_full: target " + std::to_string(target) + " outside catalog of " + std::to_string(scores.size()));
    const double s = scores[static_cast<std::size_t>(target)];
    long rank = 1;
    for (std::size_t j = 0; j < scores.size(); ++j)
        if (static_cast<long>(j) != target && scores[j] >= s) ++rank;
    return rank;
}

inline int hr_at_k(long rank, int k) {
    if (rank < 1 || k < 1) throw RangeError("hr_at_k: rank and K must be >= 1");
    return rank <= k ? 1 : 0;
}

inline double ndcg_at_k(long rank, int k) {
    if (rank < 1 || k < 1) throw RangeError("ndcg_at_k: rank and K must be >= 1");
    return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

struct MetricSummary {
    std::map<int, double> hr, ndcg;  // keyed by K
    std::size_t users = 0;
};

inline MetricSummary summarize(const std::vector<RankResult>& ranks, const std::vector<int>& ks) {
    MetricSummary s;
    s.users = ranks.size();
    for (int k : ks) {
        double h = 0.0, n = 0.0;
        for (const auto& r : ranks) {
            h += hr_at_k(r.rank, k);
            n += ndcg_at_k(r.rank, k);
        }
        s.hr[k] = ranks.empty() ? 0.0 : h / static_cast<double>(ranks.size());
        s.ndcg[k] = ranks.empty() ? 0.0 : n / static_cast<double>(ranks.size());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Mutual information

struct MIReport {
    std::string estimator = "KSG-1";
    int k = 3;
    std::size_t samples = 0;
    double mi = 0.0;
    bool jittered = false;
};

namespace detail {

inline bool has_duplicate_rows(const std::vector<double>& x, std::size_t n, std::size_t d) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    auto row_less = [&](std::size_t a, std::size_t b) {
        return std::lexicographical_compare(x.begin() + static_cast<long>(a * d), x.begin() + static_cast<long>((a + 1) * d),
                                            x.begin() + static_cast<long>(b * d), x.begin() + static_cast<long>((b + 1) * d));
    };
    std::sort(idx.begin(), idx.end(), row_less);
    for (std::size_t i = 1; i < n; ++i)
        if (std::equal(x.begin() + static_cast<long>(idx[i - 1] * d), x.begin() + static_cast<long>(idx[i - 1] * d + d),
                       x.begin() + static_cast<long>(idx[i] * d)))
            return true;
    return false;
}

// Jitter seeded by the matrix content, so a matrix always receives the same
// noise whichever argument position it occupies.
inline bool jitter_duplicates(std::vector<double>& x, std::size_t n, std::size_t d) {
    if (!has_duplicate_rows(x, n, d)) return false;
    Fnv1a h;
    h.update(x.data(), x.size() * sizeof(double));
    Rng rng = Rng::stream(h.digest(), "ksg.jitter");
    for (auto& v : x) v += 1e-10 * rng.normal();
    return true;
}

inline double cheb(const double* a, const double* b, std::size_t d) {
    double m = 0.0;
    for (std::size_t c = 0; c < d; ++c) m = std::max(m, std::abs(a[c] - b[c]));
    return m;
}

}  // namespace detail

// Kraskov-Stogbauer-Grassberger estimator (first variant), max-norm, clipped at 0.
// X is [n x dx], Y is [n x dy], both row-major.
inline MIReport ksg_mi(std::vector<double> X, std::size_t dx, std::vector<double> Y, std::size_t dy, int k = 3) {
    if (dx == 0 || dy == 0 || X.size() % dx != 0 || Y.size() % dy != 0) throw DimensionError("ksg_mi: matrix sizes do not match dims");
    const std::size_t n = X.size() / dx;
    if (Y.size() / dy != n) throw DimensionError("ksg_mi: X has " + std::to_string(n) + " samples, Y has " + std::to_string(Y.size() / dy));
    if (k < 1 || n <= static_cast<std::size_t>(k)) throw RangeError("ksg_mi: need more than k=" + std::to_string(k) + " samples, got " + std::to_string(n));
    MIReport rep;
    rep.k = k;
    rep.samples = n;
    const bool jx = detail::jitter_duplicates(X, n, dx);
    const bool jy = detail::jitter_duplicates(Y, n, dy);
    rep.jittered = jx || jy;
    if (rep.jittered) log_info("ksg_mi: duplicate samples jittered with 1e-10 noise");

    using boost::math::digamma;
    std::vector<double> dxs(n), dys(n), joint(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            dxs[j] = detail::cheb(&X[i * dx], &X[j * dx], dx);
            dys[j] = detail::cheb(&Y[i * dy], &Y[j * dy], dy);
            joint[j] = std::max(dxs[j], dys[j]);
        }
        joint[i] = std::numeric_limits<double>::infinity();
        std::vector<double> tmp(joint);
        std::nth_element(tmp.begin(), tmp.begin() + (k - 1), tmp.end());
        const double eps = tmp[static_cast<std::size_t>(k - 1)];
        long nx = 0, ny = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            if (dxs[j] < eps) ++nx;
            if (dys[j] < eps) ++ny;
        }
        acc += digamma(static_cast<double>(nx + 1)) + digamma(static_cast<double>(ny + 1));
    }
    const double est = digamma(static_cast<double>(k)) + digamma(static_cast<double>(n)) - acc / static_cast<double>(n);
    rep.mi = std::max(est, 0.0);
    return rep;
}

// ---------------------------------------------------------------------------
// Paired t-test

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    bool degenerate = false;
    std::size_t n = 0;
};

inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("paired_t_test: lengths differ");
    if (a.size() < 2) throw RangeError("paired_t_test: need n >= 2");
    const std::size_t n = a.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    TTestResult r;
    r.n = n;
    if (sd == 0.0) {
        if (mean == 0.0) return r;
        r.degenerate = true;
        r.t = mean > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        return r;
    }
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
    r.p = 2.0 * boost::math::cdf(dist, -std::abs(r.t));
    return r;
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamCount {
    std::size_t total = 0;
    std::map<std::string, std::size_t> by_module;  // "sidenet", "fusion", "seqrec", ...
    std::map<std::string, std::size_t> by_group;   // e.g. "sidenet.adapter", "fusion.proj"
};

inline std::string param_group(const std::string& name) {
    const auto first = name.substr(0, name.find('.'));
    if (first == "sidenet") {
        for (const char* g : {"entry", "adapter", "gate"})
            if (name.find(std::string(".") + g) != std::string::npos) return first + "." + g;
    }
    const auto rest = name.substr(name.find('.') + 1);
    auto second = rest.substr(0, rest.find('.'));
    while (!second.empty() && std::isdigit(static_cast<unsigned char>(second.back()))) second.pop_back();
    return first + "." + second;
}

inline ParamCount count_trainable_params(const ParameterStore& store) {
    ParamCount c;
    for (const auto& p : store.all()) {
        if (p.frozen) continue;
        const auto n = p.node->numel();
        c.total += n;
        c.by_module[p.name.substr(0, p.name.find('.'))] += n;
        c.by_group[param_group(p.name)] += n;
    }
    return c;
}

}  // namespace crossan
