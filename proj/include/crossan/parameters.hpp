// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crossan/diffcore.hpp"
#include "crossan/error.hpp"
#include "crossan/util.hpp"

namespace crossan {

struct Parameter {
    Var node;
    std::string name;
    bool frozen = false;
};

// Ordered registry of named parameters. Registration order is the canonical
// order for checksums, checkpoints and optimizer state.
class ParameterStore {
   public:
    Var add(std::string name, Shape shape, std::vector<double> init, bool frozen = false) {
        if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        Var node = tensor(std::move(shape), std::move(init), !frozen);
        index_.emplace(name, params_.size());
        params_.push_back({node, std::move(name), frozen});
        return node;
    }

    Var add_normal(std::string name, Shape shape, double sd, Rng& rng, bool frozen = false) {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng.normal(0.0, sd);
        return add(std::move(name), std::move(shape), std::move(v), frozen);
    }

    Var add_constant(std::string name, Shape shape, double c, bool frozen = false) {
        std::vector<double> v(shape_numel(shape), c);
        return add(std::move(name), std::move(shape), std::move(v), frozen);
    }

    const std::vector<Parameter>& all() const { return params_; }
    std::vector<Parameter>& all() { return params_; }

    const Parameter* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }
    const Parameter& at(const std::string& name) const {
        const auto* p = find(name);
        if (!p) throw RangeError("unknown parameter '" + name + "'");
        return *p;
    }

    void freeze_all() {
        for (auto& p : params_) {
            p.frozen = true;
            p.node->requires_grad = false;
        }
    }

    std::size_t count_trainable() const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (!p.frozen) n += p.node->numel();
        return n;
    }

    std::uint64_t checksum() const {
        Fnv1a h;
        for (const auto& p : params_) {
            h.update(p.name);
            for (double v : p.node->value) h.update_le(v);
        }
        return h.digest();
    }

   private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over the non-frozen parameters of one store. Frozen parameters are
// skipped even if a gradient buffer happens to be populated.
class Adam {
   public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(ParameterStore& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& p : store.all()) {
            if (p.frozen) continue;
            auto& node = *p.node;
            if (node.grad.size() != node.numel()) continue;  // not reached by this step's graph
            auto& [m, v] = state_[p.name];
            if (m.empty()) {
                m.assign(node.numel(), 0.0);
                v.assign(node.numel(), 0.0);
            }
            for (std::size_t i = 0; i < node.numel(); ++i) {
                const double g = node.grad[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                node.value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
        }
    }

    static void zero_grad(ParameterStore& store) {
        for (auto& p : store.all()) p.node->grad.clear();
    }

    const AdamConfig& config() const { return cfg_; }

   private:
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

}  // namespace crossan
