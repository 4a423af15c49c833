#pragma once

// Named parameter store, layer bundles, initializers, and AdamW.

#include <string>
#include <utility>
#include <vector>

#include "mammolab/autograd.hpp"
#include "mammolab/common.hpp"

namespace mammolab::nn {

// Ordered, named parameter registry; the checkpoint format serializes it
// verbatim and the optimizer walks it.
struct ParamStore {
    std::vector<std::pair<std::string, ag::Var>> params;

    ag::Var add(const std::string& name, ag::Tensor init) {
        for (const auto& [n, _] : params)
            if (n == name) throw BadConfig("duplicate parameter name: " + name);
        auto v = ag::parameter(std::move(init));
        params.emplace_back(name, v);
        return v;
    }

    ag::Var find(const std::string& name) const {
        for (const auto& [n, v] : params)
            if (n == name) return v;
        throw BadConfig("no such parameter: " + name);
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params) n += v->val.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, v] : params) v->zero_grad();
    }
};

// ------------------------------------------------------------ initializers

inline ag::Tensor trunc_normal(std::vector<std::size_t> shape, double sigma, Rng& rng) {
    ag::Tensor t(std::move(shape));
    for (auto& x : t.v) {
        double z;
        do {
            z = rand_normal(rng);
        } while (std::abs(z) > 2.0);
        x = sigma * z;
    }
    return t;
}

inline ag::Tensor kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    ag::Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / double(fan_in));
    for (auto& x : t.v) x = rand_uniform(rng, -bound, bound);
    return t;
}

// ------------------------------------------------------------------ layers

struct Dense {
    ag::Var w, b;

    Dense() = default;
    Dense(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
          double sigma = 0.0) {
        w = ps.add(name + ".w", sigma > 0 ? trunc_normal({out, in}, sigma, rng)
                                          : kaiming_uniform({out, in}, in, rng));
        b = ps.add(name + ".b", ag::Tensor({out}));
    }

    ag::Var operator()(const ag::Var& x) const { return ag::linear(x, w, b); }
};

struct Conv {
    ag::Var w, b;
    std::size_t stride = 1, pad = 1;

    Conv() = default;
    Conv(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         std::size_t stride_, std::size_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", kaiming_uniform({out, in, k, k}, in * k * k, rng));
        b = ps.add(name + ".b", ag::Tensor({out}));
    }

    ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct LayerNorm {
    ag::Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, std::size_t d) {
        gamma = ps.add(name + ".gamma", ag::Tensor({d}, 1.0));
        beta = ps.add(name + ".beta", ag::Tensor({d}));
    }

    ag::Var operator()(const ag::Var& x) const { return ag::layernorm_rows(x, gamma, beta); }
};

// --------------------------------------------------------------- optimizer

struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t t = 0;
    std::vector<std::vector<double>> m, v;
    std::vector<ag::Var> params;

    explicit AdamW(const std::vector<ag::Var>& ps, double lr_ = 1e-3, double wd = 0.0)
        : lr(lr_), weight_decay(wd), params(ps) {
        for (const auto& p : params) {
            m.emplace_back(p->val.size(), 0.0);
            v.emplace_back(p->val.size(), 0.0);
        }
    }

    explicit AdamW(ParamStore& store, double lr_ = 1e-3, double wd = 0.0)
        : AdamW(vars_of(store), lr_, wd) {}

    static std::vector<ag::Var> vars_of(ParamStore& store) {
        std::vector<ag::Var> out;
        for (auto& [_, p] : store.params) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto& p : params) p->zero_grad();
    }

    void step() {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k]->val;
            const auto& g = params[k]->grad;
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[k][i] = beta1 * m[k][i] + (1 - beta1) * g[i];
                v[k][i] = beta2 * v[k][i] + (1 - beta2) * g[i] * g[i];
                const double mhat = m[k][i] / bc1;
                const double vhat = v[k][i] / bc2;
                p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
            }
        }
    }
};

}  // namespace mammolab::nn
