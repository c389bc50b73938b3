#pragma once

// Independent reference computations shared by the unit and acceptance
// suites: central finite differences and a random network that touches
// every differentiable op.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "miro/diffcore.hpp"
#include "miro/rng.hpp"

namespace oracle {

using miro::diff::Array;
using miro::diff::Graph;
using miro::diff::Var;

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true
/// gradient is ~0 from dividing roundoff by roundoff.
inline double rel_err(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences of f with respect to every entry of every tensor.
inline std::vector<Array> fd_gradient(const std::function<double(const std::vector<Array>&)>& f,
                                      std::vector<Array> params, double h = 1e-5) {
    std::vector<Array> out;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Array g = Array::zeros(params[p].shape());
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double keep = params[p][i];
            params[p][i] = keep + h;
            const double up = f(params);
            params[p][i] = keep - h;
            const double down = f(params);
            params[p][i] = keep;
            g[i] = (up - down) / (2.0 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

/// Small random network: affine, gelu, sin, cos, matmul, scalar mul,
/// pool_mean, concat, sub, mse, sum and mean all feed a scalar loss.
struct RandomNet {
    std::size_t m = 0, k = 0, h = 0;
    Array x, target;
    std::vector<Array> params;  // W1[k,h] b1[h] W2[h,h] s[] W3[h+k,2] b3[2]

    Var loss(Graph& g, std::span<const Var> p) const {
        const Var xv = g.input(x);
        const Var h1 = g.gelu(g.affine(xv, p[0], p[1]));
        const Var a = g.sin(h1);
        const Var b = g.cos(g.matmul(h1, p[2]));
        const Var scaled = g.mul(p[3], h1);
        const Var pooled = g.pool_mean(std::vector<Var>{a, b, scaled});
        const Var cat = g.concat({pooled, xv});
        const Var out = g.affine(cat, p[4], p[5]);
        const Var t = g.input(target);
        const Var fit = g.mse(out, t);
        const Var drift = g.mean(g.mul(g.sub(out, t), out));
        const Var total = g.sum(g.sub(out, t));
        return g.add(g.add(fit, drift), g.mul(g.input(Array::scalar(0.1)), total));
    }

    double value(const std::vector<Array>& ps) const {
        Graph g;
        std::vector<Var> pv;
        for (const auto& a : ps) pv.push_back(g.input(a));
        return g.value(loss(g, pv)).item();
    }

    std::vector<Array> autodiff() const {
        Graph g;
        std::vector<Var> pv;
        for (const auto& a : params) pv.push_back(g.input(a));
        const auto grads = g.backward(loss(g, pv));
        std::vector<Array> out;
        for (Var v : pv) out.push_back(grads[v]);
        return out;
    }
};

inline RandomNet random_net(std::uint64_t seed) {
    miro::Rng rng(seed);
    std::uniform_int_distribution<std::size_t> small(1, 4);
    std::uniform_int_distribution<std::size_t> width(2, 6);
    std::normal_distribution<double> n01(0.0, 1.0);
    auto fill = [&](miro::diff::Shape shape, double scale) {
        Array a = Array::zeros(std::move(shape));
        for (double& v : a.mutable_data()) v = scale * n01(rng);
        return a;
    };
    RandomNet net;
    net.m = small(rng);
    net.k = small(rng);
    net.h = width(rng);
    net.x = fill({net.m, net.k}, 1.0);
    net.target = fill({net.m, 2}, 1.0);
    net.params = {fill({net.k, net.h}, 0.7), fill({net.h}, 0.3),       fill({net.h, net.h}, 0.5),
                  fill({}, 1.0),             fill({net.h + net.k, 2}, 0.5), fill({2}, 0.3)};
    return net;
}

/// Largest rel_err between autodiff and central differences over every
/// parameter entry of one random network.
inline double worst_gradient_error(std::uint64_t seed) {
    const RandomNet net = random_net(seed);
    const auto ad = net.autodiff();
    const auto fd = fd_gradient([&](const std::vector<Array>& ps) { return net.value(ps); }, net.params);
    double worst = 0.0;
    for (std::size_t p = 0; p < ad.size(); ++p) {
        for (std::size_t i = 0; i < ad[p].size(); ++i) worst = std::max(worst, rel_err(ad[p][i], fd[p][i]));
    }
    return worst;
}

}  // namespace oracle
