#pragma once

// Shared test helpers: seeded random tensors and the central-finite-difference
// gradient checker used as the oracle for every differentiable op.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "droughtcast/tensor.hpp"

namespace dctest {

using droughtcast::Shape;
using droughtcast::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = false) {
    std::uniform_real_distribution<double> uni(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(droughtcast::shape_numel(shape)));
    for (auto& e : v) e = uni(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Relative error with an absolute floor.
inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite differences against the analytic gradient of a scalar loss.
// Samples up to max_entries entries per input (all entries when the tensor is
// small). loss_fn must rebuild the graph from the same leaf tensors.
inline void check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                            double tol = 1e-4, double h = 1e-5, int max_entries = 8,
                            std::uint64_t seed = 7) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) analytic.push_back(t.grad());

    std::mt19937_64 rng(seed);
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        std::vector<std::size_t> entries;
        if (static_cast<int>(t.numel()) <= max_entries) {
            for (std::size_t k = 0; k < t.numel(); ++k) entries.push_back(k);
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, t.numel() - 1);
            for (int k = 0; k < max_entries; ++k) entries.push_back(pick(rng));
        }
        for (std::size_t k : entries) {
            const double orig = t.values()[k];
            t.mutable_values()[k] = orig + h;
            const double lp = loss_fn().item();
            t.mutable_values()[k] = orig - h;
            const double lm = loss_fn().item();
            t.mutable_values()[k] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[ti][k];
            EXPECT_LE(rel_err(an, fd), tol)
                << "input " << ti << " entry " << k << ": analytic " << an << " vs fd " << fd;
        }
    }
    for (auto& t : inputs) t.zero_grad();
}

// Weighted sum against fixed pseudo-random coefficients; richer scalarization
// than a plain sum for gradient checks.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.5, 1.5);
    std::vector<double> w(x.numel());
    for (auto& e : w) e = uni(rng);
    Tensor wt = Tensor::from(x.shape(), std::move(w));
    return droughtcast::sum_all(droughtcast::mul(x, wt));
}

}  // namespace dctest
