#pragma once

// Reference-element quadrature rules.
//
// All rules live on the unit reference simplex: [0,1] in 1D and
// {(a,b) : a,b >= 0, a+b <= 1} in 2D. Points are given in reference
// coordinates; weights sum to the reference measure (1 resp. 1/2).

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "errors.hpp"

namespace fraccal::quad {

struct Rule1D {
    std::vector<double> x;
    std::vector<double> w;
    int size() const { return static_cast<int>(x.size()); }
};

namespace detail {

// Gauss-Legendre nodes on [-1,1] by Newton iteration on P_n.
inline Rule1D make_gauss_legendre(int n) {
    Rule1D r;
    r.x.resize(n);
    r.w.resize(n);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int k = 1; k <= n; ++k) {
                double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
            }
            dp = n * (z * p0 - p1) / (z * z - 1.0);
            double dz = p0 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) {
                break;
            }
        }
        // recompute derivative at converged node
        double p0 = 1.0, p1 = 0.0;
        for (int k = 1; k <= n; ++k) {
            double p2 = p1;
            p1 = p0;
            p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
        }
        dp = n * (z * p0 - p1) / (z * z - 1.0);
        double w = 2.0 / ((1.0 - z * z) * dp * dp);
        // map to [0,1]
        r.x[i] = 0.5 * (1.0 - z);
        r.x[n - 1 - i] = 0.5 * (1.0 + z);
        r.w[i] = 0.5 * w;
        r.w[n - 1 - i] = 0.5 * w;
    }
    return r;
}

inline constexpr int kMaxOrder = 64;

}  // namespace detail

/// n-point Gauss-Legendre rule on [0,1], exact for polynomials of degree 2n-1.
inline const Rule1D& gauss_legendre(int n) {
    if (n < 1 || n > detail::kMaxOrder) {
        throw ContractError("gauss_legendre: order out of range");
    }
    static const std::array<Rule1D, detail::kMaxOrder + 1> table = [] {
        std::array<Rule1D, detail::kMaxOrder + 1> t;
        for (int k = 1; k <= detail::kMaxOrder; ++k) {
            t[k] = detail::make_gauss_legendre(k);
        }
        return t;
    }();
    return table[n];
}

/// Quadrature on the reference simplex of dimension Dim.
template <int Dim>
struct SimplexRule {
    std::vector<std::array<double, Dim>> x;
    std::vector<double> w;
    int size() const { return static_cast<int>(w.size()); }
};

/// Collapsed (conical) Gauss rule; exact for degree 2n-2 in 2D, 2n-1 in 1D.
template <int Dim>
inline SimplexRule<Dim> make_simplex_rule(int n) {
    SimplexRule<Dim> r;
    const auto& g = gauss_legendre(n);
    if constexpr (Dim == 1) {
        for (int i = 0; i < n; ++i) {
            r.x.push_back({g.x[i]});
            r.w.push_back(g.w[i]);
        }
    } else {
        static_assert(Dim == 2);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                const double a = g.x[i];
                const double b = g.x[j] * (1.0 - a);
                r.x.push_back({a, b});
                r.w.push_back(g.w[i] * g.w[j] * (1.0 - a));
            }
        }
    }
    return r;
}

/// Cached simplex rules for orders 1..kMaxOrder.
template <int Dim>
inline const SimplexRule<Dim>& simplex_rule(int n) {
    if (n < 1 || n > detail::kMaxOrder) {
        throw ContractError("simplex_rule: order out of range");
    }
    static const std::array<SimplexRule<Dim>, detail::kMaxOrder + 1> table = [] {
        std::array<SimplexRule<Dim>, detail::kMaxOrder + 1> t;
        for (int k = 1; k <= detail::kMaxOrder; ++k) {
            t[k] = make_simplex_rule<Dim>(k);
        }
        return t;
    }();
    return table[n];
}

}  // namespace fraccal::quad
