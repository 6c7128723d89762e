#pragma once

// The fractional kernel c_{d,s} |x-y|^{-d-2s} and its integrals against P1
// basis functions: exterior (box complement) weights, regular element-pair
// integrals and singular element-pair integrals for the energy form.
//
// Pair integrals are returned WITHOUT the normalization constant c_{d,s};
// the assembly layer multiplies it in once.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include <Eigen/Dense>

#include "errors.hpp"
#include "geometry.hpp"
#include "quadrature.hpp"

namespace fraccal {

/// Fractional order s with the dimension-dependent normalization constant.
struct FracOrder {
    double s = 0.5;
    int d = 1;
    double c_ds = 0.0;

    double exponent() const { return d + 2.0 * s; }
};

/// c_{d,s} = 4^s s Gamma(d/2+s) / (pi^{d/2} Gamma(1-s)).
inline double normalization_constant(double s, int d) {
    return std::pow(4.0, s) * s * std::tgamma(0.5 * d + s) /
           (std::pow(std::numbers::pi, 0.5 * d) * std::tgamma(1.0 - s));
}

inline FracOrder make_frac_order(double s, int d) {
    if (!(s > 0.0 && s < 1.0)) {
        throw ConfigError("fractional order s must lie in (0,1)");
    }
    if (d != 1 && d != 2) {
        throw ConfigError("dimension must be 1 or 2");
    }
    return FracOrder{s, d, normalization_constant(s, d)};
}

/// c_{d,s} |x-y|^{-d-2s}.
template <int Dim>
double kernel_eval(const FracOrder& fo, const Point<Dim>& x, const Point<Dim>& y) {
    const double r = distance<Dim>(x, y);
    if (r == 0.0) {
        throw DomainError("kernel_eval: x == y is the singular point");
    }
    return fo.c_ds * std::pow(r, -fo.exponent());
}

namespace detail {

// int_0^beta cos(phi)^{2s} dphi = B(sin^2 beta; 1/2, s+1/2) / 2 for 0 <= beta <= pi/2.
inline double cos_power_integral(double s, double beta) {
    if (beta <= 0.0) {
        return 0.0;
    }
    const double sn = std::sin(beta);
    return 0.5 * boost::math::beta(0.5, s + 0.5, sn * sn);
}

}  // namespace detail

/// int over R^d \ (-half,half)^d of |x-y|^{-d-2s} dy, for x strictly inside the box.
///
/// 1D uses the closed form; 2D integrates rho(theta)^{-2s}/(2s) over the
/// directions, one angular segment per box side.
template <int Dim>
double box_complement_weight(double s, const Point<Dim>& x, double half) {
    for (int i = 0; i < Dim; ++i) {
        if (!(std::abs(x[i]) < half)) {
            throw DomainError("box_complement_weight: point not strictly inside the box");
        }
    }
    if constexpr (Dim == 1) {
        return (std::pow(half - x[0], -2.0 * s) + std::pow(half + x[0], -2.0 * s)) / (2.0 * s);
    } else {
        // distances to right, top, left, bottom sides (counter-clockwise)
        const std::array<double, 4> d = {half - x[0], half - x[1], half + x[0], half + x[1]};
        double total = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double dk = d[k];
            const double prev = d[(k + 3) % 4];
            const double next = d[(k + 1) % 4];
            const double span = detail::cos_power_integral(s, std::atan(prev / dk)) +
                                detail::cos_power_integral(s, std::atan(next / dk));
            total += std::pow(dk, -2.0 * s) * span;
        }
        return total / (2.0 * s);
    }
}

/// Tail integral int_{R^d \ Omega_R} |x-y|^{-d-2s} dy (no normalization constant).
template <int Dim>
double tail_weight(const FracOrder& fo, const Point<Dim>& x, double R) {
    return box_complement_weight<Dim>(fo.s, x, R);
}

/// Quadrature orders for element-pair integrals, chosen by separation.
///
/// ratio = dist(A,B) / max(diam A, diam B). Orders are Gauss points per
/// axis of the (collapsed) reference rule.
struct QuadratureOptions {
    std::array<double, 4> ratio_breaks = {8.0, 3.0, 1.5, 0.5};
    std::array<int, 5> orders_1d = {6, 8, 10, 14, 20};
    std::array<int, 5> orders_2d = {3, 5, 6, 8, 10};
    int singular_1d = 16;        ///< Gauss points for 1D touching pairs
    int singular_2d = 12;        ///< per-axis points for 2D vertex / edge pairs
    int singular_angular = 16;   ///< points per angular segment, identical pairs
    std::array<int, 5> point_orders_1d = {6, 8, 10, 14, 20};  ///< point-to-element integrals
    std::array<int, 5> point_orders_2d = {4, 6, 8, 10, 14};
    int bext_order_1d = 10;        ///< order on interior elements for the exterior coupling
    int bext_order_2d = 6;
    int exterior_order_1d = 8;     ///< order for one-sided weight integrals
    int exterior_order_2d = 8;
    int exterior_depth_1d = 30;    ///< graded subdivision levels towards the interface
    int exterior_depth_2d = 6;

    template <int Dim>
    int order_for_ratio(double ratio) const {
        const auto& orders = Dim == 1 ? orders_1d : orders_2d;
        for (int k = 0; k < 4; ++k) {
            if (ratio >= ratio_breaks[k]) {
                return orders[k];
            }
        }
        return orders[4];
    }
};

/// Geometric simplex: vertices plus the map from reference coordinates.
template <int Dim>
struct Simplex {
    std::array<Point<Dim>, Dim + 1> v;

    /// x = v0 + sum_i xi_i (v_{i+1} - v0)
    Point<Dim> map(const std::array<double, Dim>& xi) const {
        Point<Dim> p = v[0];
        for (int i = 0; i < Dim; ++i) {
            for (int j = 0; j < Dim; ++j) {
                p[j] += xi[i] * (v[i + 1][j] - v[0][j]);
            }
        }
        return p;
    }

    std::array<double, Dim + 1> barycentric_of_ref(const std::array<double, Dim>& xi) const {
        std::array<double, Dim + 1> l{};
        double sum = 0.0;
        for (int i = 0; i < Dim; ++i) {
            l[i + 1] = xi[i];
            sum += xi[i];
        }
        l[0] = 1.0 - sum;
        return l;
    }

    double measure() const {
        if constexpr (Dim == 1) {
            return std::abs(v[1][0] - v[0][0]);
        } else {
            return 0.5 * std::abs((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) -
                                  (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]));
        }
    }

    double diameter() const {
        double d = 0.0;
        for (int i = 0; i <= Dim; ++i) {
            for (int j = i + 1; j <= Dim; ++j) {
                d = std::max(d, distance<Dim>(v[i], v[j]));
            }
        }
        return d;
    }

    /// Gradients of the barycentric coordinates.
    std::array<Point<Dim>, Dim + 1> gradients() const {
        std::array<Point<Dim>, Dim + 1> g{};
        if constexpr (Dim == 1) {
            const double len = v[1][0] - v[0][0];
            g[0] = {-1.0 / len};
            g[1] = {1.0 / len};
        } else {
            const double det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) -
                               (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
            for (int k = 0; k < 3; ++k) {
                const auto& a = v[(k + 1) % 3];
                const auto& b = v[(k + 2) % 3];
                // grad lambda_k is perpendicular to the opposite edge
                g[k] = {(a[1] - b[1]) / det, (b[0] - a[0]) / det};
            }
        }
        return g;
    }
};

namespace detail {

template <int Dim>
double segment_distance(const Point<Dim>& p, const Point<Dim>& a, const Point<Dim>& b) {
    double ab2 = 0.0, t = 0.0;
    for (int i = 0; i < Dim; ++i) {
        ab2 += (b[i] - a[i]) * (b[i] - a[i]);
        t += (p[i] - a[i]) * (b[i] - a[i]);
    }
    t = ab2 > 0.0 ? std::clamp(t / ab2, 0.0, 1.0) : 0.0;
    Point<Dim> q;
    for (int i = 0; i < Dim; ++i) {
        q[i] = a[i] + t * (b[i] - a[i]);
    }
    return distance<Dim>(p, q);
}

}  // namespace detail

/// Distance between two non-overlapping simplices.
template <int Dim>
double simplex_distance(const Simplex<Dim>& A, const Simplex<Dim>& B) {
    if constexpr (Dim == 1) {
        const double a0 = std::min(A.v[0][0], A.v[1][0]), a1 = std::max(A.v[0][0], A.v[1][0]);
        const double b0 = std::min(B.v[0][0], B.v[1][0]), b1 = std::max(B.v[0][0], B.v[1][0]);
        return std::max({0.0, b0 - a1, a0 - b1});
    } else {
        double d = std::numeric_limits<double>::infinity();
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                d = std::min(d, detail::segment_distance<2>(A.v[i], B.v[j], B.v[(j + 1) % 3]));
                d = std::min(d, detail::segment_distance<2>(B.v[i], A.v[j], A.v[(j + 1) % 3]));
            }
        }
        return d;
    }
}

/// Local matrix of an element pair over the union of their vertices:
/// value(a,b) = int_A int_B (phi_a(x)-phi_a(y)) (phi_b(x)-phi_b(y)) |x-y|^{-d-2s} dy dx.
template <int Dim>
struct PairMatrix {
    std::vector<int> nodes;  ///< global node ids (union of both vertex sets)
    Eigen::MatrixXd value;

    double at(int node_a, int node_b) const {
        auto ia = std::find(nodes.begin(), nodes.end(), node_a);
        auto ib = std::find(nodes.begin(), nodes.end(), node_b);
        if (ia == nodes.end() || ib == nodes.end()) {
            return 0.0;
        }
        return value(ia - nodes.begin(), ib - nodes.begin());
    }
};

enum class Adjacency { disjoint, vertex, edge, identical };

template <int Dim>
Adjacency classify_pair(const std::array<int, Dim + 1>& a, const std::array<int, Dim + 1>& b) {
    int shared = 0;
    for (int i : a) {
        shared += static_cast<int>(std::count(b.begin(), b.end(), i));
    }
    if (shared == 0) {
        return Adjacency::disjoint;
    }
    if (shared == Dim + 1) {
        return Adjacency::identical;
    }
    if (Dim == 2 && shared == 2) {
        return Adjacency::edge;
    }
    return Adjacency::vertex;
}

namespace detail {

template <int Dim>
Simplex<Dim> simplex_of(const Mesh<Dim>& mesh, const std::array<int, Dim + 1>& ids) {
    Simplex<Dim> s;
    for (int k = 0; k <= Dim; ++k) {
        s.v[k] = mesh.nodes[ids[k]];
    }
    return s;
}

// Regular pair: tensor Gauss on both simplices.
template <int Dim>
PairMatrix<Dim> disjoint_pair(const FracOrder& fo, const Mesh<Dim>& mesh, int ea, int eb,
                              const QuadratureOptions& qo) {
    const auto& ia = mesh.elements[ea];
    const auto& ib = mesh.elements[eb];
    const auto A = simplex_of<Dim>(mesh, ia);
    const auto B = simplex_of<Dim>(mesh, ib);
    const double ratio = simplex_distance<Dim>(A, B) / std::max(A.diameter(), B.diameter());
    const auto& rule = quad::simplex_rule<Dim>(qo.order_for_ratio<Dim>(ratio));
    const int nq = rule.size();
    const double jac_a = A.measure() * (Dim == 1 ? 1.0 : 2.0);
    const double jac_b = B.measure() * (Dim == 1 ? 1.0 : 2.0);

    std::vector<Point<Dim>> xa(nq), xb(nq);
    std::vector<double> wa(nq), wb(nq);
    Eigen::MatrixXd la(nq, Dim + 1), lb(nq, Dim + 1);
    for (int p = 0; p < nq; ++p) {
        xa[p] = A.map(rule.x[p]);
        xb[p] = B.map(rule.x[p]);
        wa[p] = rule.w[p] * jac_a;
        wb[p] = rule.w[p] * jac_b;
        const auto l = A.barycentric_of_ref(rule.x[p]);
        for (int k = 0; k <= Dim; ++k) {
            la(p, k) = l[k];
            lb(p, k) = l[k];
        }
    }
    const double half_expo = -0.5 * fo.exponent();
    Eigen::MatrixXd K(nq, nq);
    for (int p = 0; p < nq; ++p) {
        for (int q = 0; q < nq; ++q) {
            double r2 = 0.0;
            for (int i = 0; i < Dim; ++i) {
                const double t = xa[p][i] - xb[q][i];
                r2 += t * t;
            }
            K(p, q) = wa[p] * wb[q] * std::pow(r2, half_expo);
        }
    }
    const Eigen::VectorXd row = K.rowwise().sum();
    const Eigen::VectorXd col = K.colwise().sum().transpose();

    PairMatrix<Dim> pm;
    pm.nodes.assign(ia.begin(), ia.end());
    pm.nodes.insert(pm.nodes.end(), ib.begin(), ib.end());
    constexpr int n = Dim + 1;
    pm.value = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    pm.value.topLeftCorner(n, n) = la.transpose() * row.asDiagonal() * la;
    pm.value.bottomRightCorner(n, n) = lb.transpose() * col.asDiagonal() * lb;
    const Eigen::MatrixXd cross = -(la.transpose() * K * lb);
    pm.value.topRightCorner(n, n) = cross;
    pm.value.bottomLeftCorner(n, n) = cross.transpose();
    return pm;
}

// Union of vertex ids with the shared ones first, in a fixed order.
template <int Dim>
std::vector<int> union_nodes(const std::array<int, Dim + 1>& a, const std::array<int, Dim + 1>& b) {
    std::vector<int> out(a.begin(), a.end());
    for (int i : b) {
        if (std::find(out.begin(), out.end(), i) == out.end()) {
            out.push_back(i);
        }
    }
    return out;
}

// Identical pair: int_K int_K F(x-y) = int F(z) |K| (1 - |z|_{K-K})^d dz, with
// F homogeneous of degree -2s; the radial integral is a Beta function.
template <int Dim>
PairMatrix<Dim> identical_pair(const FracOrder& fo, const Mesh<Dim>& mesh, int e, const QuadratureOptions& qo) {
    const auto& ids = mesh.elements[e];
    const auto K = simplex_of<Dim>(mesh, ids);
    const auto g = K.gradients();
    const double s = fo.s;
    PairMatrix<Dim> pm;
    pm.nodes.assign(ids.begin(), ids.end());
    pm.value = Eigen::MatrixXd::Zero(Dim + 1, Dim + 1);
    // |K| B(2-2s, d+1)
    const double beta = std::tgamma(2.0 - 2.0 * s) * std::tgamma(Dim + 1.0) / std::tgamma(Dim + 3.0 - 2.0 * s);
    if constexpr (Dim == 1) {
        const double h = K.measure();
        // two directions, rho = h
        const double radial = 2.0 * K.measure() * std::pow(h, 2.0 - 2.0 * s) * beta;
        for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
                pm.value(a, b) = g[a][0] * g[b][0] * radial;
            }
        }
    } else {
        // Difference body K - K: hexagon with vertices v_i - v_j.
        std::vector<Point<2>> hex;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                if (i != j) {
                    hex.push_back({K.v[i][0] - K.v[j][0], K.v[i][1] - K.v[j][1]});
                }
            }
        }
        std::sort(hex.begin(), hex.end(), [](const Point<2>& p, const Point<2>& q) {
            return std::atan2(p[1], p[0]) < std::atan2(q[1], q[0]);
        });
        const auto& gl = quad::gauss_legendre(qo.singular_angular);
        for (int k = 0; k < 6; ++k) {
            const auto& p = hex[k];
            const auto& q = hex[(k + 1) % 6];
            double t0 = std::atan2(p[1], p[0]);
            double t1 = std::atan2(q[1], q[0]);
            if (t1 <= t0) {
                t1 += 2.0 * std::numbers::pi;
            }
            // support line of the edge p-q: distance and normal angle
            const double ex = q[0] - p[0], ey = q[1] - p[1];
            const double len = std::hypot(ex, ey);
            const double nx = ey / len, ny = -ex / len;
            const double dist = p[0] * nx + p[1] * ny;
            const double tn = std::atan2(ny, nx);
            for (int i = 0; i < gl.size(); ++i) {
                const double t = t0 + (t1 - t0) * gl.x[i];
                const double w = (t1 - t0) * gl.w[i];
                const double rho = dist / std::cos(t - tn);
                const double c = std::cos(t), sn = std::sin(t);
                const double rw = w * std::pow(rho, 2.0 - 2.0 * s) * K.measure() * beta;
                for (int a = 0; a < 3; ++a) {
                    const double da = g[a][0] * c + g[a][1] * sn;
                    for (int b = 0; b < 3; ++b) {
                        pm.value(a, b) += da * (g[b][0] * c + g[b][1] * sn) * rw;
                    }
                }
            }
        }
    }
    return pm;
}

// Accumulates D_a D_b |x-y|^{-d-2s} * weight into the local matrix, given the
// barycentric coordinates of x in A and y in B and the union index maps.
template <int Dim>
void accumulate_pair_point(Eigen::MatrixXd& M, const std::array<double, Dim + 1>& lx,
                           const std::array<double, Dim + 1>& ly, const std::array<int, Dim + 1>& map_a,
                           const std::array<int, Dim + 1>& map_b, double kernel_weight) {
    // D over union nodes: phi(x) - phi(y)
    std::array<double, 2 * Dim + 2> D{};
    for (int k = 0; k <= Dim; ++k) {
        D[map_a[k]] += lx[k];
        D[map_b[k]] -= ly[k];
    }
    const int n = static_cast<int>(M.rows());
    for (int a = 0; a < n; ++a) {
        const double da = D[a] * kernel_weight;
        for (int b = 0; b < n; ++b) {
            M(a, b) += da * D[b];
        }
    }
}

// Reorders vertex ids so the shared ones come first, in the order of `shared`.
template <int Dim>
std::array<int, Dim + 1> shared_first(const std::array<int, Dim + 1>& ids, const std::vector<int>& shared) {
    std::array<int, Dim + 1> out{};
    int k = 0;
    for (int s : shared) {
        out[k++] = s;
    }
    for (int i : ids) {
        if (std::find(shared.begin(), shared.end(), i) == shared.end()) {
            out[k++] = i;
        }
    }
    return out;
}

// Pair sharing exactly one vertex. With the shared vertex at the reference
// origin the integrand is homogeneous of degree 2-d-2s in the 2d reference
// variables; splitting by the larger first coordinate t integrates t out exactly.
template <int Dim>
PairMatrix<Dim> vertex_pair(const FracOrder& fo, const Mesh<Dim>& mesh, int ea, int eb,
                            const QuadratureOptions& qo) {
    const auto& ia0 = mesh.elements[ea];
    const auto& ib0 = mesh.elements[eb];
    int shared = -1;
    for (int i : ia0) {
        if (std::find(ib0.begin(), ib0.end(), i) != ib0.end()) {
            shared = i;
        }
    }
    const auto ia = shared_first<Dim>(ia0, {shared});
    const auto ib = shared_first<Dim>(ib0, {shared});
    PairMatrix<Dim> pm;
    pm.nodes = union_nodes<Dim>(ia, ib);
    const int n = static_cast<int>(pm.nodes.size());
    pm.value = Eigen::MatrixXd::Zero(n, n);
    std::array<int, Dim + 1> map_a{}, map_b{};
    for (int k = 0; k <= Dim; ++k) {
        map_a[k] = static_cast<int>(std::find(pm.nodes.begin(), pm.nodes.end(), ia[k]) - pm.nodes.begin());
        map_b[k] = static_cast<int>(std::find(pm.nodes.begin(), pm.nodes.end(), ib[k]) - pm.nodes.begin());
    }
    const auto A = simplex_of<Dim>(mesh, ia);
    const auto B = simplex_of<Dim>(mesh, ib);
    const double expo = -fo.exponent();
    const double s = fo.s;

    if constexpr (Dim == 1) {
        // x = P + u (QA - P), y = P + v (QB - P)
        const double jac = A.measure() * B.measure() / (3.0 - 2.0 * s);
        const auto& gl = quad::gauss_legendre(qo.singular_1d);
        for (int i = 0; i < gl.size(); ++i) {
            const double eta = gl.x[i];
            for (int sw = 0; sw < 2; ++sw) {
                const double u = sw == 0 ? 1.0 : eta;
                const double v = sw == 0 ? eta : 1.0;
                const Point<1> x = A.map({u});
                const Point<1> y = B.map({v});
                const double kw = gl.w[i] * jac * std::pow(std::abs(x[0] - y[0]), expo);
                accumulate_pair_point<1>(pm.value, {1.0 - u, u}, {1.0 - v, v}, map_a, map_b, kw);
            }
        }
    } else {
        // Reference triangle {0 <= x2 <= x1 <= 1}: x = P + x1 (Q1-P) + x2 (Q2-Q1).
        auto to_ref = [](double x1, double x2) { return std::array<double, 2>{x1 - x2, x2}; };
        const double jac = 4.0 * A.measure() * B.measure() / (4.0 - 2.0 * s);
        const auto& gl = quad::gauss_legendre(qo.singular_2d);
        const int m = gl.size();
        for (int i1 = 0; i1 < m; ++i1) {
            for (int i2 = 0; i2 < m; ++i2) {
                for (int i3 = 0; i3 < m; ++i3) {
                    const double e1 = gl.x[i1], e2 = gl.x[i2], e3 = gl.x[i3];
                    const double w = gl.w[i1] * gl.w[i2] * gl.w[i3] * e2 * jac;
                    const auto far = to_ref(1.0, e1);
                    const auto near = to_ref(e2, e2 * e3);
                    for (int sw = 0; sw < 2; ++sw) {
                        const auto& ra = sw == 0 ? far : near;
                        const auto& rb = sw == 0 ? near : far;
                        const auto x = A.map(ra);
                        const auto y = B.map(rb);
                        const double kw = w * std::pow(distance<2>(x, y), expo);
                        accumulate_pair_point<2>(pm.value, A.barycentric_of_ref(ra), B.barycentric_of_ref(rb),
                                                 map_a, map_b, kw);
                    }
                }
            }
        }
    }
    return pm;
}

// Triangles sharing the edge P0P1: K = (P0,P1,P2), K' = (P0,P1,P3). In the
// relative variables (w = u-u', v, v') the integrand is homogeneous of degree
// -2s and the remaining variable integrates to the length of an interval,
// which is affine along rays; the radial integral is done in closed form on the
// l1 unit sphere, split along the kinks of that length function.
inline PairMatrix<2> edge_pair(const FracOrder& fo, const Mesh<2>& mesh, int ea, int eb,
                               const QuadratureOptions& qo) {
    const auto& ia0 = mesh.elements[ea];
    const auto& ib0 = mesh.elements[eb];
    std::vector<int> shared;
    for (int i : ia0) {
        if (std::find(ib0.begin(), ib0.end(), i) != ib0.end()) {
            shared.push_back(i);
        }
    }
    const auto ia = shared_first<2>(ia0, shared);
    const auto ib = shared_first<2>(ib0, shared);
    PairMatrix<2> pm;
    pm.nodes = union_nodes<2>(ia, ib);  // P0, P1, P2, P3
    pm.value = Eigen::MatrixXd::Zero(4, 4);

    const auto& P0 = mesh.nodes[ia[0]];
    const auto& P1 = mesh.nodes[ia[1]];
    const auto& P2 = mesh.nodes[ia[2]];
    const auto& P3 = mesh.nodes[ib[2]];
    const Point<2> e01 = {P1[0] - P0[0], P1[1] - P0[1]};
    const Point<2> e12 = {P2[0] - P1[0], P2[1] - P1[1]};
    const Point<2> e13 = {P3[0] - P1[0], P3[1] - P1[1]};
    const double jac_a = std::abs(e01[0] * e12[1] - e01[1] * e12[0]);
    const double jac_b = std::abs(e01[0] * e13[1] - e01[1] * e13[0]);
    const double s = fo.s;
    const double expo = -fo.exponent();
    const double radial = jac_a * jac_b / ((3.0 - 2.0 * s) * (4.0 - 2.0 * s));

    // Pieces of the (a,b) simplex free of kinks, per sign of w.
    using Tri = std::array<Point<2>, 3>;
    const std::array<Tri, 3> plus = {Tri{{{0.0, 0.0}, {0.5, 0.0}, {0.0, 1.0}}},
                                     Tri{{{0.5, 0.0}, {0.5, 0.5}, {0.0, 1.0}}},
                                     Tri{{{0.5, 0.0}, {1.0, 0.0}, {0.5, 0.5}}}};
    const std::array<Tri, 3> minus = {Tri{{{0.0, 0.0}, {1.0, 0.0}, {0.0, 0.5}}},
                                      Tri{{{1.0, 0.0}, {0.5, 0.5}, {0.0, 0.5}}},
                                      Tri{{{0.0, 0.5}, {0.5, 0.5}, {0.0, 1.0}}}};
    const auto& rule = quad::simplex_rule<2>(qo.singular_2d + 2);
    for (int sigma : {1, -1}) {
        const auto& pieces = sigma > 0 ? plus : minus;
        for (const auto& T : pieces) {
            const double area2 = std::abs((T[1][0] - T[0][0]) * (T[2][1] - T[0][1]) -
                                          (T[2][0] - T[0][0]) * (T[1][1] - T[0][1]));
            for (int p = 0; p < rule.size(); ++p) {
                const double r1 = rule.x[p][0], r2 = rule.x[p][1];
                const double a = T[0][0] + r1 * (T[1][0] - T[0][0]) + r2 * (T[2][0] - T[0][0]);
                const double b = T[0][1] + r1 * (T[1][1] - T[0][1]) + r2 * (T[2][1] - T[0][1]);
                const double tw = sigma * (1.0 - a - b);
                const double tv = a, tvp = b;
                const double m = std::max(0.0, tw) + std::max(tvp, tv - tw);
                const Point<2> z = {tw * e01[0] + tv * e12[0] - tvp * e13[0],
                                    tw * e01[1] + tv * e12[1] - tvp * e13[1]};
                const double kw = rule.w[p] * area2 * radial * std::pow(m, -(3.0 - 2.0 * s)) *
                                  std::pow(std::hypot(z[0], z[1]), expo);
                // D over (P0, P1, P2, P3)
                const std::array<double, 4> D = {-tw, tw - tv + tvp, tv, -tvp};
                for (int i = 0; i < 4; ++i) {
                    for (int j = 0; j < 4; ++j) {
                        pm.value(i, j) += D[i] * D[j] * kw;
                    }
                }
            }
        }
    }
    return pm;
}

}  // namespace detail

/// Local pair matrix for any two elements (dispatch on adjacency).
template <int Dim>
PairMatrix<Dim> pair_matrix(const FracOrder& fo, const Mesh<Dim>& mesh, int ea, int eb,
                            const QuadratureOptions& qo = {}) {
    switch (classify_pair<Dim>(mesh.elements[ea], mesh.elements[eb])) {
        case Adjacency::identical:
            return detail::identical_pair<Dim>(fo, mesh, ea, qo);
        case Adjacency::vertex:
            return detail::vertex_pair<Dim>(fo, mesh, ea, eb, qo);
        case Adjacency::edge:
            if constexpr (Dim == 2) {
                return detail::edge_pair(fo, mesh, ea, eb, qo);
            }
            break;
        case Adjacency::disjoint:
            return detail::disjoint_pair<Dim>(fo, mesh, ea, eb, qo);
    }
    throw ContractError("pair_matrix: unsupported adjacency");
}

/// int_A int_B phi_a(x) phi_b(y) |x-y|^{-d-2s} dy dx for separated elements.
/// phi_a is the hat of node_a restricted to A (zero if node_a is not a vertex of A).
template <int Dim>
double cross_integral(const FracOrder& fo, const Mesh<Dim>& mesh, int ea, int node_a, int eb, int node_b,
                      const QuadratureOptions& qo = {}) {
    if (classify_pair<Dim>(mesh.elements[ea], mesh.elements[eb]) != Adjacency::disjoint) {
        throw ContractError("cross_integral: elements touch; use singular_pair");
    }
    const auto pm = detail::disjoint_pair<Dim>(fo, mesh, ea, eb, qo);
    const auto& ia = mesh.elements[ea];
    const auto& ib = mesh.elements[eb];
    auto pa = std::find(ia.begin(), ia.end(), node_a);
    auto pb = std::find(ib.begin(), ib.end(), node_b);
    if (pa == ia.end() || pb == ib.end()) {
        return 0.0;
    }
    // cross block holds -int phi_a(x) phi_b(y) k
    return -pm.value(pa - ia.begin(), Dim + 1 + (pb - ib.begin()));
}

/// Energy-form contribution of a touching element pair for two hats.
template <int Dim>
double singular_pair(const FracOrder& fo, const Mesh<Dim>& mesh, int ea, int node_a, int eb, int node_b,
                     const QuadratureOptions& qo = {}) {
    if (classify_pair<Dim>(mesh.elements[ea], mesh.elements[eb]) == Adjacency::disjoint) {
        throw ContractError("singular_pair: elements do not touch");
    }
    return pair_matrix<Dim>(fo, mesh, ea, eb, qo).at(node_a, node_b);
}

}  // namespace fraccal
