#pragma once

// Discrete operators on a fitted mesh:
//   A0     interior fractional stiffness, a_R(phi_j, phi_i)
//   M0     interior mass
//   M_q    potential-weighted interior mass
//   B      observation matrix, B_ki = -c int phi_i(y) |x_k - y|^{-d-2s} dy
//   W_obs  mass matrix of the observation hats over W
//   S      A0 + M0
//   b_ext  a_R(u_hf, phi_i) for the interpolated exterior datum

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "errors.hpp"
#include "geometry.hpp"
#include "kernel.hpp"
#include "log.hpp"
#include "quadrature.hpp"

namespace fraccal {

// ---------------------------------------------------------------------------
// Exterior datum

/// Quintic smoothstep clamped to [0,1].
inline double smoothstep5(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

/// Smooth cutoff approximating the indicator of W = Omega_R \ [-inner, inner]^d.
/// Vanishes on [-inner, inner]^d and on the outer boundary; equals 1 once every
/// transition band has been crossed.
struct Cutoff {
    double inner = 1.05;
    double R = 3.0;
    double width = 0.1;

    template <std::size_t N>
    double operator()(const std::array<double, N>& x) const {
        double inside = 1.0;
        double outer = 1.0;
        for (std::size_t i = 0; i < N; ++i) {
            const double a = std::abs(x[i]);
            inside *= 1.0 - smoothstep5((a - inner) / width);
            outer *= smoothstep5((R - a) / width);
        }
        return (1.0 - inside) * outer;
    }
};

template <int Dim>
Cutoff make_cutoff(const DomainSpec<Dim>& spec, double width = 0.1) {
    Cutoff c{spec.w_inner(), spec.R, width};
    if (!(width > 0.0) || !(c.inner + 2.0 * width <= c.R)) {
        throw ConfigError("cutoff width must be positive and both transition bands must fit inside W");
    }
    return c;
}

/// Nodal interpolant over all mesh nodes.
template <int Dim, class F>
Eigen::VectorXd interpolate(const Mesh<Dim>& mesh, F&& f) {
    Eigen::VectorXd u(static_cast<Eigen::Index>(mesh.nodes.size()));
    for (std::size_t n = 0; n < mesh.nodes.size(); ++n) {
        u[static_cast<Eigen::Index>(n)] = f(mesh.nodes[n]);
    }
    return u;
}

/// Extends an interior coefficient vector by zero to all nodes.
template <int Dim>
Eigen::VectorXd dofs_to_nodal(const Mesh<Dim>& mesh, const Eigen::VectorXd& v) {
    if (v.size() != mesh.num_dofs()) {
        throw ContractError("dofs_to_nodal: vector length differs from the number of interior dofs");
    }
    Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.nodes.size()));
    for (int i = 0; i < mesh.num_dofs(); ++i) {
        u[mesh.interior_dofs[i]] = v[i];
    }
    return u;
}

// ---------------------------------------------------------------------------
// Quadrature helpers

template <int Dim>
Simplex<Dim> element_simplex(const Mesh<Dim>& mesh, int e) {
    return Simplex<Dim>{mesh.vertices(e)};
}

namespace detail {

// Calls fn(x, lambda, weight) for each point of the order-n rule on K.
template <int Dim, class Fn>
void for_each_point(const Simplex<Dim>& K, int order, Fn&& fn) {
    const auto& rule = quad::simplex_rule<Dim>(order);
    const double jac = K.measure() * (Dim == 1 ? 1.0 : 2.0);
    for (int p = 0; p < rule.size(); ++p) {
        fn(K.map(rule.x[p]), K.barycentric_of_ref(rule.x[p]), rule.w[p] * jac);
    }
}

// Local matrix int_K lambda_a lambda_b weight(x) dx. Sub-simplices that touch
// the singular set of the weight are refined up to `depth` levels.
template <int Dim, class Weight, class Touches>
Eigen::Matrix<double, Dim + 1, Dim + 1> weighted_local_matrix(const Simplex<Dim>& K, Weight&& weight,
                                                              Touches&& touches, int order, int depth) {
    using Ref = std::array<double, Dim>;
    using RefSimplex = std::array<Ref, Dim + 1>;
    Eigen::Matrix<double, Dim + 1, Dim + 1> out = Eigen::Matrix<double, Dim + 1, Dim + 1>::Zero();
    const auto& rule = quad::simplex_rule<Dim>(order);

    auto integrate = [&](const RefSimplex& r) {
        Simplex<Dim> sub;
        for (int k = 0; k <= Dim; ++k) {
            sub.v[k] = K.map(r[k]);
        }
        const double jac = sub.measure() * (Dim == 1 ? 1.0 : 2.0);
        for (int p = 0; p < rule.size(); ++p) {
            Ref xi{};
            for (int k = 0; k < Dim; ++k) {
                xi[k] = r[0][k];
                for (int j = 0; j < Dim; ++j) {
                    xi[k] += rule.x[p][j] * (r[j + 1][k] - r[0][k]);
                }
            }
            const auto lam = K.barycentric_of_ref(xi);
            const double w = rule.w[p] * jac * weight(K.map(xi));
            for (int a = 0; a <= Dim; ++a) {
                for (int b = 0; b <= Dim; ++b) {
                    out(a, b) += w * lam[a] * lam[b];
                }
            }
        }
    };
    auto touching = [&](const RefSimplex& r) {
        for (int k = 0; k <= Dim; ++k) {
            if (touches(K.map(r[k]))) {
                return true;
            }
        }
        return false;
    };
    auto mid = [](const Ref& a, const Ref& b) {
        Ref m{};
        for (int k = 0; k < Dim; ++k) {
            m[k] = 0.5 * (a[k] + b[k]);
        }
        return m;
    };

    RefSimplex root{};
    for (int k = 0; k < Dim; ++k) {
        root[k + 1][k] = 1.0;
    }
    std::vector<std::pair<RefSimplex, int>> stack{{root, 0}};
    while (!stack.empty()) {
        auto [r, level] = stack.back();
        stack.pop_back();
        if (level >= depth || !touching(r)) {
            integrate(r);
            continue;
        }
        if constexpr (Dim == 1) {
            const Ref m = mid(r[0], r[1]);
            stack.push_back({RefSimplex{r[0], m}, level + 1});
            stack.push_back({RefSimplex{m, r[1]}, level + 1});
        } else {
            const Ref m01 = mid(r[0], r[1]);
            const Ref m12 = mid(r[1], r[2]);
            const Ref m02 = mid(r[0], r[2]);
            stack.push_back({RefSimplex{r[0], m01, m02}, level + 1});
            stack.push_back({RefSimplex{m01, r[1], m12}, level + 1});
            stack.push_back({RefSimplex{m02, m12, r[2]}, level + 1});
            stack.push_back({RefSimplex{m01, m12, m02}, level + 1});
        }
    }
    return out;
}

template <int Dim>
double point_simplex_distance(const Point<Dim>& p, const Simplex<Dim>& K) {
    if constexpr (Dim == 1) {
        const double lo = std::min(K.v[0][0], K.v[1][0]);
        const double hi = std::max(K.v[0][0], K.v[1][0]);
        return std::max({0.0, lo - p[0], p[0] - hi});
    } else {
        const auto l = [&] {
            // barycentric coordinates of p
            const double det = (K.v[1][0] - K.v[0][0]) * (K.v[2][1] - K.v[0][1]) -
                               (K.v[2][0] - K.v[0][0]) * (K.v[1][1] - K.v[0][1]);
            const double l1 = ((p[0] - K.v[0][0]) * (K.v[2][1] - K.v[0][1]) -
                               (K.v[2][0] - K.v[0][0]) * (p[1] - K.v[0][1])) / det;
            const double l2 = ((K.v[1][0] - K.v[0][0]) * (p[1] - K.v[0][1]) -
                               (p[0] - K.v[0][0]) * (K.v[1][1] - K.v[0][1])) / det;
            return std::array<double, 3>{1.0 - l1 - l2, l1, l2};
        }();
        if (l[0] >= 0.0 && l[1] >= 0.0 && l[2] >= 0.0) {
            return 0.0;
        }
        double d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < 3; ++k) {
            d = std::min(d, segment_distance<2>(p, K.v[k], K.v[(k + 1) % 3]));
        }
        return d;
    }
}

// Gauss order for integrating a smooth function of x over K against |x-y|^{-d-2s}
// for a point y outside K.
template <int Dim>
int point_order(const QuadratureOptions& qo, const Point<Dim>& y, const Simplex<Dim>& K) {
    const double dist = point_simplex_distance<Dim>(y, K);
    if (dist <= 0.0) {
        throw ContractError("point quadrature: evaluation point lies on the element");
    }
    const double ratio = dist / K.diameter();
    const auto& orders = Dim == 1 ? qo.point_orders_1d : qo.point_orders_2d;
    for (int k = 0; k < 4; ++k) {
        if (ratio >= qo.ratio_breaks[k]) {
            return orders[k];
        }
    }
    return orders[4];
}

// Moments int_K lambda_a(x) |x-y|^{-d-2s} dx for a point y outside K.
template <int Dim>
std::array<double, Dim + 1> point_element_moments(const FracOrder& fo, const Simplex<Dim>& K, const Point<Dim>& y,
                                                   const QuadratureOptions& qo) {
    std::array<double, Dim + 1> acc{};
    const double half_expo = -0.5 * fo.exponent();
    for_each_point<Dim>(K, point_order<Dim>(qo, y, K), [&](const Point<Dim>& x, const auto& lam, double w) {
        double r2 = 0.0;
        for (int i = 0; i < Dim; ++i) {
            r2 += (x[i] - y[i]) * (x[i] - y[i]);
        }
        const double kw = w * std::pow(r2, half_expo);
        for (int k = 0; k <= Dim; ++k) {
            acc[k] += kw * lam[k];
        }
    });
    return acc;
}

// int_K u(x) |x-y|^{-d-2s} dx for the P1 field with vertex values `vals`.
template <int Dim>
double point_element_integral(const FracOrder& fo, const Simplex<Dim>& K, const std::array<double, Dim + 1>& vals,
                              const Point<Dim>& y, const QuadratureOptions& qo) {
    const auto mom = point_element_moments<Dim>(fo, K, y, qo);
    double acc = 0.0;
    for (int k = 0; k <= Dim; ++k) {
        acc += vals[k] * mom[k];
    }
    return acc;
}

template <int Dim>
bool on_box_boundary(const Point<Dim>& x, double half) {
    return sup_norm<Dim>(x) >= half * (1.0 - 1e-12);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Mass matrices

/// Exact P1 mass matrix over `elements`, restricted to nodes with index_of_node >= 0.
template <int Dim>
Eigen::SparseMatrix<double> assemble_mass(const Mesh<Dim>& mesh, std::span<const int> elements,
                                          std::span<const int> index_of_node, int size) {
    std::vector<Eigen::Triplet<double>> trip;
    for (int e : elements) {
        const double m = mesh.measure(e);
        const double diag = Dim == 1 ? m / 3.0 : m / 6.0;
        const double off = Dim == 1 ? m / 6.0 : m / 12.0;
        for (int a = 0; a <= Dim; ++a) {
            const int ia = index_of_node[mesh.elements[e][a]];
            if (ia < 0) {
                continue;
            }
            for (int b = 0; b <= Dim; ++b) {
                const int ib = index_of_node[mesh.elements[e][b]];
                if (ib >= 0) {
                    trip.emplace_back(ia, ib, a == b ? diag : off);
                }
            }
        }
    }
    Eigen::SparseMatrix<double> M(size, size);
    M.setFromTriplets(trip.begin(), trip.end());
    return M;
}

/// M0_ij = (phi_i, phi_j) over Omega_R for interior hats.
template <int Dim>
Eigen::SparseMatrix<double> assemble_interior_mass(const Mesh<Dim>& mesh) {
    return assemble_mass<Dim>(mesh, mesh.omega_elements, mesh.dof_of_node, mesh.num_dofs());
}

/// W_ij = int_W theta_i theta_j for the observation hats.
template <int Dim>
Eigen::SparseMatrix<double> assemble_observation_mass(const Mesh<Dim>& mesh) {
    return assemble_mass<Dim>(mesh, mesh.observation_elements, mesh.obs_of_node, mesh.num_obs());
}

/// (M_q)_ij = int_Omega q phi_i phi_j by Gauss quadrature of the given order.
template <int Dim, class Q>
Eigen::MatrixXd assemble_weighted_mass(const Mesh<Dim>& mesh, Q&& q, int order = 6) {
    const int n = mesh.num_dofs();
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
    for (int e : mesh.omega_elements) {
        Eigen::Matrix<double, Dim + 1, Dim + 1> loc = Eigen::Matrix<double, Dim + 1, Dim + 1>::Zero();
        detail::for_each_point<Dim>(element_simplex(mesh, e), order, [&](const Point<Dim>& x, const auto& lam, double w) {
            const double qw = q(x) * w;
            for (int a = 0; a <= Dim; ++a) {
                for (int b = 0; b <= Dim; ++b) {
                    loc(a, b) += qw * lam[a] * lam[b];
                }
            }
        });
        for (int a = 0; a <= Dim; ++a) {
            const int ia = mesh.dof_of_node[mesh.elements[e][a]];
            for (int b = 0; b <= Dim && ia >= 0; ++b) {
                const int ib = mesh.dof_of_node[mesh.elements[e][b]];
                if (ib >= 0) {
                    M(ia, ib) += loc(a, b);
                }
            }
        }
    }
    return M;
}

/// M_q for an elementwise constant q on the listed elements (zero elsewhere); exact.
template <int Dim>
Eigen::MatrixXd assemble_weighted_mass_p0(const Mesh<Dim>& mesh, std::span<const int> elements,
                                          std::span<const double> values) {
    if (elements.size() != values.size()) {
        throw ContractError("assemble_weighted_mass_p0: element and value counts differ");
    }
    const int n = mesh.num_dofs();
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t k = 0; k < elements.size(); ++k) {
        const int e = elements[k];
        const double m = mesh.measure(e) * values[k];
        const double diag = Dim == 1 ? m / 3.0 : m / 6.0;
        const double off = Dim == 1 ? m / 6.0 : m / 12.0;
        for (int a = 0; a <= Dim; ++a) {
            const int ia = mesh.dof_of_node[mesh.elements[e][a]];
            for (int b = 0; b <= Dim && ia >= 0; ++b) {
                const int ib = mesh.dof_of_node[mesh.elements[e][b]];
                if (ib >= 0) {
                    M(ia, ib) += a == b ? diag : off;
                }
            }
        }
    }
    return M;
}

// ---------------------------------------------------------------------------
// Stiffness

struct AssemblyOptions {
    QuadratureOptions quad;
    /// Warn when the number of element pairs exceeds this.
    std::size_t pair_budget = 20'000'000;
};

/// The interior stiffness split into its computed pieces (all scaled by c_{d,s}).
///   pairs     (c/2) int_{Omega x Omega} D_i D_j k
///   exterior  c int_Omega phi_i phi_j (int_{R^d \ Omega} k dy) dx
///   tail      c int_Omega phi_i phi_j (int_{R^d \ Omega_R} k dy) dx
/// A0 = pairs + exterior. The double integral over Omega_R x Omega_R alone is
/// A0 - tail.
struct StiffnessParts {
    Eigen::MatrixXd pairs;
    Eigen::MatrixXd exterior;
    Eigen::MatrixXd tail;

    Eigen::MatrixXd full() const { return pairs + exterior; }
    Eigen::MatrixXd truncated_double() const { return pairs + exterior - tail; }
};

template <int Dim>
StiffnessParts assemble_stiffness_parts(const Mesh<Dim>& mesh, const FracOrder& fo, const AssemblyOptions& opt = {}) {
    const int n = mesh.num_dofs();
    const auto& qo = opt.quad;
    StiffnessParts parts{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
    const auto& omega = mesh.omega_elements;
    const std::size_t ne = omega.size();
    if (ne * (ne + 1) / 2 > opt.pair_budget) {
        warn("stiffness assembly visits " + std::to_string(ne * (ne + 1) / 2) + " element pairs");
    }
    auto has_dof = [&](int e) {
        for (int v : mesh.elements[e]) {
            if (mesh.dof_of_node[v] >= 0) {
                return true;
            }
        }
        return false;
    };
    std::vector<char> active(ne);
    for (std::size_t k = 0; k < ne; ++k) {
        active[k] = has_dof(omega[k]) ? 1 : 0;
    }

    for (std::size_t ka = 0; ka < ne; ++ka) {
        for (std::size_t kb = ka; kb < ne; ++kb) {
            if (!active[ka] && !active[kb]) {
                continue;
            }
            const auto pm = pair_matrix<Dim>(fo, mesh, omega[ka], omega[kb], qo);
            const double factor = ka == kb ? 0.5 * fo.c_ds : fo.c_ds;
            for (std::size_t a = 0; a < pm.nodes.size(); ++a) {
                const int ia = mesh.dof_of_node[pm.nodes[a]];
                if (ia < 0) {
                    continue;
                }
                for (std::size_t b = 0; b < pm.nodes.size(); ++b) {
                    const int ib = mesh.dof_of_node[pm.nodes[b]];
                    if (ib >= 0) {
                        parts.pairs(ia, ib) += factor * pm.value(a, b);
                    }
                }
            }
        }
    }

    const double a_half = mesh.spec.omega_half;
    const double R = mesh.spec.R;
    const int order = Dim == 1 ? qo.exterior_order_1d : qo.exterior_order_2d;
    const int depth = Dim == 1 ? qo.exterior_depth_1d : qo.exterior_depth_2d;
    for (std::size_t k = 0; k < ne; ++k) {
        if (!active[k]) {
            continue;
        }
        const int e = omega[k];
        const auto K = element_simplex(mesh, e);
        const auto ext = detail::weighted_local_matrix<Dim>(
            K, [&](const Point<Dim>& x) { return box_complement_weight<Dim>(fo.s, x, a_half); },
            [&](const Point<Dim>& x) { return detail::on_box_boundary<Dim>(x, a_half); }, order, depth);
        const auto tail = detail::weighted_local_matrix<Dim>(
            K, [&](const Point<Dim>& x) { return tail_weight<Dim>(fo, x, R); },
            [](const Point<Dim>&) { return false; }, order, 0);
        for (int a = 0; a <= Dim; ++a) {
            const int ia = mesh.dof_of_node[mesh.elements[e][a]];
            for (int b = 0; b <= Dim && ia >= 0; ++b) {
                const int ib = mesh.dof_of_node[mesh.elements[e][b]];
                if (ib >= 0) {
                    parts.exterior(ia, ib) += fo.c_ds * ext(a, b);
                    parts.tail(ia, ib) += fo.c_ds * tail(a, b);
                }
            }
        }
    }
    return parts;
}

/// A0_ij = a_R(phi_j, phi_i), equal to the full-space energy a(phi_j, phi_i).
template <int Dim>
Eigen::MatrixXd assemble_stiffness(const Mesh<Dim>& mesh, const FracOrder& fo, const AssemblyOptions& opt = {}) {
    return assemble_stiffness_parts<Dim>(mesh, fo, opt).full();
}

/// a_R(u, v) for P1 fields given by nodal values over all nodes: the double
/// integral over Omega_R x Omega_R plus the tail term. Cost is quadratic in
/// the number of elements; intended for validation and 1D diagnostics.
template <int Dim>
double energy_form(const Mesh<Dim>& mesh, const FracOrder& fo, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                   const QuadratureOptions& qo = {}) {
    const int ne = static_cast<int>(mesh.elements.size());
    std::vector<char> au(ne), av(ne);
    for (int e = 0; e < ne; ++e) {
        for (int node : mesh.elements[e]) {
            au[e] |= u[node] != 0.0;
            av[e] |= v[node] != 0.0;
        }
    }
    double total = 0.0;
    for (int ea = 0; ea < ne; ++ea) {
        for (int eb = ea; eb < ne; ++eb) {
            if (!((au[ea] || au[eb]) && (av[ea] || av[eb]))) {
                continue;
            }
            const auto pm = pair_matrix<Dim>(fo, mesh, ea, eb, qo);
            const double factor = ea == eb ? 0.5 : 1.0;
            double acc = 0.0;
            for (std::size_t a = 0; a < pm.nodes.size(); ++a) {
                for (std::size_t b = 0; b < pm.nodes.size(); ++b) {
                    acc += u[pm.nodes[a]] * pm.value(a, b) * v[pm.nodes[b]];
                }
            }
            total += factor * acc;
        }
    }
    const double R = mesh.spec.R;
    const int order = Dim == 1 ? qo.exterior_order_1d : qo.exterior_order_2d;
    const int depth = Dim == 1 ? qo.exterior_depth_1d : qo.exterior_depth_2d;
    for (int e = 0; e < ne; ++e) {
        if (!au[e] || !av[e]) {
            continue;
        }
        const auto loc = detail::weighted_local_matrix<Dim>(
            element_simplex(mesh, e), [&](const Point<Dim>& x) { return tail_weight<Dim>(fo, x, R); },
            [&](const Point<Dim>& x) { return detail::on_box_boundary<Dim>(x, R); }, order, depth);
        for (int a = 0; a <= Dim; ++a) {
            for (int b = 0; b <= Dim; ++b) {
                total += u[mesh.elements[e][a]] * loc(a, b) * v[mesh.elements[e][b]];
            }
        }
    }
    return fo.c_ds * total;
}

// ---------------------------------------------------------------------------
// Observation operator

/// B_ki = -c int_Omega phi_i(y) |x_k - y|^{-d-2s} dy at the given points.
template <int Dim>
Eigen::MatrixXd assemble_observation(const Mesh<Dim>& mesh, const FracOrder& fo, std::span<const Point<Dim>> points,
                                     const QuadratureOptions& qo = {}) {
    const int n = mesh.num_dofs();
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), n);
    std::vector<Simplex<Dim>> simplices;
    for (int e : mesh.omega_elements) {
        simplices.push_back(element_simplex(mesh, e));
    }
    for (std::size_t k = 0; k < points.size(); ++k) {
        const auto& xk = points[k];
        for (std::size_t j = 0; j < simplices.size(); ++j) {
            const int e = mesh.omega_elements[j];
            const auto mom = detail::point_element_moments<Dim>(fo, simplices[j], xk, qo);
            for (int a = 0; a <= Dim; ++a) {
                const int ia = mesh.dof_of_node[mesh.elements[e][a]];
                if (ia >= 0) {
                    B(static_cast<Eigen::Index>(k), ia) -= fo.c_ds * mom[a];
                }
            }
        }
    }
    return B;
}

template <int Dim>
std::vector<Point<Dim>> observation_points(const Mesh<Dim>& mesh) {
    std::vector<Point<Dim>> pts;
    pts.reserve(mesh.obs_nodes.size());
    for (int node : mesh.obs_nodes) {
        pts.push_back(mesh.nodes[node]);
    }
    return pts;
}

template <int Dim>
Eigen::MatrixXd assemble_observation(const Mesh<Dim>& mesh, const FracOrder& fo, const QuadratureOptions& qo = {}) {
    const auto pts = observation_points(mesh);
    return assemble_observation<Dim>(mesh, fo, std::span<const Point<Dim>>(pts), qo);
}

// ---------------------------------------------------------------------------
// Exterior coupling

namespace detail {

// Largest grid offset (in units of h) of a node.
template <int Dim>
int max_offset(const Mesh<Dim>& mesh, int node) {
    int mx = 0;
    for (int o : mesh.offsets(node)) {
        mx = std::max(mx, std::abs(o));
    }
    return mx;
}

}  // namespace detail

/// b_i = a_R(u_hf, phi_i) = -c int_Omega phi_i(y) int u_hf(x) |x-y|^{-d-2s} dx dy.
///
/// The identity uses u_hf phi_i = 0. The inner integral is evaluated either
/// directly over the support of u_hf or, when u_hf = 1 on most of W, as the
/// exact integral of the kernel over W minus the integral of (1 - u_hf) over
/// the elements where u_hf differs from 1.
template <int Dim>
Eigen::VectorXd assemble_bext(const Mesh<Dim>& mesh, const FracOrder& fo, const Eigen::VectorXd& u_hf,
                              const QuadratureOptions& qo = {}) {
    if (u_hf.size() != static_cast<Eigen::Index>(mesh.nodes.size())) {
        throw ContractError("assemble_bext: u_hf must hold one value per mesh node");
    }
    for (std::size_t node = 0; node < mesh.nodes.size(); ++node) {
        if (u_hf[static_cast<Eigen::Index>(node)] != 0.0 && detail::max_offset(mesh, static_cast<int>(node)) <= mesh.n_w) {
            throw ContractError("assemble_bext: exterior datum must vanish on the closure of Omega and the collar");
        }
    }
    std::vector<int> direct, complement;
    for (int e = 0; e < static_cast<int>(mesh.elements.size()); ++e) {
        bool nonzero = false, not_one = false;
        for (int node : mesh.elements[e]) {
            nonzero |= u_hf[node] != 0.0;
            not_one |= u_hf[node] != 1.0;
        }
        if (nonzero) {
            direct.push_back(e);
        }
        if (not_one && mesh.element_region[e] == ElementRegion::observation) {
            complement.push_back(e);
        }
    }
    const int n = mesh.num_dofs();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    if (direct.empty()) {
        return b;
    }
    const bool use_complement = complement.size() < direct.size();
    const auto& band = use_complement ? complement : direct;
    std::vector<Simplex<Dim>> band_simplex;
    std::vector<std::array<double, Dim + 1>> band_vals;
    for (int e : band) {
        band_simplex.push_back(element_simplex(mesh, e));
        std::array<double, Dim + 1> vals{};
        for (int k = 0; k <= Dim; ++k) {
            const double uv = u_hf[mesh.elements[e][k]];
            vals[k] = use_complement ? 1.0 - uv : uv;
        }
        band_vals.push_back(vals);
    }
    const double inner = mesh.spec.w_inner();
    const double R = mesh.spec.R;

    auto potential = [&](const Point<Dim>& y) {
        double g = 0.0;
        for (std::size_t j = 0; j < band.size(); ++j) {
            g += detail::point_element_integral<Dim>(fo, band_simplex[j], band_vals[j], y, qo);
        }
        if (use_complement) {
            g = box_complement_weight<Dim>(fo.s, y, inner) - box_complement_weight<Dim>(fo.s, y, R) - g;
        }
        return g;
    };

    const int order = Dim == 1 ? qo.bext_order_1d : qo.bext_order_2d;
    for (int e : mesh.omega_elements) {
        std::array<double, Dim + 1> loc{};
        detail::for_each_point<Dim>(element_simplex(mesh, e), order, [&](const Point<Dim>& y, const auto& lam, double w) {
            const double g = potential(y) * w;
            for (int a = 0; a <= Dim; ++a) {
                loc[a] += g * lam[a];
            }
        });
        for (int a = 0; a <= Dim; ++a) {
            const int ia = mesh.dof_of_node[mesh.elements[e][a]];
            if (ia >= 0) {
                b[ia] -= fo.c_ds * loc[a];
            }
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Bundle

template <int Dim>
struct AssembledOperators {
    std::shared_ptr<const Mesh<Dim>> mesh;
    FracOrder fo;
    Cutoff cutoff;
    Eigen::MatrixXd A0;
    Eigen::SparseMatrix<double> M0;
    Eigen::MatrixXd S;
    Eigen::MatrixXd B;
    Eigen::SparseMatrix<double> W_obs;
    Eigen::VectorXd b_ext;
    Eigen::VectorXd u_hf;  ///< nodal interpolant of the cutoff over all nodes

    /// ||mu||_Y = sqrt(mu^T W_obs mu).
    double norm_Y(const Eigen::VectorXd& mu) const { return std::sqrt(mu.dot(W_obs * mu)); }
    /// ||v||_S = sqrt(v^T S v).
    double norm_S(const Eigen::VectorXd& v) const { return std::sqrt(std::max(0.0, v.dot(S * v))); }
    /// ||v||_{L^2(Omega)} for interior coefficient vectors.
    double norm_L2(const Eigen::VectorXd& v) const { return std::sqrt(std::max(0.0, v.dot(M0 * v))); }
};

template <int Dim>
AssembledOperators<Dim> assemble_operators(std::shared_ptr<const Mesh<Dim>> mesh, const FracOrder& fo,
                                           const Cutoff& cutoff, const AssemblyOptions& opt = {}) {
    AssembledOperators<Dim> ops;
    ops.mesh = mesh;
    ops.fo = fo;
    ops.cutoff = cutoff;
    ops.A0 = assemble_stiffness<Dim>(*mesh, fo, opt);
    ops.M0 = assemble_interior_mass<Dim>(*mesh);
    ops.S = ops.A0 + Eigen::MatrixXd(ops.M0);
    ops.B = assemble_observation<Dim>(*mesh, fo, opt.quad);
    ops.W_obs = assemble_observation_mass<Dim>(*mesh);
    ops.u_hf = interpolate<Dim>(*mesh, [&](const Point<Dim>& x) { return cutoff(x); });
    ops.b_ext = assemble_bext<Dim>(*mesh, fo, ops.u_hf, opt.quad);
    return ops;
}

// ---------------------------------------------------------------------------
// Binary cache: "FRACCAL1", u32 version, u64 key, u32 count, then per matrix
// u64 rows, u64 cols and row-major float64 data (little-endian host order).

inline std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

template <int Dim>
std::string operators_key(const DomainSpec<Dim>& spec, const FracOrder& fo, const Cutoff& cutoff,
                          const QuadratureOptions& qo) {
    std::ostringstream os;
    os.precision(17);
    os << "d=" << Dim << ";R=" << spec.R << ";a=" << spec.omega_half << ";eps=" << spec.eps_gap << ";h=" << spec.h
       << ";s=" << fo.s << ";cut=" << cutoff.inner << ',' << cutoff.R << ',' << cutoff.width << ";q=";
    for (double r : qo.ratio_breaks) os << r << ',';
    for (int o : qo.orders_1d) os << o << ',';
    for (int o : qo.orders_2d) os << o << ',';
    for (int o : qo.point_orders_1d) os << o << ',';
    for (int o : qo.point_orders_2d) os << o << ',';
    os << qo.singular_1d << ',' << qo.singular_2d << ',' << qo.singular_angular << ',' << qo.exterior_order_1d << ','
       << qo.exterior_order_2d << ',' << qo.exterior_depth_1d << ',' << qo.exterior_depth_2d << ',' << qo.bext_order_1d
       << ',' << qo.bext_order_2d;
    return os.str();
}

namespace detail {

inline constexpr char kCacheMagic[8] = {'F', 'R', 'A', 'C', 'C', 'A', 'L', '1'};
inline constexpr std::uint32_t kCacheVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool read_pod(std::istream& is, T& v) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

inline void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()));
}

inline std::optional<Eigen::MatrixXd> read_matrix(std::istream& is) {
    std::uint64_t rows = 0, cols = 0;
    if (!read_pod(is, rows) || !read_pod(is, cols) || rows > (1ULL << 28) || cols > (1ULL << 28)) {
        return std::nullopt;
    }
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    if (!is.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()))) {
        return std::nullopt;
    }
    return Eigen::MatrixXd(rm);
}

}  // namespace detail

template <int Dim>
void save_operators(const std::filesystem::path& path, const AssembledOperators<Dim>& ops, std::uint64_t key) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot write operator cache " + path.string());
    }
    os.write(detail::kCacheMagic, 8);
    detail::write_pod(os, detail::kCacheVersion);
    detail::write_pod(os, key);
    detail::write_pod<std::uint32_t>(os, 6);
    detail::write_matrix(os, ops.A0);
    detail::write_matrix(os, Eigen::MatrixXd(ops.M0));
    detail::write_matrix(os, ops.B);
    detail::write_matrix(os, Eigen::MatrixXd(ops.W_obs));
    detail::write_matrix(os, ops.b_ext);
    detail::write_matrix(os, ops.u_hf);
    if (!os) {
        throw std::runtime_error("failed writing operator cache " + path.string());
    }
}

/// Loads cached operators; returns nullopt when the file is missing, corrupt,
/// of another version, keyed differently or sized for another mesh.
template <int Dim>
std::optional<AssembledOperators<Dim>> load_operators(const std::filesystem::path& path,
                                                      std::shared_ptr<const Mesh<Dim>> mesh, const FracOrder& fo,
                                                      const Cutoff& cutoff, std::uint64_t key) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        return std::nullopt;
    }
    char magic[8];
    std::uint32_t version = 0, count = 0;
    std::uint64_t stored = 0;
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCacheMagic, 8) != 0 || !detail::read_pod(is, version) ||
        version != detail::kCacheVersion || !detail::read_pod(is, stored) || stored != key ||
        !detail::read_pod(is, count) || count != 6) {
        return std::nullopt;
    }
    std::array<Eigen::MatrixXd, 6> m;
    for (auto& x : m) {
        auto r = detail::read_matrix(is);
        if (!r) {
            return std::nullopt;
        }
        x = std::move(*r);
    }
    const Eigen::Index n0 = mesh->num_dofs(), nw = mesh->num_obs(), nn = static_cast<Eigen::Index>(mesh->nodes.size());
    if (m[0].rows() != n0 || m[0].cols() != n0 || m[1].rows() != n0 || m[2].rows() != nw || m[2].cols() != n0 ||
        m[3].rows() != nw || m[4].rows() != n0 || m[5].rows() != nn) {
        return std::nullopt;
    }
    AssembledOperators<Dim> ops;
    ops.mesh = std::move(mesh);
    ops.fo = fo;
    ops.cutoff = cutoff;
    ops.A0 = std::move(m[0]);
    ops.M0 = m[1].sparseView();
    ops.S = ops.A0 + m[1];
    ops.B = std::move(m[2]);
    ops.W_obs = m[3].sparseView();
    ops.b_ext = m[4].col(0);
    ops.u_hf = m[5].col(0);
    return ops;
}

}  // namespace fraccal
