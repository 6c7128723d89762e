#pragma once

// Fitted uniform meshes of the truncation box (-R,R)^d.
//
// The interior domain is the box (-a,a)^d with a = omega_half. The
// observation set is W = (-R,R)^d \ [-(a+eps), a+eps]^d, separated from the
// interior by eps. Everything between is the exterior collar. All region
// boundaries are required to fall on grid lines, so region membership of
// nodes and cells is decided with integer arithmetic on grid offsets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace fraccal {

template <int Dim>
using Point = std::array<double, Dim>;

template <int Dim>
inline double distance(const Point<Dim>& x, const Point<Dim>& y) {
    double r2 = 0.0;
    for (int i = 0; i < Dim; ++i) {
        const double d = x[i] - y[i];
        r2 += d * d;
    }
    return std::sqrt(r2);
}

template <int Dim>
inline double sup_norm(const Point<Dim>& x) {
    double m = 0.0;
    for (int i = 0; i < Dim; ++i) {
        m = std::max(m, std::abs(x[i]));
    }
    return m;
}

/// Closed axis-aligned box.
template <int Dim>
struct Box {
    Point<Dim> lo{};
    Point<Dim> hi{};

    bool contains(const Point<Dim>& p, double tol = 0.0) const {
        for (int i = 0; i < Dim; ++i) {
            if (p[i] < lo[i] - tol || p[i] > hi[i] + tol) {
                return false;
            }
        }
        return true;
    }

    double measure() const {
        double m = 1.0;
        for (int i = 0; i < Dim; ++i) {
            m *= hi[i] - lo[i];
        }
        return m;
    }

    static Box centered(double half) {
        Box b;
        b.lo.fill(-half);
        b.hi.fill(half);
        return b;
    }
};

template <int Dim>
struct DomainSpec {
    double R = 3.0;           ///< half-width of the truncation box
    double omega_half = 1.0;  ///< interior domain is (-omega_half, omega_half)^d
    double eps_gap = 0.05;    ///< separation between the interior domain and W
    double h = 0.05;          ///< uniform mesh spacing
    Box<Dim> omega_prime = Box<Dim>::centered(0.75);  ///< coefficient subdomain

    double w_inner() const { return omega_half + eps_gap; }
};

enum class NodeRegion : std::uint8_t { interior, boundary, collar, observation, outside };
enum class ElementRegion : std::uint8_t { omega, collar, observation };

namespace detail {

// Returns round(length / h), throwing when the ratio is not an integer.
inline int fitted_ratio(double length, double h, const char* name) {
    const double r = length / h;
    const double n = std::round(r);
    if (std::abs(r - n) > 1e-9 * std::max(1.0, std::abs(r)) || n < 1) {
        throw ConfigError(std::string("mesh not fitted: ") + name + "/h = " + std::to_string(r) +
                          " is not a positive integer");
    }
    return static_cast<int>(n);
}

}  // namespace detail

template <int Dim>
class Mesh {
public:
    using Simplex = std::array<int, Dim + 1>;

    DomainSpec<Dim> spec;
    int cells = 0;  ///< cells per axis, 2R/h
    int n_R = 0;    ///< R/h
    int n_omega = 0;  ///< omega_half/h
    int n_w = 0;      ///< (omega_half+eps_gap)/h

    std::vector<Point<Dim>> nodes;
    std::vector<Simplex> elements;
    std::vector<NodeRegion> node_region;
    std::vector<ElementRegion> element_region;

    std::vector<int> interior_dofs;  ///< node ids of the interior basis, in node order
    std::vector<int> obs_nodes;      ///< node ids of observation points, in node order
    std::vector<int> dof_of_node;    ///< inverse of interior_dofs, -1 elsewhere
    std::vector<int> obs_of_node;    ///< inverse of obs_nodes, -1 elsewhere

    std::vector<int> omega_elements;        ///< elements inside the closed interior domain
    std::vector<int> observation_elements;  ///< elements inside the closed observation set

    double h() const { return spec.h; }
    int num_dofs() const { return static_cast<int>(interior_dofs.size()); }
    int num_obs() const { return static_cast<int>(obs_nodes.size()); }
    int nodes_per_axis() const { return cells + 1; }

    std::array<Point<Dim>, Dim + 1> vertices(int e) const {
        std::array<Point<Dim>, Dim + 1> v;
        for (int k = 0; k <= Dim; ++k) {
            v[k] = nodes[elements[e][k]];
        }
        return v;
    }

    double measure(int e) const {
        if constexpr (Dim == 1) {
            return spec.h;
        } else {
            return 0.5 * spec.h * spec.h;
        }
    }

    Point<Dim> centroid(int e) const {
        Point<Dim> c{};
        for (int k = 0; k <= Dim; ++k) {
            for (int i = 0; i < Dim; ++i) {
                c[i] += nodes[elements[e][k]][i];
            }
        }
        for (int i = 0; i < Dim; ++i) {
            c[i] /= Dim + 1;
        }
        return c;
    }

    /// Element containing x and the barycentric coordinates of x in it.
    std::optional<std::pair<int, std::array<double, Dim + 1>>> locate(const Point<Dim>& x) const {
        std::array<int, Dim> cell{};
        std::array<double, Dim> xi{};
        for (int i = 0; i < Dim; ++i) {
            const double t = (x[i] + spec.R) / spec.h;
            if (t < -1e-12 || t > cells + 1e-12) {
                return std::nullopt;
            }
            int c = static_cast<int>(std::floor(t));
            c = std::clamp(c, 0, cells - 1);
            cell[i] = c;
            xi[i] = t - c;
        }
        std::array<double, Dim + 1> lambda{};
        int e = 0;
        if constexpr (Dim == 1) {
            e = cell[0];
            lambda = {1.0 - xi[0], xi[0]};
        } else {
            const int q = cell[1] * cells + cell[0];
            if (xi[0] >= xi[1]) {
                e = 2 * q;
                lambda = {1.0 - xi[0], xi[0] - xi[1], xi[1]};
            } else {
                e = 2 * q + 1;
                lambda = {1.0 - xi[1], xi[0], xi[1] - xi[0]};
            }
        }
        return std::make_pair(e, lambda);
    }

    /// Evaluates the P1 field with the given nodal values at x (zero outside the box).
    double evaluate(std::span<const double> nodal, const Point<Dim>& x) const {
        auto loc = locate(x);
        if (!loc) {
            return 0.0;
        }
        double v = 0.0;
        for (int k = 0; k <= Dim; ++k) {
            v += loc->second[k] * nodal[elements[loc->first][k]];
        }
        return v;
    }

    /// Grid offsets (index - R/h) of a node along each axis.
    std::array<int, Dim> offsets(int node) const {
        std::array<int, Dim> o{};
        int rem = node;
        for (int i = 0; i < Dim; ++i) {
            o[i] = rem % (cells + 1) - n_R;
            rem /= cells + 1;
        }
        return o;
    }
};

/// Builds the fitted uniform mesh. Node ids are lexicographic in (y, x).
template <int Dim>
Mesh<Dim> build_mesh(const DomainSpec<Dim>& spec) {
    static_assert(Dim == 1 || Dim == 2, "only d = 1, 2 are supported");
    if (!(spec.h > 0.0) || !(spec.R > 0.0) || !(spec.omega_half > 0.0) || !(spec.eps_gap > 0.0)) {
        throw ConfigError("domain lengths must be positive");
    }
    if (!(spec.omega_half + spec.eps_gap < spec.R)) {
        throw ConfigError("observation set is empty: omega_half + eps_gap must be < R");
    }
    Mesh<Dim> m;
    m.spec = spec;
    m.n_R = detail::fitted_ratio(spec.R, spec.h, "R");
    m.n_omega = detail::fitted_ratio(spec.omega_half, spec.h, "omega_half");
    const int n_eps = detail::fitted_ratio(spec.eps_gap, spec.h, "eps_gap");
    m.n_w = m.n_omega + n_eps;
    m.cells = 2 * m.n_R;

    const int np = m.cells + 1;
    int total = 1;
    for (int i = 0; i < Dim; ++i) {
        total *= np;
    }
    m.nodes.resize(total);
    m.node_region.resize(total);
    m.dof_of_node.assign(total, -1);
    m.obs_of_node.assign(total, -1);
    for (int id = 0; id < total; ++id) {
        const auto off = m.offsets(id);
        int mx = 0;
        for (int i = 0; i < Dim; ++i) {
            m.nodes[id][i] = off[i] * spec.h;
            mx = std::max(mx, std::abs(off[i]));
        }
        NodeRegion r;
        if (mx < m.n_omega) {
            r = NodeRegion::interior;
        } else if (mx == m.n_omega) {
            r = NodeRegion::boundary;
        } else if (mx < m.n_w) {
            r = NodeRegion::collar;
        } else if (mx < m.n_R) {
            r = NodeRegion::observation;
        } else {
            r = NodeRegion::outside;
        }
        m.node_region[id] = r;
        if (r == NodeRegion::interior) {
            m.dof_of_node[id] = static_cast<int>(m.interior_dofs.size());
            m.interior_dofs.push_back(id);
        } else if (r == NodeRegion::observation) {
            m.obs_of_node[id] = static_cast<int>(m.obs_nodes.size());
            m.obs_nodes.push_back(id);
        }
    }

    // Cells: lower-left offset c in [-n_R, n_R). A cell is interior when every
    // axis has c in [-n_omega, n_omega), observation when some axis leaves
    // [-n_w, n_w).
    auto classify_cell = [&](const std::array<int, Dim>& c) {
        bool inside = true;
        bool outside_w = false;
        for (int i = 0; i < Dim; ++i) {
            inside = inside && c[i] >= -m.n_omega && c[i] < m.n_omega;
            outside_w = outside_w || c[i] >= m.n_w || c[i] < -m.n_w;
        }
        if (inside) {
            return ElementRegion::omega;
        }
        return outside_w ? ElementRegion::observation : ElementRegion::collar;
    };

    if constexpr (Dim == 1) {
        for (int c = 0; c < m.cells; ++c) {
            m.elements.push_back({c, c + 1});
            m.element_region.push_back(classify_cell({c - m.n_R}));
        }
    } else {
        for (int cy = 0; cy < m.cells; ++cy) {
            for (int cx = 0; cx < m.cells; ++cx) {
                const int n00 = cy * np + cx;
                const int n10 = n00 + 1;
                const int n01 = n00 + np;
                const int n11 = n01 + 1;
                const auto region = classify_cell({cx - m.n_R, cy - m.n_R});
                m.elements.push_back({n00, n10, n11});
                m.elements.push_back({n00, n11, n01});
                m.element_region.push_back(region);
                m.element_region.push_back(region);
            }
        }
    }
    for (int e = 0; e < static_cast<int>(m.elements.size()); ++e) {
        if (m.element_region[e] == ElementRegion::omega) {
            m.omega_elements.push_back(e);
        } else if (m.element_region[e] == ElementRegion::observation) {
            m.observation_elements.push_back(e);
        }
    }
    return m;
}

/// Elements contained in the box omega_prime; these carry the P0 coefficient space.
template <int Dim>
std::vector<int> coefficient_elements(const Mesh<Dim>& mesh, const Box<Dim>& omega_prime) {
    const double a = mesh.spec.omega_half;
    for (int i = 0; i < Dim; ++i) {
        if (!(omega_prime.lo[i] > -a && omega_prime.hi[i] < a && omega_prime.lo[i] < omega_prime.hi[i])) {
            throw ConfigError("coefficient subdomain must lie strictly inside the interior domain");
        }
    }
    const double tol = 1e-12 * std::max(1.0, mesh.spec.R);
    std::vector<int> out;
    for (int e : mesh.omega_elements) {
        bool inside = true;
        for (int k = 0; k <= Dim && inside; ++k) {
            inside = omega_prime.contains(mesh.nodes[mesh.elements[e][k]], tol);
        }
        if (inside) {
            out.push_back(e);
        }
    }
    if (out.empty()) {
        throw ConfigError("coefficient subdomain contains no mesh element");
    }
    return out;
}

}  // namespace fraccal
