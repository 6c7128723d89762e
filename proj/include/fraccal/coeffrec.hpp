#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "assembly.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "staterec.hpp"

namespace fraccal {

/// Solves M0 w = A0 v + b_ext: the interior fractional Laplacian of the state.
template <int Dim>
Eigen::VectorXd recover_wh(const AssembledOperators<Dim>& ops, const Eigen::VectorXd& v) {
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(ops.M0);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("interior mass matrix is not positive definite");
    }
    return llt.solve(ops.A0 * v + ops.b_ext);
}

enum class CoeffMethod { quadratic, tv };

inline std::string to_string(CoeffMethod m) { return m == CoeffMethod::quadratic ? "quadratic" : "tv"; }

inline CoeffMethod parse_coeff_method(const std::string& s) {
    if (s == "quadratic") {
        return CoeffMethod::quadratic;
    }
    if (s == "tv") {
        return CoeffMethod::tv;
    }
    throw ConfigError("unknown coefficient method '" + s + "' (expected quadratic or tv)");
}

/// Elementwise-constant potential on the coefficient elements.
struct CoefficientField {
    std::vector<int> elements;
    std::vector<double> values;
    double alpha_q = 0.0;
    CoeffMethod method = CoeffMethod::quadratic;
    double alpha_tv = 0.0;
    bool converged = true;     ///< ADMM reached its tolerance
    bool empty_support = false;  ///< debiasing found no element above threshold
    int iterations = 0;
    std::string provenance;
};

/// Per-element integrals of the P1 fields u and w over the coefficient elements.
struct ElementMoments {
    std::vector<double> uu;    ///< int_K u^2
    std::vector<double> wu;    ///< int_K w u
    std::vector<double> ww;    ///< int_K w^2
    std::vector<double> size;  ///< |K|
};

/// Exact P1 x P1 integrals; u and w hold interior coefficients.
template <int Dim>
ElementMoments element_moments(const Mesh<Dim>& mesh, std::span<const int> elements, const Eigen::VectorXd& u,
                               const Eigen::VectorXd& w) {
    ElementMoments m;
    const Eigen::VectorXd un = dofs_to_nodal(mesh, u);
    const Eigen::VectorXd wn = dofs_to_nodal(mesh, w);
    for (int e : elements) {
        const double meas = mesh.measure(e);
        const double diag = Dim == 1 ? meas / 3.0 : meas / 6.0;
        const double off = Dim == 1 ? meas / 6.0 : meas / 12.0;
        double uu = 0.0, wu = 0.0, ww = 0.0;
        for (int a = 0; a <= Dim; ++a) {
            for (int b = 0; b <= Dim; ++b) {
                const double mab = a == b ? diag : off;
                const int na = mesh.elements[e][a], nb = mesh.elements[e][b];
                uu += mab * un[na] * un[nb];
                wu += mab * wn[na] * un[nb];
                ww += mab * wn[na] * wn[nb];
            }
        }
        m.uu.push_back(uu);
        m.wu.push_back(wu);
        m.ww.push_back(ww);
        m.size.push_back(meas);
    }
    return m;
}

/// P0 solution of the stabilized least-squares problem
/// min ||w + q u||^2 + alpha_q ||q||^2: q_K = -int_K w u / int_K (u^2 + alpha_q).
inline CoefficientField reconstruct_q_quadratic(std::vector<int> elements, const ElementMoments& mom,
                                                double alpha_q) {
    if (!(alpha_q > 0.0)) {
        throw ConfigError("coefficient stabilization alpha_q must be positive");
    }
    CoefficientField q;
    q.elements = std::move(elements);
    q.alpha_q = alpha_q;
    q.method = CoeffMethod::quadratic;
    q.values.resize(mom.uu.size());
    for (std::size_t k = 0; k < mom.uu.size(); ++k) {
        q.values[k] = -mom.wu[k] / (mom.uu[k] + alpha_q * mom.size[k]);
    }
    q.provenance = "quadratic alpha_q=" + std::to_string(alpha_q);
    return q;
}

template <int Dim>
CoefficientField reconstruct_q_quadratic(const Mesh<Dim>& mesh, std::span<const int> elements,
                                         const StateReconstruction& state, const Eigen::VectorXd& w, double alpha_q) {
    const auto mom = element_moments(mesh, elements, state.v, w);
    return reconstruct_q_quadratic(std::vector<int>(elements.begin(), elements.end()), mom, alpha_q);
}

/// Shrinkage sign(x) max(|x| - kappa, 0).
inline double soft_threshold(double x, double kappa) {
    const double a = std::abs(x) - kappa;
    return a > 0.0 ? std::copysign(a, x) : 0.0;
}

struct AdmmOptions {
    double tol = 1e-6;
    int max_iter = 3000;
    double rho = 0.0;        ///< penalty; 0 selects alpha_tv (or the mean curvature if alpha_tv = 0)
    int balance_every = 50;  ///< residual balancing period
    double balance_ratio = 10.0;
};

struct AdmmTrace {
    std::vector<double> primal;
    std::vector<double> dual;
    std::vector<double> objective;
};

namespace detail {

// Sum of (uu + aq |K|) q^2 + 2 wu q + alpha_tv |D q|_1 (the constant int w^2 omitted).
inline double tv_objective(const ElementMoments& mom, double alpha_q, double alpha_tv, const Eigen::VectorXd& q) {
    double f = 0.0;
    for (Eigen::Index k = 0; k < q.size(); ++k) {
        f += (mom.uu[k] + alpha_q * mom.size[k]) * q[k] * q[k] + 2.0 * mom.wu[k] * q[k];
    }
    for (Eigen::Index k = 0; k + 1 < q.size(); ++k) {
        f += alpha_tv * std::abs(q[k + 1] - q[k]);
    }
    return f;
}

}  // namespace detail

/// TV-regularized P0 reconstruction on an ordered 1D element chain by scaled ADMM
/// on the splitting z = D q with (D q)_i = q_{i+1} - q_i.
inline CoefficientField reconstruct_q_tv(std::vector<int> elements, const ElementMoments& mom, double alpha_q,
                                         double alpha_tv, const AdmmOptions& opt = {}, AdmmTrace* trace = nullptr) {
    if (!(alpha_q > 0.0)) {
        throw ConfigError("coefficient stabilization alpha_q must be positive");
    }
    if (!(alpha_tv >= 0.0)) {
        throw ConfigError("TV weight must be nonnegative");
    }
    const Eigen::Index n = static_cast<Eigen::Index>(mom.uu.size());
    Eigen::VectorXd hdiag(n), g(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        hdiag[k] = 2.0 * (mom.uu[k] + alpha_q * mom.size[k]);
        g[k] = 2.0 * mom.wu[k];
    }
    Eigen::SparseMatrix<double> D(std::max<Eigen::Index>(n - 1, 0), n);
    {
        std::vector<Eigen::Triplet<double>> t;
        for (Eigen::Index k = 0; k + 1 < n; ++k) {
            t.emplace_back(k, k, -1.0);
            t.emplace_back(k, k + 1, 1.0);
        }
        D.setFromTriplets(t.begin(), t.end());
    }
    const Eigen::SparseMatrix<double> DtD = D.transpose() * D;
    double rho = opt.rho > 0.0 ? opt.rho : (alpha_tv > 0.0 ? alpha_tv : hdiag.mean());

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
    auto factor = [&] {
        Eigen::SparseMatrix<double> H = rho * DtD;
        for (Eigen::Index k = 0; k < n; ++k) {
            H.coeffRef(k, k) += hdiag[k];
        }
        solver.compute(H);
        if (solver.info() != Eigen::Success) {
            throw NumericalError("ADMM q-update system is not positive definite");
        }
    };
    factor();

    Eigen::VectorXd q = -g.cwiseQuotient(hdiag);
    Eigen::VectorXd z = D * q;
    Eigen::VectorXd y = Eigen::VectorXd::Zero(z.size());
    Eigen::VectorXd best = q;
    double best_obj = detail::tv_objective(mom, alpha_q, alpha_tv, q);

    CoefficientField out;
    out.converged = false;
    int it = 0;
    for (; it < opt.max_iter; ++it) {
        q = solver.solve(-g + rho * (D.transpose() * (z - y)));
        const Eigen::VectorXd Dq = D * q;
        const Eigen::VectorXd z_old = z;
        for (Eigen::Index k = 0; k < z.size(); ++k) {
            z[k] = soft_threshold(Dq[k] + y[k], alpha_tv / rho);
        }
        y += Dq - z;
        const double r = (Dq - z).norm();
        const double s = rho * (D.transpose() * (z - z_old)).norm();
        const double obj = detail::tv_objective(mom, alpha_q, alpha_tv, q);
        if (trace) {
            trace->primal.push_back(r);
            trace->dual.push_back(s);
            trace->objective.push_back(obj);
        }
        if (obj < best_obj) {
            best_obj = obj;
            best = q;
        }
        if (r < opt.tol && s < opt.tol) {
            out.converged = true;
            best = q;
            ++it;
            break;
        }
        if (opt.balance_every > 0 && (it + 1) % opt.balance_every == 0) {
            if (r > opt.balance_ratio * s) {
                rho *= 2.0;
                y /= 2.0;
                factor();
            } else if (s > opt.balance_ratio * r) {
                rho /= 2.0;
                y *= 2.0;
                factor();
            }
        }
    }
    out.elements = std::move(elements);
    out.values.assign(best.data(), best.data() + best.size());
    out.alpha_q = alpha_q;
    out.alpha_tv = alpha_tv;
    out.method = CoeffMethod::tv;
    out.iterations = it;
    out.provenance = "tv alpha_q=" + std::to_string(alpha_q) + " alpha_tv=" + std::to_string(alpha_tv) +
                     (out.converged ? "" : " (iteration cap reached)");
    return out;
}

/// Number of jumps |q_{i+1} - q_i| above `fraction` of the largest jump.
inline int count_jumps(std::span<const double> q, double fraction = 0.25) {
    double mx = 0.0;
    for (std::size_t k = 0; k + 1 < q.size(); ++k) {
        mx = std::max(mx, std::abs(q[k + 1] - q[k]));
    }
    if (mx == 0.0) {
        return 0;
    }
    int count = 0;
    for (std::size_t k = 0; k + 1 < q.size(); ++k) {
        count += std::abs(q[k + 1] - q[k]) > fraction * mx ? 1 : 0;
    }
    return count;
}

/// sigma_q = median |D q| + 1e-14.
inline double jump_scale(std::span<const double> q) {
    std::vector<double> d;
    for (std::size_t k = 0; k + 1 < q.size(); ++k) {
        d.push_back(std::abs(q[k + 1] - q[k]));
    }
    if (d.empty()) {
        return 1e-14;
    }
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size();
    const double med = m % 2 == 1 ? d[m / 2] : 0.5 * (d[m / 2 - 1] + d[m / 2]);
    return med + 1e-14;
}

/// Ten candidates sigma_q 10^tau, tau equispaced in [-2, 1].
inline std::vector<double> alpha_tv_candidates(std::span<const double> baseline) {
    const double sigma = jump_scale(baseline);
    std::vector<double> c;
    for (int j = 0; j < 10; ++j) {
        c.push_back(sigma * std::pow(10.0, -2.0 + j / 3.0));
    }
    return c;
}

struct AlphaTvSelection {
    std::vector<double> candidates;
    std::vector<int> jump_counts;
    std::size_t selected = 0;
    CoefficientField field;  ///< TV reconstruction at the selected weight
};

/// Runs TV for each candidate and keeps the one whose jump count is nearest
/// `target_jumps`; ties go to the larger weight.
inline AlphaTvSelection adaptive_alpha_tv(const CoefficientField& baseline, const ElementMoments& mom,
                                          const AdmmOptions& opt = {}, int target_jumps = 2) {
    AlphaTvSelection sel;
    sel.candidates = alpha_tv_candidates(baseline.values);
    int best_gap = std::numeric_limits<int>::max();
    for (std::size_t j = 0; j < sel.candidates.size(); ++j) {
        auto f = reconstruct_q_tv(baseline.elements, mom, baseline.alpha_q, sel.candidates[j], opt);
        const int jumps = count_jumps(f.values);
        sel.jump_counts.push_back(jumps);
        const int gap = std::abs(jumps - target_jumps);
        if (gap <= best_gap) {  // later candidates are larger
            best_gap = gap;
            sel.selected = j;
            sel.field = std::move(f);
        }
    }
    return sel;
}

/// Thresholds at `threshold`, refits one level on the support by least squares
/// and clamps it to [lo, hi].
inline CoefficientField debias(const CoefficientField& q_tv, const ElementMoments& mom, double threshold = 0.5,
                               double lo = 0.0, double hi = 1.0) {
    CoefficientField out = q_tv;
    double num = 0.0, den = 0.0;
    std::vector<char> support(q_tv.values.size());
    for (std::size_t k = 0; k < q_tv.values.size(); ++k) {
        support[k] = q_tv.values[k] > threshold ? 1 : 0;
        if (support[k]) {
            num += mom.wu[k];
            den += mom.uu[k];
        }
    }
    if (std::none_of(support.begin(), support.end(), [](char c) { return c != 0; })) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        out.empty_support = true;
        out.provenance += "; debias: empty support";
        return out;
    }
    const double level = den > 0.0 ? std::clamp(-num / den, lo, hi) : hi;
    for (std::size_t k = 0; k < out.values.size(); ++k) {
        out.values[k] = support[k] ? level : 0.0;
    }
    out.provenance += "; debiased level=" + std::to_string(level);
    return out;
}

/// Zero extension of the field to all interior-domain elements (indexed by element id).
template <int Dim>
std::vector<double> extend_by_zero(const Mesh<Dim>& mesh, const CoefficientField& q) {
    std::vector<double> full(mesh.elements.size(), 0.0);
    for (std::size_t k = 0; k < q.elements.size(); ++k) {
        full[q.elements[k]] = q.values[k];
    }
    return full;
}

/// CSV with element centroid and value.
template <int Dim>
void write_coefficient_csv(const std::filesystem::path& path, const Mesh<Dim>& mesh, const CoefficientField& q) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << (Dim == 1 ? "x,q\n" : "x,y,q\n");
    char buf[64];
    for (std::size_t k = 0; k < q.elements.size(); ++k) {
        const auto c = mesh.centroid(q.elements[k]);
        for (int i = 0; i < Dim; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g,", c[i]);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g\n", q.values[k]);
        os << buf;
    }
}

/// Per-iteration ADMM residual log.
inline void write_admm_trace_csv(const std::filesystem::path& path, const AdmmTrace& t) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << "iteration,primal,dual,objective\n";
    char buf[96];
    for (std::size_t k = 0; k < t.primal.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", k + 1, t.primal[k], t.dual[k], t.objective[k]);
        os << buf;
    }
}

}  // namespace fraccal
