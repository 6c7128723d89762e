#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "assembly.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "log.hpp"

namespace fraccal {

/// Reciprocal condition estimate below which the forward system counts as resonant.
inline constexpr double kResonanceRcond = 1e-13;

/// Solves (A0 + M_q) u0 = -b for the interior correction.
///
/// Throws NumericalError when the system is numerically singular, i.e. when the
/// potential puts zero into the Dirichlet spectrum of the operator.
inline Eigen::VectorXd solve_forward(const Eigen::MatrixXd& A0, const Eigen::MatrixXd& Mq, const Eigen::VectorXd& b) {
    if (A0.rows() != Mq.rows() || A0.rows() != b.size()) {
        throw ContractError("solve_forward: operator sizes differ");
    }
    const Eigen::MatrixXd K = A0 + Mq;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(K);
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > kResonanceRcond)) {
        throw NumericalError("resonance: A0 + M_q is numerically singular (zero is a Dirichlet eigenvalue)");
    }
    Eigen::VectorXd u = ldlt.solve(-b);
    if (!u.allFinite()) {
        throw NumericalError("forward solve produced non-finite values");
    }
    return u;
}

template <int Dim>
Eigen::VectorXd solve_forward(const AssembledOperators<Dim>& ops, const Eigen::MatrixXd& Mq) {
    return solve_forward(ops.A0, Mq, ops.b_ext);
}

/// Values of the coarse interior hats at the fine interior nodes (fine dofs x coarse dofs).
/// Exact when the fine mesh refines the coarse one.
template <int Dim>
Eigen::SparseMatrix<double> prolongation(const Mesh<Dim>& coarse, const Mesh<Dim>& fine) {
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < fine.num_dofs(); ++i) {
        const auto loc = coarse.locate(fine.nodes[fine.interior_dofs[i]]);
        if (!loc) {
            continue;
        }
        for (int k = 0; k <= Dim; ++k) {
            const int j = coarse.dof_of_node[coarse.elements[loc->first][k]];
            if (j >= 0 && std::abs(loc->second[k]) > 1e-14) {
                trip.emplace_back(i, j, loc->second[k]);
            }
        }
    }
    Eigen::SparseMatrix<double> P(fine.num_dofs(), coarse.num_dofs());
    P.setFromTriplets(trip.begin(), trip.end());
    return P;
}

/// L2(Omega) projection of a fine interior field onto the coarse interior space.
template <int Dim>
Eigen::VectorXd project_to_coarse(const Mesh<Dim>& coarse, const Mesh<Dim>& fine, const Eigen::VectorXd& u_fine) {
    const Eigen::SparseMatrix<double> P = prolongation(coarse, fine);
    const Eigen::SparseMatrix<double> Mf = assemble_interior_mass(fine);
    const Eigen::SparseMatrix<double> Mc = assemble_interior_mass(coarse);
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(Mc);
    const Eigen::VectorXd rhs = P.transpose() * (Mf * u_fine);
    return llt.solve(rhs);
}

/// Sampled preprocessed data on the observation nodes of the reconstruction mesh.
template <int Dim>
struct Measurement {
    Eigen::VectorXd mu_clean;
    Eigen::VectorXd mu_noisy;
    double delta = 0.0;
    std::uint64_t seed = 0;
    double norm_Y_mu = 0.0;
    std::vector<Point<Dim>> points;  ///< observation nodes x_k
};

/// Adds scaled Gaussian noise: mu + delta ||mu||_Y xi / ||xi||_Y, so that the
/// perturbation has Y-norm exactly delta ||mu||_Y.
inline Eigen::VectorXd add_noise(const Eigen::VectorXd& mu, const Eigen::SparseMatrix<double>& W, double delta,
                                 std::uint64_t seed) {
    if (!(delta >= 0.0)) {
        throw ConfigError("noise level must be nonnegative");
    }
    if (delta == 0.0) {
        return mu;
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Eigen::VectorXd xi(mu.size());
    for (Eigen::Index k = 0; k < xi.size(); ++k) {
        xi[k] = normal(rng);
    }
    const double nxi = std::sqrt(xi.dot(W * xi));
    const double nmu = std::sqrt(mu.dot(W * mu));
    return mu + (delta * nmu / nxi) * xi;
}

struct SynthesisOptions {
    bool forbid_inverse_crime = false;  ///< throw instead of warning when h_fine >= h
};

/// Forward data generated on a fine mesh and sampled on the coarse observation nodes.
template <int Dim>
struct SyntheticData {
    Eigen::VectorXd u0_fine;    ///< interior state on the fine mesh
    Eigen::VectorXd mu_clean;   ///< (L u0_fine)(x_k) on the coarse observation nodes
    Eigen::VectorXd u0_ref;     ///< u0_fine projected onto the coarse interior space
};

/// Solves the forward problem on the fine operators and samples mu on the coarse nodes.
template <int Dim, class Q>
SyntheticData<Dim> synthesize_clean(const AssembledOperators<Dim>& fine, const Mesh<Dim>& coarse, Q&& q_true,
                                    const SynthesisOptions& opt = {}) {
    if (!(fine.mesh->spec.h < coarse.spec.h)) {
        const std::string msg = "inverse crime: forward mesh h = " + std::to_string(fine.mesh->spec.h) +
                                " is not finer than the reconstruction mesh h = " + std::to_string(coarse.spec.h);
        if (opt.forbid_inverse_crime) {
            throw ConfigError(msg);
        }
        warn(msg);
    }
    SyntheticData<Dim> out;
    const Eigen::MatrixXd Mq = assemble_weighted_mass<Dim>(*fine.mesh, q_true);
    out.u0_fine = solve_forward<Dim>(fine, Mq);
    const auto pts = observation_points(coarse);
    const Eigen::MatrixXd Bf =
        assemble_observation<Dim>(*fine.mesh, fine.fo, std::span<const Point<Dim>>(pts), QuadratureOptions{});
    out.mu_clean = Bf * out.u0_fine;
    out.u0_ref = project_to_coarse(coarse, *fine.mesh, out.u0_fine);
    return out;
}

template <int Dim>
Measurement<Dim> make_measurement(const Mesh<Dim>& coarse, const Eigen::SparseMatrix<double>& W_obs,
                                  const Eigen::VectorXd& mu_clean, double delta, std::uint64_t seed) {
    Measurement<Dim> m;
    m.mu_clean = mu_clean;
    m.mu_noisy = add_noise(mu_clean, W_obs, delta, seed);
    m.delta = delta;
    m.seed = seed;
    m.norm_Y_mu = std::sqrt(mu_clean.dot(W_obs * mu_clean));
    m.points = observation_points(coarse);
    return m;
}

/// Full synthesis: fine forward solve, sampling and noise.
template <int Dim, class Q>
Measurement<Dim> synthesize_measurement(const AssembledOperators<Dim>& fine, const AssembledOperators<Dim>& coarse,
                                        Q&& q_true, double delta, std::uint64_t seed,
                                        const SynthesisOptions& opt = {}) {
    const auto data = synthesize_clean<Dim>(fine, *coarse.mesh, q_true, opt);
    return make_measurement<Dim>(*coarse.mesh, coarse.W_obs, data.mu_clean, delta, seed);
}

/// CSV with columns k, x (and y), mu_clean, mu_noisy.
template <int Dim>
void write_measurement_csv(const std::filesystem::path& path, const Measurement<Dim>& m) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << (Dim == 1 ? "k,x,mu_clean,mu_noisy\n" : "k,x,y,mu_clean,mu_noisy\n");
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (Eigen::Index k = 0; k < m.mu_clean.size(); ++k) {
        os << k;
        for (int i = 0; i < Dim; ++i) {
            os << ',' << num(m.points[k][i]);
        }
        os << ',' << num(m.mu_clean[k]) << ',' << num(m.mu_noisy[k]) << '\n';
    }
}

}  // namespace fraccal
