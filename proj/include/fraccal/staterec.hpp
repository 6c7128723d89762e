#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "assembly.hpp"
#include "errors.hpp"
#include "forward.hpp"

namespace fraccal {

/// alpha = c * delta^p, bounded below by `floor`.
struct AlphaScheme {
    double p = 1.5;
    double c = 1.0;
    double floor = 1e-14;
};

inline double alpha_rule(double delta, const AlphaScheme& scheme = {}) {
    if (!(scheme.p > 0.0) || !(scheme.p < 2.0)) {
        throw ConfigError("alpha rule exponent must lie in (0, 2) so that delta^2 / alpha -> 0");
    }
    if (!(scheme.c > 0.0) || !(scheme.floor > 0.0)) {
        throw ConfigError("alpha rule constant and floor must be positive");
    }
    if (!(delta >= 0.0)) {
        throw ConfigError("noise level must be nonnegative");
    }
    return std::max(scheme.c * std::pow(delta, scheme.p), scheme.floor);
}

/// Minimizer of ||B v - mu||_Y^2 + alpha v^T S v.
struct StateReconstruction {
    Eigen::VectorXd v;      ///< interior coefficients of u_{0,h}^alpha
    double alpha = 0.0;
    double residual_Y = 0.0;  ///< ||B v - mu||_Y
    double reg_norm = 0.0;    ///< v^T S v
    Eigen::VectorXd u_hf;   ///< exterior datum on all nodes

    double objective() const { return residual_Y * residual_Y + alpha * reg_norm; }
};

enum class StateSolveMethod {
    qr,      ///< orthogonal factorization of the whitened stacked system
    normal,  ///< Cholesky factorization of B^T W B + alpha S
};

/// Tikhonov state solver bound to one set of assembled operators.
///
/// The default path factors W = L L^T and S = L_S L_S^T once, reduces L^T B by
/// a QR factorization, and for each alpha solves the small stacked problem
/// [R_B; sqrt(alpha) L_S^T] v ~ [Q^T L^T mu; 0]. This has the same minimizer as
/// the normal equations without squaring their condition number.
template <int Dim>
class StateSolver {
public:
    explicit StateSolver(const AssembledOperators<Dim>& ops) : ops_(&ops) {
        w_llt_.compute(ops.W_obs);
        if (w_llt_.info() != Eigen::Success) {
            throw NumericalError("observation mass matrix is not positive definite");
        }
        Eigen::LLT<Eigen::MatrixXd> s_llt(ops.S);
        if (s_llt.info() != Eigen::Success) {
            throw NumericalError("regularizer S = A0 + M0 is not positive definite");
        }
        ls_t_ = s_llt.matrixU();
        const Eigen::MatrixXd Bw = whiten(ops.B);
        qr_.compute(Bw);
        const Eigen::Index n = ops.B.cols();
        const Eigen::Index k = std::min(Bw.rows(), n);
        rb_ = qr_.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
    }

    const AssembledOperators<Dim>& operators() const { return *ops_; }

    StateReconstruction solve(const Eigen::VectorXd& mu, double alpha,
                              StateSolveMethod method = StateSolveMethod::qr) const {
        if (!(alpha > 0.0)) {
            throw ConfigError("Tikhonov parameter alpha must be positive");
        }
        if (mu.size() != ops_->B.rows()) {
            throw ContractError("data vector length differs from the number of observation nodes");
        }
        StateReconstruction out;
        out.alpha = alpha;
        out.u_hf = ops_->u_hf;
        if (method == StateSolveMethod::normal) {
            Eigen::LLT<Eigen::MatrixXd> llt(normal_matrix(alpha));
            if (llt.info() != Eigen::Success) {
                throw NumericalError("normal equations are not numerically positive definite");
            }
            out.v = llt.solve(normal_rhs(mu));
        } else {
            const Eigen::Index n = ops_->B.cols();
            const Eigen::Index k = rb_.rows();
            Eigen::MatrixXd M(k + n, n);
            M.topRows(k) = rb_;
            M.bottomRows(n) = std::sqrt(alpha) * ls_t_;
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k + n);
            const Eigen::VectorXd qt = qr_.householderQ().transpose() * whiten(mu);
            rhs.head(k) = qt.head(k);
            out.v = Eigen::HouseholderQR<Eigen::MatrixXd>(M).solve(rhs);
        }
        if (!out.v.allFinite()) {
            throw NumericalError("state reconstruction produced non-finite values");
        }
        out.residual_Y = ops_->norm_Y(ops_->B * out.v - mu);
        out.reg_norm = out.v.dot(ops_->S * out.v);
        return out;
    }

    /// K_alpha = B^T W B + alpha S.
    Eigen::MatrixXd normal_matrix(double alpha) const {
        const Eigen::MatrixXd WB = ops_->W_obs * ops_->B;
        return ops_->B.transpose() * WB + alpha * ops_->S;
    }

    Eigen::VectorXd normal_rhs(const Eigen::VectorXd& mu) const { return ops_->B.transpose() * (ops_->W_obs * mu); }

private:
    // L^T P x for W = P^T L L^T P.
    Eigen::MatrixXd whiten(const Eigen::MatrixXd& x) const {
        const Eigen::MatrixXd px = w_llt_.permutationP() * x;
        return w_llt_.matrixU() * px;
    }

    const AssembledOperators<Dim>* ops_;
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> w_llt_;
    Eigen::MatrixXd ls_t_;
    Eigen::HouseholderQR<Eigen::MatrixXd> qr_;
    Eigen::MatrixXd rb_;
};

template <int Dim>
StateReconstruction reconstruct_state(const StateSolver<Dim>& solver, const Measurement<Dim>& m, double alpha) {
    return solver.solve(m.mu_noisy, alpha);
}

/// State-step errors in the S-norm against a reference interior state.
struct ErrorDecomposition {
    double total = 0.0;  ///< ||v(mu^delta) - u_ref||_S
    double bias = 0.0;   ///< ||v(mu) - u_ref||_S
    double noise = 0.0;  ///< ||v(mu^delta) - v(mu)||_S
};

template <int Dim>
ErrorDecomposition error_decomposition(const StateSolver<Dim>& solver, const Measurement<Dim>& m, double alpha,
                                       const Eigen::VectorXd& u0_ref) {
    const auto& ops = solver.operators();
    const auto noisy = solver.solve(m.mu_noisy, alpha);
    const auto clean = solver.solve(m.mu_clean, alpha);
    ErrorDecomposition e;
    e.total = ops.norm_S(noisy.v - u0_ref);
    e.bias = ops.norm_S(clean.v - u0_ref);
    e.noise = ops.norm_S(noisy.v - clean.v);
    return e;
}

/// Composed state u_h^alpha = u_hf + u_0 on all mesh nodes.
template <int Dim>
Eigen::VectorXd composed_state(const Mesh<Dim>& mesh, const StateReconstruction& st) {
    return st.u_hf + dofs_to_nodal(mesh, st.v);
}

/// CSV with node coordinates and value.
template <int Dim>
void write_nodal_csv(const std::filesystem::path& path, const Mesh<Dim>& mesh, const Eigen::VectorXd& nodal) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << (Dim == 1 ? "x,value\n" : "x,y,value\n");
    char buf[64];
    for (std::size_t n = 0; n < mesh.nodes.size(); ++n) {
        for (int i = 0; i < Dim; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g,", mesh.nodes[n][i]);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g\n", nodal[static_cast<Eigen::Index>(n)]);
        os << buf;
    }
}

}  // namespace fraccal
