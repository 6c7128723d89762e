#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "fraccal/forward.hpp"

using namespace fraccal;

namespace {

DomainSpec<1> spec1(double h) { return {3.0, 1.0, 0.1, h, Box<1>::centered(0.75)}; }

struct Problem {
    std::shared_ptr<const Mesh<1>> mesh;
    AssembledOperators<1> ops;
};

Problem make_problem(double h, double s = 0.6) {
    const auto spec = spec1(h);
    auto mesh = std::make_shared<const Mesh<1>>(build_mesh<1>(spec));
    auto ops = assemble_operators<1>(mesh, make_frac_order(s, 1), make_cutoff(spec));
    return {mesh, std::move(ops)};
}

const Problem& coarse() {
    static const Problem p = make_problem(0.1);
    return p;
}

double bump(const Point<1>& x) { return 10.0 * std::max(0.0, 0.75 - x[0] * x[0]); }

}  // namespace

TEST(SolveForward, ZeroDatumGivesZeroState) {
    const auto& p = coarse();
    const Eigen::MatrixXd Mq = assemble_weighted_mass<1>(*p.mesh, bump);
    const Eigen::VectorXd u = solve_forward(p.ops.A0, Mq, Eigen::VectorXd::Zero(p.mesh->num_dofs()));
    EXPECT_EQ(u.norm(), 0.0);
}

TEST(SolveForward, ResidualWithoutPotential) {
    const auto& p = coarse();
    const int n = p.mesh->num_dofs();
    const Eigen::VectorXd u = solve_forward<1>(p.ops, Eigen::MatrixXd::Zero(n, n));
    const double res = (p.ops.A0 * u + p.ops.b_ext).lpNorm<Eigen::Infinity>();
    EXPECT_LT(res, 1e-10 * p.ops.b_ext.lpNorm<Eigen::Infinity>());
    EXPECT_GT(u.norm(), 0.0);
}

TEST(SolveForward, LinearInTheExteriorDatum) {
    const auto& p = coarse();
    const auto& m = *p.mesh;
    const Cutoff c1 = make_cutoff(m.spec, 0.1);
    const Cutoff c2 = make_cutoff(m.spec, 0.3);
    const Eigen::VectorXd f1 = interpolate<1>(m, [&](const Point<1>& x) { return c1(x); });
    const Eigen::VectorXd f2 = interpolate<1>(m, [&](const Point<1>& x) { return -2.0 * c2(x); });
    const Eigen::VectorXd b1 = assemble_bext<1>(m, p.ops.fo, f1);
    const Eigen::VectorXd b2 = assemble_bext<1>(m, p.ops.fo, f2);
    const Eigen::VectorXd b12 = assemble_bext<1>(m, p.ops.fo, f1 + f2);
    EXPECT_LT((b12 - b1 - b2).norm(), 1e-10 * b1.norm());
    const Eigen::MatrixXd Mq = assemble_weighted_mass<1>(m, bump);
    const Eigen::VectorXd u1 = solve_forward(p.ops.A0, Mq, b1);
    const Eigen::VectorXd u2 = solve_forward(p.ops.A0, Mq, b2);
    const Eigen::VectorXd u12 = solve_forward(p.ops.A0, Mq, b12);
    EXPECT_LT((u12 - u1 - u2).norm(), 1e-10 * u1.norm());
}

TEST(SolveForward, ResonantPotentialIsRejected) {
    const auto& p = coarse();
    const Eigen::MatrixXd M0 = Eigen::MatrixXd(p.ops.M0);
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(p.ops.A0, M0);
    const double lambda = ges.eigenvalues()[0];
    // constant potential -lambda puts zero into the spectrum
    const Eigen::MatrixXd Mq = -lambda * M0;
    try {
        solve_forward(p.ops.A0, Mq, p.ops.b_ext);
        FAIL() << "expected a resonance error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("resonance"), std::string::npos);
    }
    // a slightly shifted potential is fine
    EXPECT_NO_THROW(solve_forward(p.ops.A0, Eigen::MatrixXd(-0.5 * lambda * M0), p.ops.b_ext));
}

TEST(SolveForward, SizeMismatchIsAContractError) {
    const auto& p = coarse();
    EXPECT_THROW(solve_forward(p.ops.A0, Eigen::MatrixXd::Zero(2, 2), p.ops.b_ext), ContractError);
}

TEST(Noise, ZeroNoiseLeavesDataUnchanged) {
    const auto& p = coarse();
    const Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(p.mesh->num_obs(), -1.0, 2.0);
    const auto m = make_measurement<1>(*p.mesh, p.ops.W_obs, mu, 0.0, 3);
    EXPECT_TRUE(m.mu_noisy == m.mu_clean);
    EXPECT_THROW(add_noise(mu, p.ops.W_obs, -1e-3, 3), ConfigError);
}

TEST(Noise, PerturbationHasExactRelativeNorm) {
    const auto& p = coarse();
    const Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(p.mesh->num_obs(), -1.0, 2.0);
    for (double delta : {1e-10, 1e-6, 1e-3, 0.1, 1.0}) {
        for (std::uint64_t seed : {1u, 2u, 99u}) {
            const auto m = make_measurement<1>(*p.mesh, p.ops.W_obs, mu, delta, seed);
            const double rel = p.ops.norm_Y(m.mu_noisy - m.mu_clean) / p.ops.norm_Y(m.mu_clean);
            EXPECT_NEAR(rel, delta, 1e-14);
            EXPECT_DOUBLE_EQ(m.norm_Y_mu, p.ops.norm_Y(mu));
        }
    }
}

TEST(Noise, SeedDeterminesTheDraw) {
    const auto& p = coarse();
    const Eigen::VectorXd mu = Eigen::VectorXd::Ones(p.mesh->num_obs());
    const auto a = add_noise(mu, p.ops.W_obs, 0.01, 42);
    const auto b = add_noise(mu, p.ops.W_obs, 0.01, 42);
    const auto c = add_noise(mu, p.ops.W_obs, 0.01, 43);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == c);
}

TEST(Prolongation, ExactOnCoarseFunctions) {
    const auto& c = coarse();
    const auto f = make_problem(0.05);
    const auto P = prolongation(*c.mesh, *f.mesh);
    ASSERT_EQ(P.rows(), f.mesh->num_dofs());
    ASSERT_EQ(P.cols(), c.mesh->num_dofs());
    Eigen::VectorXd uc(c.mesh->num_dofs());
    for (int i = 0; i < uc.size(); ++i) {
        const double x = c.mesh->nodes[c.mesh->interior_dofs[i]][0];
        uc[i] = std::cos(1.3 * x) * (1.0 - x * x);
    }
    const Eigen::VectorXd uf = P * uc;
    for (int i = 0; i < f.mesh->num_dofs(); ++i) {
        const auto& x = f.mesh->nodes[f.mesh->interior_dofs[i]];
        const Eigen::VectorXd nodal = dofs_to_nodal(*c.mesh, uc);
        EXPECT_NEAR(uf[i], c.mesh->evaluate(std::span<const double>(nodal.data(), nodal.size()), x), 1e-14);
    }
    // the L2 projection of a coarse function is itself
    EXPECT_LT((project_to_coarse(*c.mesh, *f.mesh, uf) - uc).norm(), 1e-12 * uc.norm());
}

TEST(Synthesis, InverseCrimeGuard) {
    const auto& p = coarse();
    EXPECT_THROW(synthesize_clean<1>(p.ops, *p.mesh, bump, SynthesisOptions{true}), ConfigError);
    std::vector<std::string> seen;
    auto saved = warning_sink();
    warning_sink() = [&](const std::string& m) { seen.push_back(m); };
    const auto data = synthesize_clean<1>(p.ops, *p.mesh, bump);
    warning_sink() = saved;
    ASSERT_EQ(seen.size(), 1u);
    EXPECT_NE(seen[0].find("inverse crime"), std::string::npos);
    // same mesh: data are exactly B u0
    EXPECT_LT((data.mu_clean - p.ops.B * data.u0_fine).norm(), 1e-12 * data.mu_clean.norm());
}

TEST(Synthesis, ExteriorDataAreNonzero) {
    const auto& c = coarse();
    const auto f = make_problem(0.05);
    const auto m = synthesize_measurement<1>(f.ops, c.ops, bump, 1e-3, 11);
    EXPECT_GT(m.norm_Y_mu, 0.0);
    EXPECT_EQ(m.points.size(), static_cast<std::size_t>(c.mesh->num_obs()));
    const auto again = synthesize_measurement<1>(f.ops, c.ops, bump, 1e-3, 11);
    EXPECT_TRUE(m.mu_noisy == again.mu_noisy);
}

TEST(Synthesis, DataConvergeUnderForwardRefinement) {
    const auto& c = coarse();
    std::vector<Eigen::VectorXd> mu;
    for (double hf : {0.05, 0.025, 0.0125}) {
        const auto f = make_problem(hf);
        mu.push_back(synthesize_clean<1>(f.ops, *c.mesh, bump).mu_clean);
    }
    const double d1 = c.ops.norm_Y(mu[0] - mu[1]);
    const double d2 = c.ops.norm_Y(mu[1] - mu[2]);
    const double rate = std::log2(d1 / d2);
    EXPECT_GE(rate, 1.0) << "d1=" << d1 << " d2=" << d2;
}
