#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>

#include <Eigen/Cholesky>
#include <gtest/gtest.h>

#include "fraccal/assembly.hpp"
#include "oracles.hpp"

using namespace fraccal;

namespace {

Mesh<1> mesh_1d(double h, double R = 3.0, double eps = 0.05) {
    return build_mesh<1>(DomainSpec<1>{R, 1.0, eps, h, Box<1>::centered(0.75)});
}

Mesh<2> mesh_2d(double h = 0.25, double R = 1.0) {
    return build_mesh<2>(DomainSpec<2>{R, 0.5, 0.25, h, Box<2>::centered(0.25)});
}

int node_at(const Mesh<1>& m, double x) {
    for (int n = 0; n < static_cast<int>(m.nodes.size()); ++n) {
        if (std::abs(m.nodes[n][0] - x) < 1e-9) {
            return n;
        }
    }
    return -1;
}

// Permutation of dofs under x -> -x.
template <int Dim>
std::vector<int> reflected_dofs(const Mesh<Dim>& m) {
    std::vector<int> perm(m.num_dofs());
    for (int i = 0; i < m.num_dofs(); ++i) {
        auto p = m.nodes[m.interior_dofs[i]];
        for (auto& c : p) {
            c = -c;
        }
        for (int j = 0; j < m.num_dofs(); ++j) {
            if (distance<Dim>(p, m.nodes[m.interior_dofs[j]]) < 1e-9) {
                perm[i] = j;
            }
        }
    }
    return perm;
}

}  // namespace

TEST(Mass, OneDimensionalInteriorValues) {
    const double h = 0.1;
    const auto m = mesh_1d(h, 3.0, 0.1);
    const Eigen::MatrixXd M0 = assemble_interior_mass(m);
    for (int i = 0; i < m.num_dofs(); ++i) {
        EXPECT_NEAR(M0(i, i), 2.0 * h / 3.0, 1e-15);
        if (i + 1 < m.num_dofs()) {
            EXPECT_NEAR(M0(i, i + 1), h / 6.0, 1e-15);
        }
    }
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(M0).info(), Eigen::Success);
}

TEST(Mass, ObservationRowSumsCoverW) {
    const double h = 0.05;
    const auto m = mesh_1d(h);
    const Eigen::MatrixXd W = assemble_observation_mass(m);
    // sum of entries is int (sum theta)^2; the hats of the two outer boundary
    // nodes are excluded, so each outermost element contributes h/3 instead of h
    const double measure_w = 2.0 * (3.0 - 1.05);
    EXPECT_NEAR(W.sum(), measure_w - 2.0 * (2.0 * h / 3.0), 1e-12);
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(W).info(), Eigen::Success);

    const auto m2 = mesh_2d();
    const Eigen::MatrixXd W2 = assemble_observation_mass(m2);
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(W2).info(), Eigen::Success);
    EXPECT_GT(W2.sum(), 0.0);
    EXPECT_LT(W2.sum(), 4.0 - 1.5 * 1.5);
}

TEST(WeightedMass, ZeroOneAndBump) {
    const double h = 0.05;
    const auto m = mesh_1d(h);
    const Eigen::MatrixXd M0 = assemble_interior_mass(m);
    EXPECT_EQ(assemble_weighted_mass<1>(m, [](const Point<1>&) { return 0.0; }).norm(), 0.0);
    EXPECT_LT((assemble_weighted_mass<1>(m, [](const Point<1>&) { return 1.0; }) - M0).norm(), 1e-14);
    auto q = [](const Point<1>& x) { return 10.0 * std::max(0.0, 0.75 - x[0] * x[0]); };
    const Eigen::MatrixXd Mq = assemble_weighted_mass<1>(m, q);
    const int i0 = m.dof_of_node[node_at(m, 0.0)];
    EXPECT_NEAR(Mq(i0, i0), 7.5 * 2.0 * h / 3.0, 10.0 * h * h * h);
    // exact: int (7.5 - 10 x^2) hat^2 = 7.5 * 2h/3 - 10 * h^3/15
    EXPECT_NEAR(Mq(i0, i0), 7.5 * 2.0 * h / 3.0 - 10.0 * h * h * h / 15.0, 1e-14);

    std::vector<int> all(m.omega_elements.begin(), m.omega_elements.end());
    std::vector<double> ones(all.size(), 1.0);
    EXPECT_LT((assemble_weighted_mass_p0<1>(m, all, ones) - M0).norm(), 1e-14);
}

TEST(Stiffness, OneDimensionalMatchesClosedFormToeplitz) {
    for (double s : {0.3, 0.5, 0.6, 0.9}) {
        const double h = 0.1;
        const auto m = mesh_1d(h, 3.0, 0.1);
        const auto fo = make_frac_order(s, 1);
        const Eigen::MatrixXd A0 = assemble_stiffness(m, fo);
        for (int i = 0; i < m.num_dofs(); ++i) {
            for (int j = 0; j < m.num_dofs(); ++j) {
                const double ref = oracle::a0_entry_1d_closed(s, i - j, h);
                EXPECT_NEAR(A0(i, j), ref, 1e-7 * std::abs(ref)) << s << ' ' << i << ' ' << j;
            }
        }
    }
}

TEST(Stiffness, OneDimensionalMatchesNestedQuadrature) {
    const double h = 0.1;
    const double s = 0.6;
    const auto m = mesh_1d(h, 3.0, 0.1);
    const auto fo = make_frac_order(s, 1);
    const Eigen::MatrixXd A0 = assemble_stiffness(m, fo);
    for (auto [xi, xj] : {std::pair{0.0, 0.0}, std::pair{0.0, 0.1}, std::pair{-0.9, -0.9}, std::pair{-0.9, -0.7},
                          std::pair{0.3, 0.8}}) {
        const int i = m.dof_of_node[node_at(m, xi)];
        const int j = m.dof_of_node[node_at(m, xj)];
        const double ref = oracle::a0_entry_1d(s, xi, xj, h);
        EXPECT_NEAR(A0(i, j) / ref, 1.0, 1e-7) << xi << ' ' << xj;
    }
}

TEST(Stiffness, SymmetricPositiveAndReflectionInvariant) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    const auto m = mesh_1d(0.05);
    const auto fo = make_frac_order(0.6, 1);
    const Eigen::MatrixXd A0 = assemble_stiffness(m, fo);
    EXPECT_LT((A0 - A0.transpose()).norm(), 1e-14 * A0.norm());
    for (int k = 0; k < 50; ++k) {
        const Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(m.num_dofs(), [&] { return nd(rng); });
        EXPECT_GT(v.dot(A0 * v), 0.0);
    }
    const auto perm = reflected_dofs(m);
    for (int i = 0; i < m.num_dofs(); ++i) {
        for (int j = 0; j < m.num_dofs(); ++j) {
            EXPECT_NEAR(A0(perm[i], perm[j]), A0(i, j), 1e-13 * A0.norm());
        }
    }
}

TEST(Stiffness, FullOperatorToeplitzButTruncatedDoublePartIsNot) {
    const double h = 0.05;
    const auto m = mesh_1d(h);
    const auto fo = make_frac_order(0.6, 1);
    const auto parts = assemble_stiffness_parts(m, fo);
    const Eigen::MatrixXd A0 = parts.full();
    const Eigen::MatrixXd T = parts.truncated_double();
    const int n = m.num_dofs();
    double full_dev = 0.0, trunc_dev = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        for (int j = 0; j + 1 < n; ++j) {
            full_dev = std::max(full_dev, std::abs(A0(i + 1, j + 1) - A0(i, j)));
            trunc_dev = std::max(trunc_dev, std::abs(T(i + 1, j + 1) - T(i, j)));
        }
    }
    EXPECT_LT(full_dev, 1e-9 * A0(0, 0));
    std::cout << "toeplitz deviation: full " << full_dev << ", truncated double part " << trunc_dev << '\n';
    EXPECT_GT(trunc_dev, 100.0 * full_dev);
    // the tail part is the difference and is a positive weighted mass
    EXPECT_LT((A0 - T - parts.tail).norm(), 1e-13 * A0.norm());
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(parts.tail).info(), Eigen::Success);
}

TEST(Stiffness, DecayRatioForSeparatedDofs) {
    const double s = 0.6;
    const double h = 0.025;
    const auto m = mesh_1d(h);
    const auto fo = make_frac_order(s, 1);
    const Eigen::MatrixXd A0 = assemble_stiffness(m, fo);
    const int m0 = 15;
    const double ratio = A0(0, 2 * m0) / A0(0, 4 * m0);
    EXPECT_NEAR(ratio, std::pow(2.0, 1.0 + 2.0 * s), 2e-3 * std::pow(2.0, 1.0 + 2.0 * s));
    EXPECT_LT(A0(0, 2 * m0), 0.0);
}

TEST(Stiffness, TruncatedFormWithTailEqualsFullSpaceEnergy) {
    const double h = 0.1;
    const auto m = mesh_1d(h, 2.0, 0.1);
    const auto fo = make_frac_order(0.6, 1);
    const Eigen::MatrixXd A0 = assemble_stiffness(m, fo);
    for (auto [xi, xj] : {std::pair{0.0, 0.0}, std::pair{-0.9, -0.8}, std::pair{-0.9, 0.9}}) {
        const int ni = node_at(m, xi), nj = node_at(m, xj);
        Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.nodes.size()));
        Eigen::VectorXd v = u;
        u[ni] = 1.0;
        v[nj] = 1.0;
        const double aR = energy_form(m, fo, u, v);
        EXPECT_NEAR(aR, A0(m.dof_of_node[ni], m.dof_of_node[nj]), 1e-6 * std::abs(A0(0, 0)));
        EXPECT_NEAR(aR / oracle::a0_entry_1d(0.6, xi, xj, h), 1.0, 1e-6);
    }
}

TEST(Stiffness, TwoDimensionalSanity) {
    const auto m = mesh_2d(0.125);
    const auto fo = make_frac_order(0.5, 2);
    const Eigen::MatrixXd A0 = assemble_stiffness(m, fo);
    EXPECT_LT((A0 - A0.transpose()).norm(), 1e-13 * A0.norm());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A0);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
    // point reflection maps the triangulation to itself
    const auto perm = reflected_dofs(m);
    for (int i = 0; i < m.num_dofs(); ++i) {
        for (int j = 0; j < m.num_dofs(); ++j) {
            EXPECT_NEAR(A0(perm[i], perm[j]), A0(i, j), 1e-9 * A0.norm());
        }
    }
    // translation invariance of the full-space energy
    const int np = m.nodes_per_axis();
    double dev = 0.0;
    for (int i = 0; i < m.num_dofs(); ++i) {
        for (int j = 0; j < m.num_dofs(); ++j) {
            const int ni = m.interior_dofs[i] + 1, nj = m.interior_dofs[j] + 1;
            if (ni < static_cast<int>(m.nodes.size()) && nj < static_cast<int>(m.nodes.size()) &&
                m.dof_of_node[ni] >= 0 && m.dof_of_node[nj] >= 0 && ni % np != 0 && nj % np != 0) {
                dev = std::max(dev, std::abs(A0(m.dof_of_node[ni], m.dof_of_node[nj]) - A0(i, j)));
            }
        }
    }
    EXPECT_LT(dev, 1e-7 * A0(0, 0));
}

TEST(Observation, MatchesOracleAndIsNegative) {
    const double h = 0.1;
    const auto m = mesh_1d(h, 3.0, 0.1);
    const double s = 0.6;
    const auto fo = make_frac_order(s, 1);
    const Eigen::MatrixXd B = assemble_observation(m, fo);
    EXPECT_LT(B.maxCoeff(), 0.0);
    for (int k = 0; k < m.num_obs(); ++k) {
        const double xk = m.nodes[m.obs_nodes[k]][0];
        for (int i = 0; i < m.num_dofs(); ++i) {
            const double ref = oracle::b_entry_1d(s, xk, m.nodes[m.interior_dofs[i]][0], h);
            EXPECT_NEAR(B(k, i) / ref, 1.0, 1e-10) << xk << ' ' << i;
        }
    }
}

TEST(Observation, RowSumsMatchClosedFormWithBoundaryDeficit) {
    const double h = 0.05;
    const double s = 0.6;
    const auto m = mesh_1d(h);
    const auto fo = make_frac_order(s, 1);
    const Eigen::MatrixXd B = assemble_observation(m, fo);
    const double c = oracle::normalization(s, 1);
    for (int k = 0; k < m.num_obs(); ++k) {
        const double x = std::abs(m.nodes[m.obs_nodes[k]][0]);
        // -c int_{-1}^{1} |x-y|^{-1-2s} for x > 1
        const double full = -c * (std::pow(x - 1.0, -2.0 * s) - std::pow(x + 1.0, -2.0 * s)) / (2.0 * s);
        // the interior hats miss 1 - hat on the two boundary elements
        auto deficit = [&](double y) { return std::abs(y) > 1.0 - h ? (std::abs(y) - (1.0 - h)) / h : 0.0; };
        auto f = [&](double y) { return deficit(y) * std::pow(std::abs(x - y), -1.0 - 2.0 * s); };
        const double miss = -c * (oracle::integrate_split(f, -1.0, -1.0 + h, {}, 1e-14) +
                                  oracle::integrate_split(f, 1.0 - h, 1.0, {}, 1e-14));
        EXPECT_NEAR(B.row(k).sum() / (full - miss), 1.0, 1e-10);
    }
}

TEST(Observation, PointwiseBound) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    for (int d : {1, 2}) {
        const double s = 0.6;
        if (d == 1) {
            const auto m = mesh_1d(0.05);
            const auto fo = make_frac_order(s, 1);
            const Eigen::MatrixXd B = assemble_observation(m, fo);
            const Eigen::MatrixXd M0 = assemble_interior_mass(m);
            const double bound = fo.c_ds * std::pow(m.spec.eps_gap, -1.0 - 2.0 * s) * std::sqrt(2.0);
            for (int t = 0; t < 20; ++t) {
                const Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(m.num_dofs(), [&] { return nd(rng); });
                EXPECT_LE((B * v).cwiseAbs().maxCoeff(), bound * std::sqrt(v.dot(M0 * v)));
            }
        } else {
            const auto m = mesh_2d();
            const auto fo = make_frac_order(s, 2);
            const Eigen::MatrixXd B = assemble_observation(m, fo);
            const Eigen::MatrixXd M0 = assemble_interior_mass(m);
            const double bound = fo.c_ds * std::pow(m.spec.eps_gap, -2.0 - 2.0 * s) * 1.0;
            for (int t = 0; t < 20; ++t) {
                const Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(m.num_dofs(), [&] { return nd(rng); });
                EXPECT_LE((B * v).cwiseAbs().maxCoeff(), bound * std::sqrt(v.dot(M0 * v)));
            }
        }
    }
}

TEST(Observation, ReflectionCommutes) {
    const auto m = mesh_1d(0.05);
    const auto fo = make_frac_order(0.4, 1);
    const Eigen::MatrixXd B = assemble_observation(m, fo);
    const auto perm = reflected_dofs(m);
    const int nw = m.num_obs();
    for (int k = 0; k < nw; ++k) {
        for (int i = 0; i < m.num_dofs(); ++i) {
            EXPECT_NEAR(B(nw - 1 - k, perm[i]), B(k, i), 1e-13 * std::abs(B(k, i)));
        }
    }
}

namespace {

// -c int phi_i(y) int u(x) |x-y|^{-1-2s} dx dy for a P1 exterior field u.
double bext_oracle(const Mesh<1>& m, double s, const Eigen::VectorXd& u, int dof) {
    const double c = oracle::normalization(s, 1);
    const double h = m.spec.h;
    const double xi = m.nodes[m.interior_dofs[dof]][0];
    std::vector<std::pair<double, double>> pieces;
    for (int e = 0; e < static_cast<int>(m.elements.size()); ++e) {
        const double u0 = u[m.elements[e][0]], u1 = u[m.elements[e][1]];
        if (u0 != 0.0 || u1 != 0.0) {
            pieces.emplace_back(m.nodes[m.elements[e][0]][0], m.nodes[m.elements[e][1]][0]);
        }
    }
    auto G = [&](double y) {
        double g = 0.0;
        for (auto [a, b] : pieces) {
            const int ea = node_at(m, a), eb = node_at(m, b);
            auto f = [&](double x) {
                const double ux = u[ea] + (u[eb] - u[ea]) * (x - a) / (b - a);
                return ux * std::pow(std::abs(x - y), -1.0 - 2.0 * s);
            };
            g += oracle::integrate_split(f, a, b, {}, 1e-14);
        }
        return g;
    };
    auto outer = [&](double y) { return oracle::hat(y, xi, h) * G(y); };
    return -c * oracle::integrate_split(outer, xi - h, xi + h, {xi}, 1e-13);
}

}  // namespace

TEST(ExteriorCoupling, SingleHatMatchesOracle) {
    const double s = 0.6;
    const auto m = mesh_1d(0.05);
    const auto fo = make_frac_order(s, 1);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.nodes.size()));
    u[node_at(m, 2.0)] = 1.0;
    const Eigen::VectorXd b = assemble_bext(m, fo, u);
    EXPECT_LT(b.maxCoeff(), 0.0);
    for (int i = 0; i < m.num_dofs(); i += 7) {
        EXPECT_NEAR(b[i] / bext_oracle(m, s, u, i), 1.0, 1e-9) << i;
    }
    EXPECT_LT((assemble_bext(m, fo, Eigen::VectorXd(2.0 * u)) - 2.0 * b).norm(), 1e-14 * b.norm());
    EXPECT_EQ(assemble_bext(m, fo, Eigen::VectorXd(0.0 * u)).norm(), 0.0);
}

TEST(ExteriorCoupling, CutoffComplementPathMatchesOracle) {
    const double s = 0.6;
    const double h = 0.1;
    const auto m = mesh_1d(h, 3.0, 0.1);
    const auto fo = make_frac_order(s, 1);
    const auto cut = make_cutoff(m.spec);
    const Eigen::VectorXd u = interpolate<1>(m, [&](const Point<1>& x) { return cut(x); });
    const Eigen::VectorXd b = assemble_bext(m, fo, u);
    for (int i = 0; i < m.num_dofs(); i += 3) {
        EXPECT_NEAR(b[i] / bext_oracle(m, s, u, i), 1.0, 1e-9) << i;
    }
}

TEST(ExteriorCoupling, TwoDimensionalPathsAgree) {
    // complement path (cutoff equal to one on most of W) against the sum of
    // per-node direct evaluations, which always take the direct path
    const auto m = mesh_2d(0.125, 2.0);
    const auto fo = make_frac_order(0.5, 2);
    Cutoff cut{m.spec.w_inner(), m.spec.R, 0.125};
    const Eigen::VectorXd u = interpolate<2>(m, [&](const Point<2>& x) { return cut(x); });
    const Eigen::VectorXd b = assemble_bext(m, fo, u);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(m.num_dofs());
    for (int n = 0; n < static_cast<int>(m.nodes.size()); ++n) {
        if (u[n] != 0.0) {
            Eigen::VectorXd e = Eigen::VectorXd::Zero(u.size());
            e[n] = u[n];
            acc += assemble_bext(m, fo, e);
        }
    }
    EXPECT_LT((b - acc).norm(), 1e-6 * b.norm());
    EXPECT_LT(b.maxCoeff(), 0.0);
}

TEST(ExteriorCoupling, RejectsDatumTouchingInterior) {
    const auto m = mesh_1d(0.05);
    const auto fo = make_frac_order(0.6, 1);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.nodes.size()));
    u[node_at(m, 1.0)] = 1.0;
    EXPECT_THROW(assemble_bext(m, fo, u), ContractError);
    EXPECT_THROW(assemble_bext(m, fo, Eigen::VectorXd::Zero(3)), ContractError);
}

TEST(Operators, BundleIsConsistentAndCacheRoundTrips) {
    auto mesh = std::make_shared<const Mesh<1>>(mesh_1d(0.1, 3.0, 0.1));
    const auto fo = make_frac_order(0.6, 1);
    const auto cut = make_cutoff(mesh->spec);
    const auto ops = assemble_operators<1>(mesh, fo, cut);
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(ops.S).info(), Eigen::Success);
    const Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(mesh->num_dofs(), -1.0, 2.0);
    EXPECT_GE(ops.norm_S(v), ops.norm_L2(v));

    const auto dir = std::filesystem::temp_directory_path() / "fraccal_cache_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "ops.bin";
    const auto key = fnv1a64(operators_key(mesh->spec, fo, cut, QuadratureOptions{}));
    save_operators(path, ops, key);
    const auto back = load_operators<1>(path, mesh, fo, cut, key);
    ASSERT_TRUE(back.has_value());
    EXPECT_EQ((back->A0 - ops.A0).norm(), 0.0);
    EXPECT_EQ((back->B - ops.B).norm(), 0.0);
    EXPECT_EQ((back->b_ext - ops.b_ext).norm(), 0.0);
    EXPECT_EQ((back->u_hf - ops.u_hf).norm(), 0.0);
    EXPECT_EQ(Eigen::MatrixXd(back->W_obs - ops.W_obs).norm(), 0.0);
    EXPECT_FALSE(load_operators<1>(path, mesh, fo, cut, key + 1).has_value());
    EXPECT_FALSE(load_operators<1>(dir / "missing.bin", mesh, fo, cut, key).has_value());
    std::filesystem::remove_all(dir);
}

TEST(Cutoff, VanishesInsideAndAtOuterBoundary) {
    const DomainSpec<2> spec{3.0, 1.0, 0.05, 0.05, Box<2>::centered(0.75)};
    const auto c = make_cutoff(spec);
    EXPECT_EQ(c(Point<2>{0.0, 0.0}), 0.0);
    EXPECT_EQ(c(Point<2>{1.05, 0.3}), 0.0);
    EXPECT_EQ(c(Point<2>{3.0, 0.0}), 0.0);
    EXPECT_EQ(c(Point<2>{2.0, 0.0}), 1.0);
    EXPECT_EQ(c(Point<2>{-2.0, 2.5}), 1.0);
    EXPECT_THROW(make_cutoff(DomainSpec<1>{1.2, 1.0, 0.05, 0.05, Box<1>::centered(0.5)}), ConfigError);
}
