#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "fraccal/kernel.hpp"
#include "oracles.hpp"

using namespace fraccal;

namespace {

Mesh<1> line_mesh(double h = 0.05, double R = 3.0) {
    return build_mesh<1>(DomainSpec<1>{R, 1.0, 0.05, h, Box<1>::centered(0.75)});
}

Mesh<2> square_mesh(double h = 0.25) {
    return build_mesh<2>(DomainSpec<2>{1.0, 0.5, 0.25, h, Box<2>::centered(0.25)});
}

int element_at(const Mesh<1>& m, double lo) {
    for (int e = 0; e < static_cast<int>(m.elements.size()); ++e) {
        if (std::abs(m.nodes[m.elements[e][0]][0] - lo) < 1e-12) {
            return e;
        }
    }
    return -1;
}

// int_A int_B D_a D_b |x-y|^{-1-2s} for 1D hats restricted to the elements.
double pair_oracle_1d(double s, double a0, double a1, double b0, double b1, double na, double nb, double h) {
    // hat restricted to the union of the two elements
    auto phi = [&](double center, double x) {
        const bool inside = (x >= a0 && x <= a1) || (x >= b0 && x <= b1);
        return inside ? oracle::hat(x, center, h) : 0.0;
    };
    auto piece = [&](double x) { return (x >= a0 && x <= a1) ? 0 : 1; };
    auto slope = [&](double center, double x) {
        const double lo = piece(x) == 0 ? a0 : b0;
        const double hi = piece(x) == 0 ? a1 : b1;
        if (center == lo) {
            return -1.0 / h;
        }
        return center == hi ? 1.0 / h : 0.0;
    };
    // same-piece differences use the slope so that small offsets carry no cancellation
    auto D = [&](double center, double x, double y, double sign, double r) {
        const double lo = piece(x) == 0 ? a0 : b0;
        const double hi = piece(x) == 0 ? a1 : b1;
        if (y >= lo && y <= hi) {
            return -slope(center, x) * sign * r;
        }
        return phi(center, x) - phi(center, y);
    };
    // integrate in the offset r = |x - y| so the diagonal singularity is resolved exactly
    auto inner = [&](double x) {
        auto side = [&](double sign, double rmin, double rmax) {
            if (rmax <= rmin) {
                return 0.0;
            }
            auto f = [&](double r) {
                const double y = x + sign * r;
                return r < 1e-100 ? 0.0 : D(na, x, y, sign, r) * D(nb, x, y, sign, r) * std::pow(r, -1.0 - 2.0 * s);
            };
            return oracle::integrate_split_ts(f, rmin, rmax, {}, 1e-12);
        };
        return side(-1.0, std::max(0.0, x - b1), x - b0) + side(1.0, std::max(0.0, b0 - x), b1 - x);
    };
    return oracle::integrate_split_ts(inner, a0, a1, {}, 1e-11);
}

}  // namespace

TEST(FracOrder, NormalizationMatchesExtendedPrecision) {
    EXPECT_NEAR(make_frac_order(0.5, 1).c_ds, 1.0 / std::numbers::pi, 1e-15);
    for (int d : {1, 2}) {
        for (double s : {0.1, 0.3, 0.5, 0.6, 0.9}) {
            EXPECT_NEAR(make_frac_order(s, d).c_ds / oracle::normalization(s, d), 1.0, 1e-13) << s << ' ' << d;
        }
    }
}

TEST(FracOrder, RejectsInvalidOrder) {
    EXPECT_THROW(make_frac_order(0.0, 1), ConfigError);
    EXPECT_THROW(make_frac_order(1.0, 1), ConfigError);
    EXPECT_THROW(make_frac_order(0.5, 3), ConfigError);
}

TEST(KernelEval, ValueHomogeneityAndSingularity) {
    const auto fo = make_frac_order(0.5, 1);
    EXPECT_NEAR(kernel_eval<1>(fo, {0.0}, {1.0}), 1.0 / std::numbers::pi, 1e-15);
    for (double s : {0.2, 0.7}) {
        const auto f2 = make_frac_order(s, 2);
        const double r1 = kernel_eval<2>(f2, {0.1, 0.2}, {0.4, 0.6});
        const double r2 = kernel_eval<2>(f2, {0.1, 0.2}, {0.7, 1.0});
        EXPECT_NEAR(r1 / r2, std::pow(2.0, 2.0 + 2.0 * s), 1e-12);
    }
    EXPECT_THROW(kernel_eval<1>(fo, {0.3}, {0.3}), DomainError);
}

TEST(TailWeight, OneDimensionalClosedForm) {
    const auto fo = make_frac_order(0.6, 1);
    EXPECT_NEAR(tail_weight<1>(fo, {0.0}, 3.0), 2.0 * std::pow(3.0, -1.2) / 1.2, 1e-14);
    EXPECT_NEAR(tail_weight<1>(fo, {0.0}, 3.0), 0.44597, 5e-6);
    for (double x : {-0.9, -0.3, 0.2, 0.8}) {
        EXPECT_NEAR(tail_weight<1>(fo, {x}, 3.0), oracle::box_complement_1d(0.6, x, 3.0), 1e-12);
        EXPECT_GT(tail_weight<1>(fo, {x}, 3.0), tail_weight<1>(fo, {0.0}, 3.0));
    }
}

TEST(TailWeight, LemmaBoundAtSampleOrders) {
    for (double s : {0.3, 0.6, 0.9}) {
        const auto fo = make_frac_order(s, 1);
        for (double R : {2.0, 3.0, 5.0}) {
            double mx = 0.0;
            for (int k = -100; k <= 100; ++k) {
                mx = std::max(mx, tail_weight<1>(fo, {k / 100.0 * 0.999999}, R));
            }
            EXPECT_LE(mx, 2.0 / (2.0 * s) * std::pow(R - 1.0, -2.0 * s));
        }
    }
    const auto fo = make_frac_order(0.6, 1);
    EXPECT_LE((std::pow(2.0, -1.2) + std::pow(4.0, -1.2)) / 1.2, (2.0 / 1.2) * std::pow(2.0, -1.2));
    EXPECT_NEAR(tail_weight<1>(fo, {1.0}, 3.0), (std::pow(2.0, -1.2) + std::pow(4.0, -1.2)) / 1.2, 1e-14);
}

TEST(TailWeight, DecreasingInR) {
    for (double s : {0.25, 0.5, 0.75}) {
        const auto f1 = make_frac_order(s, 1);
        const auto f2 = make_frac_order(s, 2);
        EXPECT_GT(tail_weight<1>(f1, {0.4}, 2.0), tail_weight<1>(f1, {0.4}, 3.0));
        EXPECT_GT(tail_weight<2>(f2, {0.4, -0.2}, 2.0), tail_weight<2>(f2, {0.4, -0.2}, 3.0));
    }
}

TEST(TailWeight, TwoDimensionalMatchesPolarOracle) {
    for (double s : {0.2, 0.5, 0.8}) {
        const auto fo = make_frac_order(s, 2);
        for (auto x : {Point<2>{0.0, 0.0}, Point<2>{0.9, -0.3}, Point<2>{-2.5, 2.9}, Point<2>{2.99, 0.0}}) {
            const double ref = oracle::box_complement_2d(s, x[0], x[1], 3.0);
            EXPECT_NEAR(tail_weight<2>(fo, x, 3.0) / ref, 1.0, 1e-10) << s << ' ' << x[0] << ' ' << x[1];
        }
    }
}

TEST(TailWeight, RejectsPointsOutsideOrOnBoundary) {
    const auto f1 = make_frac_order(0.5, 1);
    const auto f2 = make_frac_order(0.5, 2);
    EXPECT_THROW(tail_weight<1>(f1, {3.0}, 3.0), DomainError);
    EXPECT_THROW(tail_weight<1>(f1, {-4.0}, 3.0), DomainError);
    EXPECT_THROW(tail_weight<2>(f2, {0.0, 3.0}, 3.0), DomainError);
}

TEST(CrossIntegral, MatchesNestedQuadrature) {
    const auto mesh = build_mesh<1>(DomainSpec<1>{3.0, 1.0, 0.05, 0.05, Box<1>::centered(0.75)});
    const auto fo = make_frac_order(0.6, 1);
    const int ea = element_at(mesh, 0.0);
    const int eb = element_at(mesh, 2.0);
    const int na = mesh.elements[ea][0];  // node at 0
    const int nb = mesh.elements[eb][0];  // node at 2
    const double val = cross_integral<1>(fo, mesh, ea, na, eb, nb);
    auto inner = [&](double x) {
        auto f = [&](double y) { return (1.0 - (y - 2.0) / 0.05) * std::pow(y - x, -2.2); };
        return oracle::integrate_split(f, 2.0, 2.05, {}, 1e-13);
    };
    auto outer = [&](double x) { return (1.0 - x / 0.05) * inner(x); };
    const double ref = oracle::integrate_split(outer, 0.0, 0.05, {}, 1e-13);
    EXPECT_GT(val, 0.0);
    EXPECT_NEAR(val / ref, 1.0, 1e-9);
    EXPECT_NEAR(cross_integral<1>(fo, mesh, eb, nb, ea, na), val, 1e-15 * std::abs(val));
    // node not on the element: zero shape function
    EXPECT_EQ(cross_integral<1>(fo, mesh, ea, nb, eb, nb), 0.0);
    EXPECT_THROW(cross_integral<1>(fo, mesh, ea, na, ea + 1, na), ContractError);
}

TEST(SingularPair, OneDimensionalIdenticalAndVertexMatchOracle) {
    const double h = 0.05;
    const auto mesh = line_mesh(h);
    for (double s : {0.3, 0.5, 0.6, 0.9}) {
        const auto fo = make_frac_order(s, 1);
        const int e0 = element_at(mesh, 0.0);
        const int e1 = element_at(mesh, h);
        const int n0 = mesh.elements[e0][0], n1 = mesh.elements[e0][1], n2 = mesh.elements[e1][1];
        // identical element
        for (auto [na, xa] : {std::pair{n0, 0.0}, std::pair{n1, h}}) {
            for (auto [nb, xb] : {std::pair{n0, 0.0}, std::pair{n1, h}}) {
                const double ref = pair_oracle_1d(s, 0.0, h, 0.0, h, xa, xb, h);
                EXPECT_NEAR(singular_pair<1>(fo, mesh, e0, na, e0, nb) / ref, 1.0, 1e-8) << s;
            }
        }
        // vertex-adjacent pair, all local combinations
        for (auto [na, xa] : {std::pair{n0, 0.0}, std::pair{n1, h}, std::pair{n2, 2 * h}}) {
            for (auto [nb, xb] : {std::pair{n0, 0.0}, std::pair{n1, h}, std::pair{n2, 2 * h}}) {
                const double ref = pair_oracle_1d(s, 0.0, h, h, 2 * h, xa, xb, h);
                const double val = singular_pair<1>(fo, mesh, e0, na, e1, nb);
                EXPECT_NEAR(val, ref, 1e-8 * std::abs(ref) + 1e-14) << s << ' ' << xa << ' ' << xb;
                EXPECT_NEAR(singular_pair<1>(fo, mesh, e1, nb, e0, na), val, 1e-13 * std::abs(val));
            }
        }
    }
}

TEST(SingularPair, ConstantsGiveZero) {
    const auto m1 = line_mesh();
    const auto f1 = make_frac_order(0.6, 1);
    const auto m2 = square_mesh();
    const auto f2 = make_frac_order(0.4, 2);
    auto check = [](const auto& pm) {
        const Eigen::VectorXd one = Eigen::VectorXd::Ones(pm.value.rows());
        EXPECT_LT((pm.value * one).norm(), 1e-12 * pm.value.norm());
        EXPECT_LT((pm.value - pm.value.transpose()).norm(), 1e-14 * pm.value.norm());
    };
    check(pair_matrix<1>(f1, m1, 10, 10));
    check(pair_matrix<1>(f1, m1, 10, 11));
    check(pair_matrix<1>(f1, m1, 10, 13));
    for (int e = 0; e < static_cast<int>(m2.elements.size()); ++e) {
        for (int g = 0; g < static_cast<int>(m2.elements.size()); ++g) {
            check(pair_matrix<2>(f2, m2, e, g));
        }
    }
}

TEST(SingularPair, TwoDimensionalSwapSymmetry) {
    const auto mesh = square_mesh();
    const auto fo = make_frac_order(0.7, 2);
    const int ne = static_cast<int>(mesh.elements.size());
    for (int e = 0; e < ne; ++e) {
        for (int g = 0; g < ne; ++g) {
            if (classify_pair<2>(mesh.elements[e], mesh.elements[g]) == Adjacency::disjoint) {
                continue;
            }
            const auto pab = pair_matrix<2>(fo, mesh, e, g);
            const auto pba = pair_matrix<2>(fo, mesh, g, e);
            for (int a : pab.nodes) {
                for (int b : pab.nodes) {
                    EXPECT_NEAR(pab.at(a, b), pba.at(a, b), 1e-9 * pab.value.norm());
                }
            }
        }
    }
}

TEST(SingularPair, RejectsDisjointElements) {
    const auto mesh = line_mesh();
    const auto fo = make_frac_order(0.5, 1);
    EXPECT_THROW(singular_pair<1>(fo, mesh, 3, mesh.elements[3][0], 7, mesh.elements[7][0]), ContractError);
}

TEST(SingularPair, TriangleSelfEnergyMatchesCovariogramOracle) {
    const auto mesh = square_mesh();
    for (double s : {0.25, 0.5, 0.75}) {
        const auto fo = make_frac_order(s, 2);
        for (int e : {0, 1}) {
            const auto pm = pair_matrix<2>(fo, mesh, e, e);
            const auto v = mesh.vertices(e);
            oracle::Poly K = {{v[0][0], v[0][1]}, {v[1][0], v[1][1]}, {v[2][0], v[2][1]}};
            for (auto g : {std::array<double, 2>{1.0, 0.0}, {0.0, 1.0}, {0.6, -1.3}}) {
                Eigen::Vector3d gv;
                for (int k = 0; k < 3; ++k) {
                    gv[k] = g[0] * v[k][0] + g[1] * v[k][1];
                }
                const double ref = oracle::triangle_energy(s, K, g[0], g[1]);
                EXPECT_NEAR(gv.dot(pm.value * gv) / ref, 1.0, 1e-8) << s << ' ' << e;
            }
        }
    }
}

namespace {

// Sum over ordered element pairs of a patch of the local forms for an affine g.
double patch_energy(const Mesh<2>& mesh, const FracOrder& fo, double x1, double y1, double g0, double g1) {
    std::vector<int> patch;
    for (int e = 0; e < static_cast<int>(mesh.elements.size()); ++e) {
        const auto c = mesh.centroid(e);
        if (c[0] > -1.0 && c[0] < x1 - 1.0 && c[1] > -1.0 && c[1] < y1 - 1.0) {
            patch.push_back(e);
        }
    }
    double total = 0.0;
    for (int a : patch) {
        for (int b : patch) {
            const auto pm = pair_matrix<2>(fo, mesh, a, b);
            Eigen::VectorXd gv(pm.nodes.size());
            for (std::size_t k = 0; k < pm.nodes.size(); ++k) {
                const auto& p = mesh.nodes[pm.nodes[k]];
                gv[static_cast<Eigen::Index>(k)] = g0 * p[0] + g1 * p[1];
            }
            total += gv.dot(pm.value * gv);
        }
    }
    return total;
}

}  // namespace

TEST(SingularPair, RectanglePatchesMatchCovariogramOracle) {
    const auto mesh = square_mesh(0.25);
    for (double s : {0.3, 0.5, 0.8}) {
        const auto fo = make_frac_order(s, 2);
        for (auto [lx, ly] : {std::pair{0.25, 0.25}, std::pair{0.5, 0.25}, std::pair{0.25, 0.5}, std::pair{0.5, 0.5},
                              std::pair{0.75, 0.5}}) {
            for (auto g : {std::array<double, 2>{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}, {1.0, -2.0}}) {
                const double val = patch_energy(mesh, fo, lx, ly, g[0], g[1]);
                const double ref = oracle::rectangle_energy(s, g[0], g[1], lx, ly);
                EXPECT_NEAR(val / ref, 1.0, 1e-8) << "s=" << s << " L=" << lx << 'x' << ly << " g=" << g[0] << ','
                                                  << g[1];
            }
        }
    }
}
