#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "volterra/linear.hpp"

#include <cmath>
#include <random>

using namespace volterra;

namespace {

LinearBsvieSpec scalar_spec(double a_rate, double a_scale, double b_scale, double lambda,
                            double eta) {
    LinearBsvieSpec s;
    s.m = 1;
    s.A = [a_rate, a_scale](double t, double sfix, int, std::span<double> out) {
        out[0] = a_scale * std::exp(-a_rate * (sfix - t));
    };
    s.B = [b_scale](double, double, int, int, std::span<double> out) { out[0] = b_scale; };
    s.KA = a_scale == 0.0 ? Kernel::zero() : Kernel::exponential(a_rate, std::fabs(a_scale));
    s.KB = b_scale == 0.0 ? Kernel::zero() : Kernel::constant(std::fabs(b_scale));
    s.A_zero = a_scale == 0.0;
    s.B_zero = b_scale == 0.0;
    s.lambda = lambda;
    s.eta = eta;
    return s;
}

}  // namespace

TEST_CASE("fundamental solution") {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    const int N = 8;

    // B = 0: Phi = I.
    auto s0 = scalar_spec(0.0, 0.0, 0.0, 0.5, 0.0);
    auto phi0 = fundamental_phi(s0, ens);
    for (int p = 0; p < ens.paths(); p += 17) {
        for (int i = 0; i <= N; ++i) {
            for (int j = i; j <= N; ++j) CHECK(phi0.at(p, i, j)[0] == 1.0);
        }
    }

    // Constant B, lambda = 0: discrete stochastic exponential, E[Phi(t,T)] = 1.
    auto s1 = scalar_spec(0.0, 0.0, 0.6, 0.0, 0.0);
    auto phi1 = fundamental_phi(s1, ens);
    for (int i = 0; i <= N; ++i) {
        double mean = 0.0;
        for (int p = 0; p < ens.paths(); ++p) mean += phi1.at(p, i, N)[0];
        mean /= ens.paths();
        CHECK(mean == doctest::Approx(1.0).epsilon(1e-12));
        // Row martingale: E[Phi(t_i, s_{j+1}) | F_j] = Phi(t_i, s_j).
        for (int j = i; j < N; ++j) {
            std::vector<double> nxt(ens.paths()), fit(ens.paths());
            for (int p = 0; p < ens.paths(); ++p) nxt[p] = phi1.at(p, i, j + 1)[0];
            ens.cond_expect(nxt, 1, j, fit);
            for (int p = 0; p < ens.paths(); p += 31) {
                CHECK(fit[p] == doctest::Approx(phi1.at(p, i, j)[0]).epsilon(1e-12));
            }
        }
    }

    // Conditional second-moment bound (operator-norm estimate), lambda > 0.
    auto s2 = scalar_spec(0.0, 0.0, 0.5, 1.0, 0.0);
    double kb2 = weighted_norm(s2.KB, 2, s2.lambda);
    REQUIRE(kb2 < 1.0);
    auto phi2 = fundamental_phi(s2, ens);
    double bound = 1.0 / (1.0 - kb2);
    for (int i = 0; i <= N; ++i) {
        for (int j = i; j <= N; ++j) {
            std::vector<double> sq(ens.paths()), fit(ens.paths());
            for (int p = 0; p < ens.paths(); ++p) sq[p] = phi2.at(p, i, j)[0] * phi2.at(p, i, j)[0];
            ens.cond_expect(sq, 1, i, fit);
            for (int p = 0; p < ens.paths(); p += 63) {
                CHECK(std::sqrt(fit[p]) <= bound * (1.0 + 1e-9));
            }
        }
    }
}

TEST_CASE("resolvent series") {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    const int N = 8;
    const double h = ens.grid().h();

    // A = 0: R = 0.
    auto s0 = scalar_spec(0.0, 0.0, 0.3, 1.0, 0.0);
    auto phi0 = fundamental_phi(s0, ens);
    auto r0 = resolvent(s0, phi0, ens);
    for (double v : r0.v) CHECK(v == 0.0);

    // Scalar deterministic A = a, B = 0: Xi_i(t,s) = a^i (s-t)^{i-1}/(i-1)!,
    // R(t,s) = a e^{a(s-t)}; the discrete composition converges at O(h).
    const double a = 0.8;
    auto s1 = scalar_spec(0.0, a, 0.0, 1.0, 0.0);
    auto phi1 = fundamental_phi(s1, ens);
    ResolventDiagnostics diag;
    auto r1 = resolvent(s1, phi1, ens, 1e-12, &diag);
    for (int i = 0; i <= N; ++i) {
        for (int j = i; j <= N; ++j) {
            double tau = ens.grid().node(j) - ens.grid().node(i);
            CHECK(r1.at(0, i, j)[0] ==
                  doctest::Approx(a * std::exp(a * tau)).epsilon(3.0 * a * h));
        }
    }
    // Geometric decay of the term norms with the predicted ratio.
    REQUIRE(diag.term_norms.size() >= 3);
    for (std::size_t k = 1; k + 1 < diag.term_norms.size(); ++k) {
        if (diag.term_norms[k] > 1e-14) {
            CHECK(diag.term_norms[k + 1] / diag.term_norms[k] <=
                  1.1 * diag.ratio_bound + 1e-12);
        }
    }

    // Resolvent identity residual R - Xi1 - R * Xi1 -> 0 at rate O(h).
    auto identity_residual = [&](int Ngrid) {
        auto e = FilteredEnsemble::tree(TimeGrid{1.0, Ngrid});
        auto sp = scalar_spec(0.0, a, 0.0, 1.0, 0.0);
        auto ph = fundamental_phi(sp, e);
        auto R = resolvent(sp, ph, e, 1e-14);
        double hh = e.grid().h();
        double worst = 0.0;
        for (int i = 0; i <= Ngrid; ++i) {
            for (int j = i; j <= Ngrid; ++j) {
                double conv = 0.0;
                for (int r = i; r < j; ++r) conv += R.at(0, i, r)[0] * a * hh;
                worst = std::max(worst, std::fabs(R.at(0, i, j)[0] - a - conv));
            }
        }
        return worst;
    };
    // The discrete series telescopes, so the identity holds to machine
    // precision at every h (well within the O(h) requirement).
    CHECK(identity_residual(8) < 1e-12);
    CHECK(identity_residual(16) < 1e-12);
    // Outside the domain: refused.
    auto bad = scalar_spec(0.0, 3.0, 0.0, 1.0, 0.0);
    auto phib = fundamental_phi(bad, ens);
    CHECK_THROWS_AS(resolvent(bad, phib, ens), std::runtime_error);
}

TEST_CASE("variation of constants: deterministic closed form") {
    // A = a, B = 0, psi = 1: Y(t) = 1 + a (e^{(a-lambda)(T-t)} - 1)/(a - lambda).
    const double a = 0.5, lambda = 1.0;
    for (int N : {8, 12}) {
        auto ens = FilteredEnsemble::tree(TimeGrid{1.0, N});
        auto spec = scalar_spec(0.0, a, 0.0, lambda, 0.0);
        auto psi = AdaptedProcess::constant(ens, std::vector<double>{1.0});
        auto voc = variation_of_constants(spec, psi, ens);
        double h = ens.grid().h();
        for (int i = 0; i <= N; ++i) {
            double tau = 1.0 - ens.grid().node(i);
            double expected = 1.0 + a * (std::exp((a - lambda) * tau) - 1.0) / (a - lambda);
            CHECK(std::fabs(voc.Y.at(0, i)[0] - expected) <= 3.0 * h);
        }
    }
}

TEST_CASE("variation of constants: A = B = 0 reduces to the trivial solution") {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 6});
    auto spec = scalar_spec(0.0, 0.0, 0.0, 1.0, -0.2);
    auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
        out[0] = std::exp(-0.2 * ens.grid().node(i)) * (1.0 + ens.wiener(p, 6));
    });
    auto voc = variation_of_constants(spec, psi, ens, true);
    auto trivial = solve_trivial(psi, ens);
    for (std::size_t k = 0; k < voc.Y.v.size(); ++k) {
        CHECK(voc.Y.v[k] == doctest::Approx(trivial.Y.v[k]).epsilon(1e-12));
    }
    CHECK(voc.gap < 1e-10);
}

TEST_CASE("variation of constants vs solver: stochastic gap") {
    // gap <= 5 sqrt(h) ||psi|| and observed convergence order >= 0.8.
    const double lambda = 1.0, eta = 0.0;
    std::vector<double> gaps;
    for (int N : {3, 6, 12}) {
        auto ens = FilteredEnsemble::tree(TimeGrid{0.375, N});
        auto spec = scalar_spec(0.5, 0.45, 0.4, lambda, eta);
        auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            out[0] = 1.0 + 0.5 * ens.wiener(p, N) - 0.1 * ens.grid().node(i);
        });
        auto voc = variation_of_constants(spec, psi, ens, true);
        double psin = weighted_sq_norm(ens, psi, eta);
        CHECK(voc.gap <= 5.0 * std::sqrt(ens.grid().h()) * psin);
        gaps.push_back(voc.gap);
    }
    double order1 = std::log2(gaps[0] / gaps[1]);
    double order2 = std::log2(gaps[1] / gaps[2]);
    CHECK(order1 >= 0.8);
    CHECK(order2 >= 0.8);
}

TEST_CASE("duality principle") {
    const double mu = 1.2, eta = 0.0, lambda = 1.5;

    // C = D = 0: both sides equal the tower-property pairing, gap ~ machine.
    {
        auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
        LinearSvieSpec fwd;
        fwd.n = 1;
        fwd.C_zero = fwd.D_zero = true;
        fwd.KC = Kernel::zero();
        fwd.KD = Kernel::zero();
        auto phi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            out[0] = 1.0 + 0.3 * ens.wiener(p, i);
        });
        auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int, std::span<double> out) {
            out[0] = 0.7 + ens.wiener(p, 8);
        });
        auto r = duality_check(fwd, phi, psi, mu, eta, lambda, ens);
        CHECK(r.gap < 1e-12);

        // psi = 0: both sides vanish.
        auto z = AdaptedProcess::zeros(ens, 1);
        auto rz = duality_check(fwd, phi, z, mu, eta, lambda, ens);
        CHECK(rz.lhs == doctest::Approx(0.0));
        CHECK(rz.rhs == doctest::Approx(0.0));
    }

    // Randomized scalar family: gap = O(h) with observed order >= 0.8.
    std::mt19937 rng(9);
    std::uniform_real_distribution<double> unif(0.2, 0.5);
    for (int rep = 0; rep < 3; ++rep) {
        double c0 = unif(rng), d0 = unif(rng);
        std::vector<double> gaps;
        for (int N : {3, 6, 12}) {
            auto ens = FilteredEnsemble::tree(TimeGrid{0.75, N});
            LinearSvieSpec fwd;
            fwd.n = 1;
            fwd.C = [c0](double t, double s, int, std::span<double> out) {
                out[0] = c0 * std::exp(-(t - s));
            };
            fwd.D = [d0](double, double, int, int, std::span<double> out) { out[0] = d0; };
            fwd.KC = Kernel::exponential(1.0, c0);
            fwd.KD = Kernel::constant(d0);
            auto phi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
                out[0] = 1.0 + 0.2 * ens.wiener(p, i);
            });
            auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
                out[0] = 0.5 + 0.4 * ens.wiener(p, N) + 0.1 * ens.grid().node(i);
            });
            auto r = duality_check(fwd, phi, psi, mu, eta, lambda, ens);
            gaps.push_back(r.gap);
        }
        CHECK(std::log2(gaps[0] / gaps[1]) >= 0.8);
        CHECK(std::log2(gaps[1] / gaps[2]) >= 0.8);
    }

    // Hypothesis violation refused.
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 4});
    LinearSvieSpec fwd;
    fwd.n = 1;
    fwd.C_zero = fwd.D_zero = true;
    fwd.KC = Kernel::constant(1.0);  // rho_{C,D} = 2 with these kernels
    fwd.KD = Kernel::constant(1.0);
    auto one = AdaptedProcess::constant(ens, std::vector<double>{1.0});
    CHECK_THROWS_AS(duality_check(fwd, one, one, 1.0, 0.0, 1.0, ens), std::runtime_error);
}

TEST_CASE("bsvie to bsde reduction") {
    const double lambda = 1.5, mu = 0.6;

    // Y = 0 -> reduction vanishes.
    {
        auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 6});
        auto sol = solve_trivial(AdaptedProcess::zeros(ens, 1), ens);
        auto red = bsvie_to_bsde(sol, lambda, mu, ens);
        for (double v : red.cY.v) CHECK(v == 0.0);
        for (double v : red.cZ.v) CHECK(v == 0.0);
    }

    // Y = 1, Z = 0: cY(t) = (1 - e^{-lambda (T-t)})/lambda + O(h), cZ = 0.
    {
        auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 10});
        auto sol = solve_trivial(AdaptedProcess::constant(ens, std::vector<double>{1.0}), ens);
        auto red = bsvie_to_bsde(sol, lambda, mu, ens);
        double h = ens.grid().h();
        for (int i = 0; i <= 10; ++i) {
            double expected = (1.0 - std::exp(-lambda * (1.0 - ens.grid().node(i)))) / lambda;
            CHECK(std::fabs(red.cY.at(0, i)[0] - expected) <= 2.0 * h);
        }
        for (double v : red.cZ.v) CHECK(v == 0.0);
    }

    // Y = W(t): BSDE residual weighted norm decays at order >= 0.8.
    std::vector<double> norms;
    for (int N : {3, 6, 12}) {
        auto ens = FilteredEnsemble::tree(TimeGrid{0.75, N});
        auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            out[0] = ens.wiener(p, i);
        });
        auto sol = solve_trivial(psi, ens);
        auto red = bsvie_to_bsde(sol, lambda, mu, ens);
        norms.push_back(red.residual_norm);
    }
    CHECK(std::log2(norms[0] / norms[1]) >= 0.8);
    CHECK(std::log2(norms[1] / norms[2]) >= 0.8);

    // Hypothesis violation refused.
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 4});
    auto sol = solve_trivial(AdaptedProcess::zeros(ens, 1), ens);
    CHECK_THROWS_AS(bsvie_to_bsde(sol, 1.0, 0.8, ens), std::runtime_error);
}

TEST_CASE("linearity of the variation-of-constants map") {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 6});
    auto spec = scalar_spec(1.0, 0.4, 0.3, 1.2, 0.0);
    auto p1 = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
        out[0] = 1.0 + ens.wiener(p, i);
    });
    auto p2 = AdaptedProcess::from_fn(ens, 1, [&](int p, int, std::span<double> out) {
        out[0] = ens.wiener(p, 6) * ens.wiener(p, 6);
    });
    auto mix = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
        out[0] = 1.5 * p1.at(p, i)[0] - 0.5 * p2.at(p, i)[0];
    });
    auto y1 = variation_of_constants(spec, p1, ens);
    auto y2 = variation_of_constants(spec, p2, ens);
    auto ym = variation_of_constants(spec, mix, ens);
    for (int p = 0; p < ens.paths(); p += 5) {
        for (int i = 0; i <= 6; ++i) {
            CHECK(ym.Y.at(p, i)[0] ==
                  doctest::Approx(1.5 * y1.Y.at(p, i)[0] - 0.5 * y2.Y.at(p, i)[0]).epsilon(1e-11));
        }
    }
}
