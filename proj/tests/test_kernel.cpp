#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "volterra/kernel.hpp"

#include <cmath>
#include <random>

using namespace volterra;

namespace {

// Independent scalar bisection used as the oracle for critical weights.
template <typename F>
double bisect_root(const F& f, double lo, double hi) {
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        (f(mid) > 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("weighted norm closed forms") {
    // Unit Caputo kernel: [K]_1(rho) = rho^{-alpha}.
    Kernel caputo = Kernel::fractional(0.75, 1.0 / std::tgamma(0.75));
    CHECK(weighted_norm(caputo, 1, 2.0) == doctest::Approx(std::pow(2.0, -0.75)).epsilon(1e-12));
    CHECK(weighted_norm(caputo, 1, 2.0) == doctest::Approx(0.5946035575013605).epsilon(1e-9));

    // Constant kernel: [K]_2(rho) = c / sqrt(2 rho).
    CHECK(weighted_norm(Kernel::constant(1.0), 2, 0.5) == doctest::Approx(1.0).epsilon(1e-14));

    // Zero kernel.
    CHECK(weighted_norm(Kernel::zero(), 1, -3.0) == 0.0);
    CHECK(weighted_norm(Kernel::zero(), 2, 0.0) == 0.0);

    // Exponential: analytic antiderivative int_0^inf e^{-(rho+a)t} dt.
    CHECK(weighted_norm(Kernel::exponential(1.0, 1.0), 1, 1.0) == doctest::Approx(0.5).epsilon(1e-14));

    // Divergent norms report +inf instead of erroring.
    CHECK(weighted_norm(Kernel::constant(1.0), 1, 0.0) == kInf);
    CHECK(weighted_norm(Kernel::constant(1.0), 2, -1.0) == kInf);
    CHECK(weighted_norm(Kernel::fractional(0.6, 1.0), 1, 0.0) == kInf);
    CHECK(weighted_norm(Kernel::exponential(1.0, 1.0), 1, -1.0) == kInf);
}

TEST_CASE("power-exponential norm vs Gamma-function oracle") {
    // Oracle: [K]_p(rho)^p = c^p Gamma(p(alpha-1)+1) / (p(rho+a))^{p(alpha-1)+1}.
    for (double alpha : {0.6, 0.75, 0.9}) {
        for (double rho : {0.5, 1.0, 2.0}) {
            Kernel k = Kernel::power_exponential(alpha, 0.7, 1.3);
            for (int p : {1, 2}) {
                double beta = p * (alpha - 1.0) + 1.0;
                double expected = std::pow(k.scale, p) * std::tgamma(beta) /
                                  std::pow(p * (rho + k.rate), beta);
                expected = std::pow(expected, 1.0 / p);
                CHECK(weighted_norm(k, p, rho) == doctest::Approx(expected).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("quadrature agrees with closed forms to 1e-8") {
    for (double alpha : {0.6, 0.75, 0.9}) {
        Kernel k = Kernel::fractional(alpha, 1.0 / std::tgamma(alpha));
        for (double rho : {0.1, 0.5, 1.0, 2.0, 10.0}) {
            double cf = weighted_norm(k, 1, rho);
            double q = weighted_norm_quadrature(k, 1, rho);
            CHECK(std::fabs(q - cf) / cf < 1e-8);
            double cf2 = weighted_norm(k, 2, rho);
            double q2 = weighted_norm_quadrature(k, 2, rho);
            CHECK(std::fabs(q2 - cf2) / cf2 < 1e-8);
        }
    }
    Kernel e = Kernel::exponential(0.5, 2.0);
    for (double rho : {0.1, 1.0, 10.0}) {
        for (int p : {1, 2}) {
            double cf = weighted_norm(e, p, rho);
            CHECK(std::fabs(weighted_norm_quadrature(e, p, rho) - cf) / cf < 1e-8);
        }
    }
}

TEST_CASE("monotonicity and scaling properties") {
    std::mt19937 rng(42);
    std::uniform_real_distribution<double> unif(0.55, 0.95);
    std::vector<Kernel> kernels = {
        Kernel::constant(0.7), Kernel::exponential(0.3, 1.1),
        Kernel::fractional(unif(rng), 0.9), Kernel::power_exponential(unif(rng), 0.2, 1.4)};
    for (const Kernel& k : kernels) {
        for (int p : {1, 2}) {
            double prev = weighted_norm(k, p, 0.05);
            for (double rho : {0.1, 0.3, 1.0, 3.0, 10.0}) {
                double cur = weighted_norm(k, p, rho);
                CHECK(cur <= prev * (1 + 1e-12));
                prev = cur;
            }
        }
    }
    // Scaling: [c*K]_p = c [K]_p.
    Kernel k = Kernel::fractional(0.8, 1.0);
    Kernel k3 = Kernel::fractional(0.8, 3.0);
    for (int p : {1, 2}) {
        CHECK(weighted_norm(k3, p, 1.7) ==
              doctest::Approx(3.0 * weighted_norm(k, p, 1.7)).epsilon(1e-13));
    }
}

TEST_CASE("kernel validation errors") {
    CHECK_THROWS_AS(Kernel::fractional(0.4, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(Kernel::fractional(1.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(Kernel::constant(-1.0), std::invalid_argument);
    CHECK_THROWS_AS(Kernel::exponential(std::nan(""), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(weighted_norm(Kernel::constant(1.0), 3, 1.0), std::invalid_argument);
}

TEST_CASE("critical weight") {
    // kb = 0, ksigma = constant(1): [K]_2(rho) = 1/sqrt(2 rho) <= 1 iff rho >= 1/2.
    CHECK(critical_weight(Kernel::zero(), Kernel::constant(1.0)) ==
          doctest::Approx(0.5).epsilon(1e-9));

    // Empty condition: margin is 1 everywhere.
    CHECK(critical_weight(Kernel::zero(), Kernel::zero()) == -kInf);

    // Unit Caputo drift alone: [K]_1(rho) = rho^{-alpha} = 1 at rho = 1.
    for (double alpha : {0.6, 0.75, 0.9}) {
        Kernel k = Kernel::fractional(alpha, 1.0 / std::tgamma(alpha));
        CHECK(critical_weight(k, Kernel::zero()) == doctest::Approx(1.0).epsilon(1e-9));
    }

    // Negative critical weights are reachable for decaying kernels.
    // [K]_1(rho) = 1/(rho+2) <= 1 iff rho >= -1.
    CHECK(critical_weight(Kernel::exponential(2.0, 1.0), Kernel::zero()) ==
          doctest::Approx(-1.0).epsilon(1e-9));

    // Never admissible on the bracket: constant kernel too large.
    std::string diag;
    Kernel huge = Kernel::constant(1e12);
    // [K]_2 = 1e12/sqrt(2 rho) <= 1 requires rho >= 5e23 > 1e8.
    CHECK(critical_weight(Kernel::zero(), huge, &diag) == kInf);
    CHECK(!diag.empty());

    // Bracket property: margin > 0 strictly above rho_star, <= 0 below.
    Kernel kb = Kernel::fractional(0.7, 0.8);
    Kernel ks = Kernel::exponential(0.1, 0.5);
    double rs = critical_weight(kb, ks);
    for (double eps : {1e-4, 1e-2, 1.0}) {
        double above = 1.0 - weighted_norm(kb, 1, rs + eps) - weighted_norm(ks, 2, rs + eps);
        double below = 1.0 - weighted_norm(kb, 1, rs - eps) - weighted_norm(ks, 2, rs - eps);
        CHECK(above > 0.0);
        CHECK(below <= 0.0);
    }
}

TEST_CASE("bsvie margin and contraction constant") {
    auto z = Kernel::zero();
    BsvieMargin m = bsvie_margin(z, z, z, -3.0, 0.2);
    CHECK(m.margin == doctest::Approx(1.0));
    CHECK(m.c_eta_lambda == doctest::Approx(std::sqrt(2.0)));

    // kgz1 = constant(1) at lambda = 2: [K]_2(2) = 1/2.
    m = bsvie_margin(z, Kernel::constant(1.0), z, 17.0, 2.0);
    CHECK(m.margin == doctest::Approx(0.5).epsilon(1e-13));
    CHECK(m.c_eta_lambda == doctest::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-13));

    // kgy = exponential(rate 0) == constant in the L1 role, eta+lambda = 4.
    m = bsvie_margin(Kernel::exponential(0.0, 1.0), z, z, 1.0, 3.0);
    CHECK(m.margin == doctest::Approx(0.75).epsilon(1e-13));
    CHECK(m.admissible());

    // Inadmissible pair reports margin <= 0 and infinite constant.
    m = bsvie_margin(Kernel::constant(2.0), z, z, 0.0, 1.0);
    CHECK(m.margin < 0.0);
    CHECK(m.c_eta_lambda == kInf);
}

TEST_CASE("bsvie margin is monotone in eta and lambda separately") {
    Kernel kgy = Kernel::exponential(0.2, 0.4);
    Kernel kgz1 = Kernel::constant(0.3);
    Kernel kgz2 = Kernel::fractional(0.8, 0.2);
    double prev = -kInf;
    for (double eta : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
        double m = bsvie_margin(kgy, kgz1, kgz2, eta, 1.0).margin;
        CHECK(m >= prev - 1e-12);
        prev = m;
    }
    prev = -kInf;
    for (double lambda : {0.5, 1.0, 2.0, 4.0}) {
        BsvieMargin m = bsvie_margin(kgy, kgz1, kgz2, -0.2, lambda);
        CHECK(m.margin >= prev - 1e-12);
        prev = m.margin;
        // Contraction constant finite exactly when the margin is positive.
        CHECK((m.margin > 0.0) == std::isfinite(m.c_eta_lambda));
    }
}

TEST_CASE("control admissibility") {
    // All kernels constant(1): the x-clause is 1/rho + 1/sqrt(2 rho) <= 1.
    ControlKernels all1{Kernel::constant(1.0), Kernel::constant(1.0), Kernel::constant(1.0),
                        Kernel::constant(1.0)};
    double oracle = bisect_root(
        [](double rho) { return 1.0 / rho + 1.0 / std::sqrt(2.0 * rho) - 1.0; }, 0.1, 50.0);
    ControlAdmissibility a = control_admissible(all1, oracle + 0.1, 2.0 * (oracle + 0.1));
    CHECK(a.ok);
    CHECK(a.rho_star == doctest::Approx(oracle).epsilon(1e-8));

    // Caputo kernel set, L = 1, alpha = 0.75: rho_star = f_alpha^{-1}(1).
    double alpha = 0.75;
    double c = 1.0 / std::tgamma(alpha);
    ControlKernels cap{Kernel::fractional(alpha, c), Kernel::fractional(alpha, c),
                       Kernel::fractional(alpha, c), Kernel::fractional(alpha, c)};
    auto f_alpha = [&](double rho) {
        return std::pow(rho, -alpha) +
               std::sqrt(std::tgamma(2.0 * alpha - 1.0)) / std::tgamma(alpha) *
                   std::pow(2.0 * rho, -(alpha - 0.5));
    };
    double oracle_cap = bisect_root([&](double rho) { return f_alpha(rho) - 1.0; }, 0.5, 100.0);
    ControlAdmissibility ac = control_admissible(cap, oracle_cap * 1.2, 3.0 * oracle_cap);
    CHECK(ac.ok);
    CHECK(ac.rho_star == doctest::Approx(oracle_cap).epsilon(1e-8));

    // All-zero kernels: rho_star = 0; ok iff mu > 0 and lambda >= 2 mu.
    ControlKernels zeros{Kernel::zero(), Kernel::zero(), Kernel::zero(), Kernel::zero()};
    ControlAdmissibility az = control_admissible(zeros, 0.5, 1.0);
    CHECK(az.ok);
    CHECK(az.rho_star == 0.0);
    CHECK_FALSE(control_admissible(zeros, 0.0, 1.0).ok);
    ControlAdmissibility bad_lambda = control_admissible(zeros, 1.0, 1.5);
    CHECK_FALSE(bad_lambda.ok);
    CHECK(bad_lambda.failure == "lambda < 2*mu");
}

TEST_CASE("svie domain report") {
    DomainReport r = svie_domain_report(Kernel::zero(), Kernel::constant(1.0), 2.0);
    CHECK(r.rho_star == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(r.margin == doctest::Approx(0.5).epsilon(1e-13));
    CHECK(r.contraction == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.admissible);
}
