// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one pass/fail line per criterion. Exit code 0 iff all pass.

#include "volterra/control.hpp"
#include "volterra/io.hpp"
#include "volterra/linear.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

using namespace volterra;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    if (!pass) ++g_failures;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. Kernel calculus: closed form vs quadrature; critical weight vs oracle.
// ---------------------------------------------------------------------------
void criterion1() {
    double worst = 0.0;
    for (double alpha : {0.6, 0.75, 0.9}) {
        Kernel k = Kernel::fractional(alpha, 1.0 / std::tgamma(alpha));
        for (double rho : {0.5, 1.0, 2.0}) {
            double expected = std::pow(rho, -alpha);
            double quad = weighted_norm_quadrature(k, 1, rho);
            worst = std::max(worst, std::fabs(quad - expected) / expected);
        }
    }
    // Independent oracle: bisection on f1(rho) = 1/rho + 1/sqrt(2 rho) - 1.
    double lo = 0.05, hi = 100.0;
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        (1.0 / mid + 1.0 / std::sqrt(2.0 * mid) > 1.0 ? lo : hi) = mid;
    }
    double oracle = 0.5 * (lo + hi);
    double rho_star = critical_weight(Kernel::constant(1.0), Kernel::constant(1.0));
    double gap = std::fabs(rho_star - oracle);
    bool pass = worst <= 1e-8 && gap <= 1e-8;
    report(1, pass,
           "kernel norms: quadrature rel err " + fmt(worst) + " (<=1e-8); critical weight " +
               fmt(rho_star) + " vs oracle " + fmt(oracle) + ", gap " + fmt(gap) + " (<=1e-8)");
}

// ---------------------------------------------------------------------------
// 2. Trivial BSVIE exactness on an N = 8 tree for 20 randomized free terms.
// ---------------------------------------------------------------------------
void criterion2() {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    const int N = 8, P = ens.paths();
    std::mt19937 rng(2026);
    std::normal_distribution<double> nd;
    double worst_eq = 0.0, worst_m = 0.0, worst_ce = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        double a = nd(rng), b = nd(rng), c = nd(rng), e = nd(rng);
        int mid = 1 + rep % 7;
        auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            double wT = ens.wiener(p, N), wm = ens.wiener(p, mid);
            out[0] = a * std::exp(-0.2 * ens.grid().node(i)) + b * wT + c * wm * wT +
                     0.3 * e * wm * wm;
        });
        auto sol = solve_trivial(psi, ens);
        worst_eq = std::max(worst_eq, sol.equation_residual);
        worst_m = std::max(worst_m, sol.m_residual);
        // Independent conditional-expectation oracle by prefix matching.
        std::uniform_int_distribution<int> pick_node(1, N), pick_path(0, P - 1);
        for (int s = 0; s < 3; ++s) {
            int node = pick_node(rng), path = pick_path(rng);
            double sum = 0.0;
            int count = 0;
            for (int q = 0; q < P; ++q) {
                bool same = true;
                for (int j = 0; j < node && same; ++j) {
                    same = ens.increment(q, j) == ens.increment(path, j);
                }
                if (same) {
                    sum += psi.at(q, node)[0];
                    ++count;
                }
            }
            worst_ce = std::max(worst_ce, std::fabs(sol.Y.at(path, node)[0] - sum / count));
        }
    }
    bool pass = worst_eq < 1e-12 && worst_m < 1e-12 && worst_ce < 1e-12;
    report(2, pass,
           "trivial BSVIE (20 random psi): max equation residual " + fmt(worst_eq) +
               ", M-residual " + fmt(worst_m) + ", cond-exp oracle gap " + fmt(worst_ce) +
               " (all ~ machine eps)");
}

// ---------------------------------------------------------------------------
// 3. A priori estimate and Picard contraction for g = c y at several margins.
// ---------------------------------------------------------------------------
BsvieProblem linear_y_problem(const FilteredEnsemble& ens, double c, double lambda, double eta) {
    BsvieProblem p;
    p.m = 1;
    p.psi = AdaptedProcess::from_fn(ens, 1, [&](int path, int i, std::span<double> out) {
        out[0] = std::exp(-0.5 * ens.grid().node(i)) *
                 (1.0 + 0.5 * ens.wiener(path, ens.grid().N));
    });
    p.driver.eval = [c](int, int, int, std::span<const double> y, std::span<const double>,
                        std::span<const double>, std::span<double> out) { out[0] = c * y[0]; };
    p.driver.lip_y = Kernel::constant(c);
    p.driver.lip_z1 = p.driver.lip_z2 = Kernel::zero();
    p.driver.depends_z1 = p.driver.depends_z2 = false;
    p.lambda = lambda;
    p.eta = eta;
    return p;
}

void criterion3() {
    bool pass = true;
    std::string detail = "a priori estimate:";
    // Tree, N = 10; eta + lambda = 1, margin = 1 - c.
    {
        auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 10});
        for (double m : {0.25, 0.5, 0.75}) {
            BsvieProblem p = linear_y_problem(ens, 1.0 - m, 1.25, -0.25);
            BsvieOptions opts;
            if (m == 0.25) opts.plain_threshold = 0.02;  // exercise the continuation ladder
            auto sol = solve_bsvie(p, ens, opts);
            auto chk = apriori_check(sol, p, ens, 0.05);
            bool ratio_ok = true;
            for (const auto& lvl : sol.trace.levels) {
                if (lvl.measured_ratio > 0.0 && lvl.measured_ratio > 1.2 * lvl.theory_ratio) {
                    ratio_ok = false;
                }
            }
            pass = pass && chk.ok && ratio_ok;
            detail += " tree(m=" + fmt(m) + "," + sol.trace.mode + "):" +
                      fmt(chk.lhs / chk.rhs) + "<=1.05";
        }
    }
    // Monte Carlo, N = 64.
    {
        auto ens = FilteredEnsemble::montecarlo(TimeGrid{8.0, 64}, 1500, 19);
        for (double m : {0.3, 0.65}) {
            BsvieProblem p = linear_y_problem(ens, 1.0 - m, 1.25, -0.25);
            auto sol = solve_bsvie(p, ens);
            auto chk = apriori_check(sol, p, ens, 0.05);
            double theory = sol.trace.levels.empty() ? kInf
                                                     : sol.trace.levels[0].theory_ratio;
            double measured =
                sol.trace.levels.empty() ? 0.0 : sol.trace.levels[0].measured_ratio;
            pass = pass && chk.ok && measured <= 1.2 * theory;
            detail += " mc(m=" + fmt(m) + "):" + fmt(chk.lhs / chk.rhs) + "<=1.05,ratio " +
                      fmt(measured) + "<=" + fmt(1.2 * theory);
        }
    }
    report(3, pass, detail);
}

// ---------------------------------------------------------------------------
// 4. Finite-horizon convergence: truncation distance halves (at least) per
//    horizon doubling for psi(t) = e^{-t} W(t ^ 1).
// ---------------------------------------------------------------------------
void criterion4() {
    const double lambda = 1.0, eta = -0.5, c = 0.1;
    const double h = 0.5;
    std::vector<double> dist;
    for (double T : {4.0, 8.0, 16.0}) {
        int N = static_cast<int>(2.0 * T / h);
        auto ens = FilteredEnsemble::montecarlo(TimeGrid{2.0 * T, N}, 1500, 77);
        int idx1 = static_cast<int>(std::round(1.0 / h));
        RegressionBasis basis;
        basis.features.push_back(
            [&ens, idx1](int p, int node) { return ens.wiener(p, std::min(node, idx1)); });
        auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            double t = ens.grid().node(i);
            out[0] = std::exp(-t) * ens.wiener(p, std::min(i, idx1));
        });
        // psi is adapted here, so psi_T = psi 1_{[0,T]} exactly.
        auto psiT = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            out[0] = ens.grid().node(i) <= T + 1e-12 ? psi.at(p, i)[0] : 0.0;
        });
        BsvieProblem pfull;
        pfull.m = 1;
        pfull.psi = psi;
        pfull.driver.eval = [c](int, int, int, std::span<const double> y,
                                std::span<const double>, std::span<const double>,
                                std::span<double> out) { out[0] = c * y[0]; };
        pfull.driver.lip_y = Kernel::constant(c);
        pfull.driver.lip_z1 = pfull.driver.lip_z2 = Kernel::zero();
        pfull.driver.depends_z1 = pfull.driver.depends_z2 = false;
        pfull.lambda = lambda;
        pfull.eta = eta;
        pfull.basis = &basis;
        BsvieProblem ptrunc = pfull;
        ptrunc.psi = psiT;
        BsvieOptions opts;
        opts.tol = 1e-9;
        auto s1 = solve_bsvie(pfull, ens, opts);
        auto s2 = solve_bsvie(ptrunc, ens, opts);
        AdaptedProcess dy = s1.Y;
        for (std::size_t k = 0; k < dy.v.size(); ++k) dy.v[k] -= s2.Y.v[k];
        TwoParameterProcess dz = s1.Z;
        for (std::size_t k = 0; k < dz.v.size(); ++k) dz.v[k] -= s2.Z.v[k];
        dist.push_back(msolution_norm(ens, dy, dz, eta));
        // Tail bound: distance <= C_{eta,lambda} ||psi - psi_T||_{2,eta}.
        AdaptedProcess tail = psi;
        for (std::size_t k = 0; k < tail.v.size(); ++k) tail.v[k] -= psiT.v[k];
        double cconst = bsvie_margin(pfull.driver.lip_y, Kernel::zero(), Kernel::zero(), eta,
                                     lambda)
                            .c_eta_lambda;
        if (dist.back() > 1.2 * cconst * weighted_sq_norm(ens, tail, eta)) {
            report(4, false, "tail bound violated at T = " + fmt(T));
            return;
        }
    }
    double r1 = dist[0] / dist[1], r2 = dist[1] / dist[2];
    bool pass = r1 >= 2.0 && r2 >= 2.0;
    report(4, pass,
           "finite-horizon truncation distances " + fmt(dist[0]) + " -> " + fmt(dist[1]) +
               " -> " + fmt(dist[2]) + " (each within C*tail); decay factors " + fmt(r1) +
               ", " + fmt(r2) + " (>= 2 per doubling)");
}

// ---------------------------------------------------------------------------
// 5. Variation of constants: deterministic closed form and stochastic order.
// ---------------------------------------------------------------------------
LinearBsvieSpec voc_spec(double a_rate, double a_scale, double b_scale, double lambda,
                         double eta) {
    LinearBsvieSpec s;
    s.m = 1;
    s.A = [a_rate, a_scale](double t, double sarg, int, std::span<double> out) {
        out[0] = a_scale * std::exp(-a_rate * (sarg - t));
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

void criterion5() {
    // Deterministic: A = a, B = 0, psi = 1.
    const double a = 0.5, lambda = 1.0;
    double worst_rel = 0.0;
    bool det_ok = true;
    for (int N : {8, 12}) {
        auto ens = FilteredEnsemble::tree(TimeGrid{1.0, N});
        auto spec = voc_spec(0.0, a, 0.0, lambda, 0.0);
        auto psi = AdaptedProcess::constant(ens, std::vector<double>{1.0});
        auto voc = variation_of_constants(spec, psi, ens);
        double h = ens.grid().h();
        for (int i = 0; i <= N; ++i) {
            double tau = 1.0 - ens.grid().node(i);
            double expected = 1.0 + a * (std::exp((a - lambda) * tau) - 1.0) / (a - lambda);
            double err = std::fabs(voc.Y.at(0, i)[0] - expected);
            worst_rel = std::max(worst_rel, err / (3.0 * h));
            det_ok = det_ok && err <= 3.0 * h;
        }
    }
    // Stochastic: gap to solve_bsvie at h in {1/8, 1/16, 1/32}.
    std::vector<double> gaps;
    bool bound_ok = true;
    for (int N : {3, 6, 12}) {
        auto ens = FilteredEnsemble::tree(TimeGrid{0.375, N});
        auto spec = voc_spec(0.5, 0.45, 0.4, 1.0, 0.0);
        auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
            out[0] = 1.0 + 0.5 * ens.wiener(p, N) - 0.1 * ens.grid().node(i);
        });
        auto voc = variation_of_constants(spec, psi, ens, true);
        bound_ok = bound_ok &&
                   voc.gap <= 5.0 * std::sqrt(ens.grid().h()) * weighted_sq_norm(ens, psi, 0.0);
        gaps.push_back(voc.gap);
    }
    double o1 = std::log2(gaps[0] / gaps[1]), o2 = std::log2(gaps[1] / gaps[2]);
    bool pass = det_ok && bound_ok && o1 >= 0.8 && o2 >= 0.8;
    report(5, pass,
           "variation of constants: closed-form err/(3h) " + fmt(worst_rel) +
               " (<=1); stochastic gap orders " + fmt(o1) + ", " + fmt(o2) + " (>= 0.8)");
}

// ---------------------------------------------------------------------------
// 6. Duality principle: exact tower case and O(h) decay for a random family.
// ---------------------------------------------------------------------------
void criterion6() {
    const double mu = 1.2, eta = 0.0, lambda = 1.5;
    // Exact case C = D = 0.
    auto ens0 = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    LinearSvieSpec zero;
    zero.n = 1;
    zero.C_zero = zero.D_zero = true;
    zero.KC = Kernel::zero();
    zero.KD = Kernel::zero();
    auto phi0 = AdaptedProcess::from_fn(ens0, 1, [&](int p, int i, std::span<double> out) {
        out[0] = 1.0 + 0.3 * ens0.wiener(p, i);
    });
    auto psi0 = AdaptedProcess::from_fn(ens0, 1, [&](int p, int, std::span<double> out) {
        out[0] = 0.7 + ens0.wiener(p, 8);
    });
    double exact_gap = duality_check(zero, phi0, psi0, mu, eta, lambda, ens0).gap;

    // Randomized scalar family: measured order >= 0.8 over three refinements.
    std::mt19937 rng(41);
    std::uniform_real_distribution<double> unif(0.2, 0.5);
    bool orders_ok = true;
    double worst_order = kInf;
    for (int rep = 0; rep < 2; ++rep) {
        double c0 = unif(rng), d0 = unif(rng), pb = unif(rng), qb = unif(rng);
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
                out[0] = 1.0 + pb * ens.wiener(p, i);
            });
            auto psi = AdaptedProcess::from_fn(ens, 1, [&](int p, int i, std::span<double> out) {
                out[0] = 0.5 + qb * ens.wiener(p, N) + 0.1 * ens.grid().node(i);
            });
            gaps.push_back(duality_check(fwd, phi, psi, mu, eta, lambda, ens).gap);
        }
        double o1 = std::log2(gaps[0] / gaps[1]), o2 = std::log2(gaps[1] / gaps[2]);
        worst_order = std::min({worst_order, o1, o2});
        orders_ok = orders_ok && o1 >= 0.8 && o2 >= 0.8;
    }
    bool pass = exact_gap <= 1e-12 && orders_ok;
    report(6, pass,
           "duality: exact-case gap " + fmt(exact_gap) + " (<=1e-12); worst measured order " +
               fmt(worst_order) + " (>= 0.8)");
}

// ---------------------------------------------------------------------------
// 7. BSDE reduction: closed form for Y = 1 and O(h^{>=0.8}) residual decay.
// ---------------------------------------------------------------------------
void criterion7() {
    const double lambda = 1.5, mu = 0.6;
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 10});
    auto sol = solve_trivial(AdaptedProcess::constant(ens, std::vector<double>{1.0}), ens);
    auto red = bsvie_to_bsde(sol, lambda, mu, ens);
    double h = ens.grid().h();
    double worst = 0.0;
    for (int i = 0; i <= 10; ++i) {
        double expected = (1.0 - std::exp(-lambda * (1.0 - ens.grid().node(i)))) / lambda;
        worst = std::max(worst, std::fabs(red.cY.at(0, i)[0] - expected));
    }
    std::vector<double> norms;
    for (int N : {3, 6, 12}) {
        auto e = FilteredEnsemble::tree(TimeGrid{0.75, N});
        auto psi = AdaptedProcess::from_fn(e, 1, [&](int p, int i, std::span<double> out) {
            out[0] = e.wiener(p, i);
        });
        auto s = solve_trivial(psi, e);
        norms.push_back(bsvie_to_bsde(s, lambda, mu, e).residual_norm);
    }
    double o1 = std::log2(norms[0] / norms[1]), o2 = std::log2(norms[1] / norms[2]);
    bool pass = worst <= 2.0 * h && o1 >= 0.8 && o2 >= 0.8;
    report(7, pass,
           "BSDE reduction: closed-form err " + fmt(worst) + " (<= 2h = " + fmt(2.0 * h) +
               "); residual orders " + fmt(o1) + ", " + fmt(o2) + " (>= 0.8)");
}

// ---------------------------------------------------------------------------
// 8. Control gradient: adjoint pairing vs central differences of J_lambda.
// ---------------------------------------------------------------------------
AdaptedProcess direction(const FilteredEnsemble& ens, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> nd;
    double a = nd(rng), b = nd(rng), c = nd(rng);
    return AdaptedProcess::from_fn(ens, 1, [&, a, b, c](int p, int i, std::span<double> out) {
        out[0] = a + b * ens.wiener(p, i) + c * ens.grid().node(i);
    });
}

double gradient_pairing(const FilteredEnsemble& ens, double lambda, const AdaptedProcess& G,
                        const AdaptedProcess& du) {
    double acc = 0.0;
    const double h = ens.grid().h();
    for (int i = 0; i < ens.grid().N; ++i) {
        double w = std::exp(-lambda * ens.grid().node(i)) * h;
        double s = 0.0;
        for (int path = 0; path < ens.paths(); ++path) {
            s += G.at(path, i)[0] * du.at(path, i)[0];
        }
        acc += w * s / ens.paths();
    }
    return acc;
}

double check_gradient(const ControlProblem& p, const FilteredEnsemble& ens, unsigned seed0) {
    auto u = direction(ens, seed0);
    auto rep = stationarity_residual(p, u, ens);
    double worst = 0.0;
    for (unsigned k = 0; k < 5; ++k) {
        auto du = direction(ens, seed0 + 10 + k);
        double lhs = gradient_pairing(ens, p.lambda, rep.G, du);
        AdaptedProcess up = u, um = u;
        const double eps = 1e-4;
        for (std::size_t c = 0; c < u.v.size(); ++c) {
            up.v[c] += eps * du.v[c];
            um.v[c] -= eps * du.v[c];
        }
        double rhs = (control_cost(p, up, ens) - control_cost(p, um, ens)) / (2.0 * eps);
        worst = std::max(worst, std::fabs(lhs - rhs) / std::max(1.0, std::fabs(rhs)));
    }
    return worst;
}

void criterion8() {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    LqSpec lq;
    lq.A = Kernel::exponential(0.5, 0.3);
    lq.B = Kernel::constant(0.5);
    lq.C = Kernel::constant(0.25);
    lq.D = Kernel::constant(0.3);
    lq.m1 = 1.0;
    lq.m2 = 0.8;
    lq.m3 = 0.2;
    lq.mu = 1.0;
    lq.lambda = 2.0;
    double lq_err = check_gradient(make_lq_problem(lq, ens), ens, 500);

    CaputoSpec cs;
    cs.alpha = 0.75;
    cs.bx = 0.4;
    cs.bu = 0.6;
    cs.sx = 0.3;
    cs.su = 0.2;
    cs.m1 = 1.0;
    cs.m2 = 1.0;
    cs.lambda = 9.0;
    double cap_err = check_gradient(make_caputo_problem(cs, ens), ens, 700);

    bool pass = lq_err <= 1e-3 && cap_err <= 1e-3;
    report(8, pass,
           "control gradient vs finite differences: LQ rel err " + fmt(lq_err) +
               ", Caputo(0.75) rel err " + fmt(cap_err) + " (<= 1e-3, 5 directions each)");
}

// ---------------------------------------------------------------------------
// 9. LQ optimality: residual, monotone trace, node-wise condition, sufficiency.
// ---------------------------------------------------------------------------
void criterion9() {
    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    const int N = 8, P = ens.paths();
    const double h = ens.grid().h();
    LqSpec s;
    s.B = Kernel::constant(0.6);
    s.D = Kernel::constant(0.2);
    s.m1 = 1.0;
    s.m2 = 1.0;
    s.m3 = 0.0;
    s.x0 = 1.0;
    s.mu = 0.9;
    s.lambda = 2.0;
    auto p = make_lq_problem(s, ens);
    OptimizeOptions opts;
    opts.tol = 1e-8;
    opts.max_iters = 4000;
    auto res = optimize(p, AdaptedProcess::zeros(ens, 1), ens, opts);

    bool monotone = true;
    for (std::size_t k = 1; k < res.trace.size(); ++k) {
        monotone = monotone && res.trace[k].J <= res.trace[k - 1].J + 1e-12;
    }

    // Node-wise optimality condition of the LQ example, recomputed directly
    // from the adjoint solution with the scheme-consistent quadrature.
    auto X = solve_state(p, res.u, ens);
    auto adj = adjoint_solve(p, res.u, X, ens);
    double node_worst = 0.0;
    std::vector<double> yrow(P), cond(P);
    AdaptedProcess lhs = AdaptedProcess::zeros(ens, 1);
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i < N; ++i) {
            lhs.at(path, i)[0] =
                s.m2 * res.u.at(path, i)[0] + s.m3 * X.at(path, i)[0];
        }
    }
    for (int j = 1; j <= N; ++j) {
        for (int path = 0; path < P; ++path) yrow[path] = adj.Y.at(path, j)[0];
        for (int i = 0; i < j; ++i) {
            double tau = ens.grid().node(j) - ens.grid().node(i);
            ens.cond_expect(yrow, 1, i, cond);
            double disc = std::exp(-s.lambda * tau) * h;
            for (int path = 0; path < P; ++path) {
                lhs.at(path, i)[0] += disc * (s.B.eval(tau) * cond[path] +
                                              s.D.eval(tau) * adj.Z.at(path, j, i)[0]);
            }
        }
    }
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i < N; ++i) {
            node_worst = std::max(node_worst, std::fabs(lhs.at(path, i)[0]));
        }
    }

    // Sufficiency witness: 10 random feasible perturbations at eps = 1e-2.
    bool sufficiency = true;
    double Jstar = res.report.J;
    std::mt19937 rng(99);
    for (unsigned k = 0; k < 10; ++k) {
        auto dir = direction(ens, 900 + k);
        AdaptedProcess u = res.u;
        for (std::size_t c = 0; c < u.v.size(); ++c) u.v[c] += 1e-2 * dir.v[c];
        sufficiency = sufficiency && control_cost(p, u, ens) >= Jstar - 1e-8;
    }

    bool pass = res.status == "converged" && res.report.r < 1e-6 && monotone &&
                node_worst <= 1e-6 && sufficiency;
    report(9, pass,
           "LQ optimality: r = " + fmt(res.report.r) + " (<1e-6), monotone trace " +
               std::string(monotone ? "yes" : "NO") + ", node-wise condition " +
               fmt(node_worst) + " (<=1e-6), sufficiency " +
               std::string(sufficiency ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------
// 10. Integro-differential lift: expanded condition identity and
//     anticipated-BSDE residual decay.
// ---------------------------------------------------------------------------
void criterion10() {
    IntegroSpec spec;
    spec.x0 = 1.0;
    spec.bx = 0.15;
    spec.bu = 0.5;
    spec.sx = 0.1;
    spec.b1 = 0.1;
    spec.b2 = 0.15;
    spec.s3 = 0.1;
    spec.s4 = 0.05;
    spec.A1 = Kernel::exponential(1.2, 0.1);
    spec.A2 = Kernel::exponential(1.0, 0.3);
    spec.A3 = Kernel::exponential(0.8, 0.1);
    spec.A4 = Kernel::exponential(1.5, 0.2);
    spec.m1 = 1.0;
    spec.m2 = 1.0;
    spec.m3 = 0.1;
    spec.mu = 0.8;
    spec.lambda = 1.6;

    auto ens = FilteredEnsemble::tree(TimeGrid{1.0, 8});
    auto lifted = integro_lift(spec, ens);
    auto u = direction(ens, 1234);
    auto rep = stationarity_residual(lifted.problem, u, ens);
    auto expanded = integro_expanded_condition(lifted, u, ens);
    double ident = 0.0;
    for (int path = 0; path < ens.paths(); ++path) {
        for (int i = 0; i < 8; ++i) {
            ident = std::max(ident,
                             std::fabs(rep.G.at(path, i)[0] - expanded.at(path, i)[0]));
        }
    }

    std::vector<double> norms;
    for (int N : {3, 6, 12}) {
        auto e = FilteredEnsemble::tree(TimeGrid{0.75, N});
        auto lf = integro_lift(spec, e);
        auto uu = AdaptedProcess::constant(e, std::vector<double>{0.3});
        norms.push_back(verify_anticipated_bsde(lf, uu, e).residual_norm);
    }
    double o1 = std::log2(norms[0] / norms[1]), o2 = std::log2(norms[1] / norms[2]);
    bool pass = ident <= 1e-12 && o1 >= 0.8 && o2 >= 0.8;
    report(10, pass,
           "integro lift: stationarity vs expanded condition " + fmt(ident) +
               " (machine); anticipated-BSDE residual orders " + fmt(o1) + ", " + fmt(o2) +
               " (>= 0.8)");
}

}  // namespace

int main() {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criterion6();
    criterion7();
    criterion8();
    criterion9();
    criterion10();
    if (g_failures == 0) {
        std::printf("acceptance: all 10 criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criteria FAILED\n", g_failures);
    return 1;
}
