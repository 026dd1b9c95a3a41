#include "volterra/svie.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace volterra {

namespace {

void check_lipschitz_envelope(const SvieCoeff& c, int out_dim, int n, int ell,
                              const TimeGrid& grid) {
    if (c.zero) return;
    // Spot-check |f(t,s,x) - f(t,s,x')| <= K(t-s)|x - x'| on random triples,
    // sampled at lags tau >= h (away from a possible diagonal singularity).
    std::mt19937 rng(2024);
    std::uniform_real_distribution<double> ux(-1.5, 1.5);
    std::uniform_int_distribution<int> node(1, grid.N);
    std::vector<double> x(n), xp(n), u(ell, 0.0), f(out_dim), fp(out_dim);
    for (int trial = 0; trial < 8; ++trial) {
        int i = node(rng);
        int j = std::uniform_int_distribution<int>(0, i - 1)(rng);
        double t = grid.node(i), s = grid.node(j);
        for (int k = 0; k < n; ++k) {
            x[k] = ux(rng);
            xp[k] = ux(rng);
        }
        for (int k = 0; k < ell; ++k) u[k] = ux(rng);
        if (c.factored()) {
            c.eval_reduced(s, 0, x, u, f);
            c.eval_reduced(s, 0, xp, u, fp);
            double fac = c.factor->eval(t - s);
            for (int k = 0; k < out_dim; ++k) {
                f[k] *= fac;
                fp[k] *= fac;
            }
        } else {
            c.eval(t, s, 0, x, u, f);
            c.eval(t, s, 0, xp, u, fp);
        }
        double df = 0.0, dx = 0.0;
        for (int k = 0; k < out_dim; ++k) df += (f[k] - fp[k]) * (f[k] - fp[k]);
        for (int k = 0; k < n; ++k) dx += (x[k] - xp[k]) * (x[k] - xp[k]);
        double bound = c.lip_x.eval(t - s) * std::sqrt(dx);
        if (std::sqrt(df) > bound * (1.0 + 1e-8) + 1e-12) {
            throw std::invalid_argument(
                "coefficient violates its declared Lipschitz envelope at tau = " +
                std::to_string(t - s));
        }
    }
}

}  // namespace

std::vector<double> product_weights(const SvieCoeff& c, const TimeGrid& grid) {
    // W[i * N + j] for j < i. Factored: int_{s_j}^{s_{j+1}} K(t_i - r) dr,
    // computed as the cell integral of K over [t_i - s_{j+1}, t_i - s_j].
    const int N = grid.N;
    std::vector<double> w(static_cast<std::size_t>(N + 1) * N, 0.0);
    const double h = grid.h();
    for (int i = 1; i <= N; ++i) {
        for (int j = 0; j < i; ++j) {
            if (c.factored()) {
                // Convolution kernel: the weight depends only on the lag i-j.
                double a = (i - j - 1) * h, b = (i - j) * h;
                w[static_cast<std::size_t>(i) * N + j] = c.factor->cell_integral(a, b);
            } else {
                w[static_cast<std::size_t>(i) * N + j] = h;
            }
        }
    }
    return w;
}

AdaptedProcess solve_svie(const SvieProblem& p, const FilteredEnsemble& ens,
                          SvieDiagnostics* diag) {
    const TimeGrid& grid = ens.grid();
    const int N = grid.N;
    const int d = ens.dims();
    const int n = p.n;
    const double h = grid.h();
    const int ell = p.control ? p.control->dim : 1;

    // Admissibility of the declared envelopes at the registered weight.
    double margin = 1.0 - weighted_norm(p.drift.lip_x, 1, p.mu) -
                    weighted_norm(p.diffusion.lip_x, 2, p.mu);
    if (diag) diag->margin = margin;
    if (!p.skip_admissibility_check && !(margin > 0.0)) {
        throw std::runtime_error("solve_svie: inadmissible envelopes at mu, margin = " +
                                 std::to_string(margin));
    }
    if (p.control && !p.skip_admissibility_check) {
        double unorm = weighted_norm(p.drift.lip_u, 1, p.mu) +
                       weighted_norm(p.diffusion.lip_u, 2, p.mu);
        if (!std::isfinite(unorm)) {
            throw std::runtime_error("solve_svie: control envelope norms diverge at mu");
        }
    }
    if (!p.skip_lipschitz_check) {
        check_lipschitz_envelope(p.drift, n, n, ell, grid);
        check_lipschitz_envelope(p.diffusion, n * d, n, ell, grid);
    }
    if (diag) {
        diag->plain_weight_warning = (!p.drift.zero && !p.drift.factored()) ||
                                     (!p.diffusion.zero && !p.diffusion.factored());
    }

    auto wb = product_weights(p.drift, grid);
    auto ws = product_weights(p.diffusion, grid);

    AdaptedProcess X = AdaptedProcess::zeros(ens, n);
    // Each path's recursion is independent; workers write disjoint slices.
    parallel_for_paths(ens.paths(), [&](int pbegin, int pend) {
    std::vector<double> bval(n), sval(static_cast<std::size_t>(n) * d);
    std::vector<double> uzero(ell, 0.0);
    for (int path = pbegin; path < pend; ++path) {
        for (int i = 0; i <= N; ++i) {
            auto xi = X.at(path, i);
            auto phi = p.phi.at(path, i);
            for (int c = 0; c < n; ++c) xi[c] = phi[c];
            for (int j = 0; j < i; ++j) {
                auto xj = X.at(path, j);
                std::span<const double> uj =
                    p.control ? p.control->at(path, j) : std::span<const double>(uzero);
                double t = grid.node(i), s = grid.node(j);
                if (!p.drift.zero) {
                    double w = wb[static_cast<std::size_t>(i) * N + j];
                    if (p.drift.factored()) {
                        p.drift.eval_reduced(s, path, xj, uj, bval);
                    } else {
                        p.drift.eval(t, s, path, xj, uj, bval);
                    }
                    for (int c = 0; c < n; ++c) xi[c] += w * bval[c];
                }
                if (!p.diffusion.zero) {
                    double w = ws[static_cast<std::size_t>(i) * N + j] / h;
                    if (p.diffusion.factored()) {
                        p.diffusion.eval_reduced(s, path, xj, uj, sval);
                    } else {
                        p.diffusion.eval(t, s, path, xj, uj, sval);
                    }
                    for (int k = 0; k < d; ++k) {
                        double dw = ens.increment(path, j, k);
                        for (int c = 0; c < n; ++c) {
                            xi[c] += w * sval[static_cast<std::size_t>(c) * d + k] * dw;
                        }
                    }
                }
            }
            for (int c = 0; c < n; ++c) {
                if (!std::isfinite(xi[c])) {
                    throw std::runtime_error("solve_svie: NaN/inf at node " + std::to_string(i));
                }
            }
        }
    }
    });
    return X;
}

StabilityGap stability_gap(const SvieProblem& p, const SvieProblem& pp,
                           const FilteredEnsemble& ens, double eps_tol) {
    const TimeGrid& grid = ens.grid();
    const int N = grid.N;
    const int d = ens.dims();
    const int n = p.n;
    const double h = grid.h();
    const int ell = p.control ? p.control->dim : 1;

    AdaptedProcess X = solve_svie(p, ens);
    AdaptedProcess Xp = solve_svie(pp, ens);

    AdaptedProcess diff = AdaptedProcess::zeros(ens, n);
    for (int path = 0; path < ens.paths(); ++path) {
        for (int i = 0; i <= N; ++i) {
            auto a = X.at(path, i);
            auto b = Xp.at(path, i);
            auto o = diff.at(path, i);
            for (int c = 0; c < n; ++c) o[c] = a[c] - b[c];
        }
    }
    double lhs = weighted_sq_norm(ens, diff, -p.mu);

    // Perturbation free term: phi - phi' + int (b - b')(t,s,X'(s)) ds
    //                                  + int (sigma - sigma')(t,s,X'(s)) dW.
    auto eval_coeff = [&](const SvieCoeff& c, int out_dim, int i, int j, int path,
                          std::span<const double> x, std::span<const double> u,
                          std::span<double> out, const std::vector<double>& w) {
        if (c.zero) {
            for (int k = 0; k < out_dim; ++k) out[k] = 0.0;
            return 0.0;
        }
        if (c.factored()) {
            c.eval_reduced(grid.node(j), path, x, u, out);
        } else {
            c.eval(grid.node(i), grid.node(j), path, x, u, out);
        }
        return w[static_cast<std::size_t>(i) * N + j];
    };
    auto wb = product_weights(p.drift, grid);
    auto wbp = product_weights(pp.drift, grid);
    auto ws = product_weights(p.diffusion, grid);
    auto wsp = product_weights(pp.diffusion, grid);

    AdaptedProcess pert = AdaptedProcess::zeros(ens, n);
    std::vector<double> b1(n), b2(n), s1(static_cast<std::size_t>(n) * d),
        s2(static_cast<std::size_t>(n) * d), uzero(ell, 0.0);
    for (int path = 0; path < ens.paths(); ++path) {
        for (int i = 0; i <= N; ++i) {
            auto o = pert.at(path, i);
            auto phi = p.phi.at(path, i);
            auto phip = pp.phi.at(path, i);
            for (int c = 0; c < n; ++c) o[c] = phi[c] - phip[c];
            for (int j = 0; j < i; ++j) {
                auto xj = Xp.at(path, j);
                std::span<const double> uj =
                    p.control ? p.control->at(path, j) : std::span<const double>(uzero);
                double w1 = eval_coeff(p.drift, n, i, j, path, xj, uj, b1, wb);
                double w2 = eval_coeff(pp.drift, n, i, j, path, xj, uj, b2, wbp);
                for (int c = 0; c < n; ++c) o[c] += w1 * b1[c] - w2 * b2[c];
                double v1 = eval_coeff(p.diffusion, n * d, i, j, path, xj, uj, s1, ws) / h;
                double v2 = eval_coeff(pp.diffusion, n * d, i, j, path, xj, uj, s2, wsp) / h;
                for (int k = 0; k < d; ++k) {
                    double dw = ens.increment(path, j, k);
                    for (int c = 0; c < n; ++c) {
                        o[c] += (v1 * s1[static_cast<std::size_t>(c) * d + k] -
                                 v2 * s2[static_cast<std::size_t>(c) * d + k]) *
                                dw;
                    }
                }
            }
        }
    }
    double margin = 1.0 - weighted_norm(p.drift.lip_x, 1, p.mu) -
                    weighted_norm(p.diffusion.lip_x, 2, p.mu);
    double cmu = 1.0 / margin;
    StabilityGap g;
    g.lhs = lhs;
    g.rhs = cmu * weighted_sq_norm(ens, pert, -p.mu);
    g.ok = g.lhs <= g.rhs * (1.0 + eps_tol) + 1e-14;
    return g;
}

}  // namespace volterra
