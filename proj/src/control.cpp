#include "volterra/control.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace volterra {

namespace {

SvieCoeff wrap_coeff(const ControlCoeff& c, const Kernel& lip_x, const Kernel& lip_u) {
    SvieCoeff s;
    s.zero = c.zero;
    s.factor = c.factor;
    s.eval = c.eval;
    s.eval_reduced = c.eval_reduced;
    s.lip_x = lip_x;
    s.lip_u = lip_u;
    return s;
}

/// Transposed product-integration weight (relative to the plain step h)
/// coupling a backward row at t_i to a forward node at lag tau = s_j - t_i.
/// The forward scheme has no diagonal term, so the lag-0 weight vanishes.
double transposed_weight(const ControlCoeff& c, double tau, double h) {
    if (tau < 0.5 * h) return 0.0;
    if (c.factor) return c.factor->cell_integral(tau - h, tau) / h;
    return 1.0;
}

}  // namespace

ControlAdmissibility require_admissible(const ControlProblem& p) {
    ControlAdmissibility a = p.admissibility
                                 ? p.admissibility(p.mu, p.lambda)
                                 : control_admissible(p.kernels, p.mu, p.lambda);
    if (!a.ok) {
        throw std::runtime_error("control problem inadmissible: " +
                                 (a.failure.empty() ? std::string("unknown clause") : a.failure));
    }
    return a;
}

AdaptedProcess solve_state(const ControlProblem& p, const AdaptedProcess& u,
                           const FilteredEnsemble& ens) {
    require_admissible(p);
    SvieProblem sp;
    sp.n = p.n;
    sp.phi = p.phi;
    sp.drift = wrap_coeff(p.drift, p.kernels.b_x, p.kernels.b_u);
    sp.diffusion = wrap_coeff(p.diffusion, p.kernels.sigma_x, p.kernels.sigma_u);
    sp.control = &u;
    sp.mu = p.mu;
    sp.skip_lipschitz_check = true;
    sp.skip_admissibility_check = true;  // gated by require_admissible above
    return solve_svie(sp, ens);
}

double control_cost(const ControlProblem& p, const AdaptedProcess& u, const FilteredEnsemble& ens,
                    AdaptedProcess* state_out) {
    AdaptedProcess X = solve_state(p, u, ens);
    const int N = ens.grid().N;
    const double h = ens.grid().h();
    double J = 0.0;
    for (int i = 0; i < N; ++i) {
        double w = std::exp(-p.lambda * ens.grid().node(i)) * h;
        double s = 0.0;
        for (int path = 0; path < ens.paths(); ++path) {
            s += p.cost.eval(ens.grid().node(i), X.at(path, i), u.at(path, i));
        }
        J += w * s / ens.paths();
    }
    if (state_out) *state_out = std::move(X);
    return J;
}

MSolution adjoint_solve(const ControlProblem& p, const AdaptedProcess& u,
                        const AdaptedProcess& X, const FilteredEnsemble& ens) {
    const int N = ens.grid().N;
    const int n = p.n;
    const int d = ens.dims();
    const double h = ens.grid().h();

    BsvieProblem bp;
    bp.m = n;
    bp.lambda = p.lambda;
    bp.eta = -p.mu;
    bp.basis = p.basis;
    // Free term h_x along (X, u); node N carries no cost mass.
    bp.psi = AdaptedProcess::from_fn(ens, n, [&](int path, int i, std::span<double> out) {
        if (i == N) {
            std::fill(out.begin(), out.end(), 0.0);
            return;
        }
        p.cost.dx(ens.grid().node(i), X.at(path, i), u.at(path, i), out);
    });

    const bool has_bx = !p.drift.zero && !p.drift.dx_zero;
    const bool has_sx = !p.diffusion.zero && !p.diffusion.dx_zero;
    const ControlProblem* pp = &p;
    const AdaptedProcess* Xp = &X;
    const AdaptedProcess* up = &u;
    const FilteredEnsemble* ep = &ens;
    bp.driver.eval = [pp, Xp, up, ep, n, d, h, has_bx, has_sx](
                         int i, int j, int path, std::span<const double> y,
                         std::span<const double>, std::span<const double> z2,
                         std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        if (j <= i) return;  // exact transpose of the strictly-lower forward scheme
        double ti = ep->grid().node(i), tj = ep->grid().node(j);
        double tau = tj - ti;
        auto x = Xp->at(path, i);
        auto uu = up->at(path, i);
        if (has_bx) {
            double w = transposed_weight(pp->drift, tau, h);
            if (w != 0.0) {
                std::vector<double> dxb(static_cast<std::size_t>(n) * n);
                if (pp->drift.factor) {
                    pp->drift.dx_reduced(ti, path, x, uu, dxb);
                } else {
                    pp->drift.dx(tj, ti, path, x, uu, dxb);
                }
                for (int r = 0; r < n; ++r) {
                    double acc = 0.0;
                    for (int c = 0; c < n; ++c) acc += dxb[static_cast<std::size_t>(c) * n + r] * y[c];
                    out[r] += w * acc;
                }
            }
        }
        if (has_sx) {
            double w = transposed_weight(pp->diffusion, tau, h);
            if (w != 0.0) {
                std::vector<double> dxs(static_cast<std::size_t>(d) * n * n);
                if (pp->diffusion.factor) {
                    pp->diffusion.dx_reduced(ti, path, x, uu, dxs);
                } else {
                    pp->diffusion.dx(tj, ti, path, x, uu, dxs);
                }
                for (int k = 0; k < d; ++k) {
                    const double* blk = dxs.data() + static_cast<std::size_t>(k) * n * n;
                    for (int r = 0; r < n; ++r) {
                        double acc = 0.0;
                        for (int c = 0; c < n; ++c) {
                            acc += blk[static_cast<std::size_t>(c) * n + r] * z2[c * d + k];
                        }
                        out[r] += w * acc;
                    }
                }
            }
        }
    };
    bp.driver.lip_y = p.kernels.b_x;
    bp.driver.lip_z1 = Kernel::zero();
    bp.driver.lip_z2 = p.kernels.sigma_x;
    bp.driver.depends_y = has_bx;
    bp.driver.depends_z1 = false;
    bp.driver.depends_z2 = has_sx;
    bp.driver.zero = !has_bx && !has_sx;
    if (p.adjoint_margin) bp.margin_override = p.adjoint_margin(bp.eta, bp.lambda);
    return solve_bsvie(bp, ens);
}

OptimalityReport stationarity_residual(const ControlProblem& p, const AdaptedProcess& u,
                                       const FilteredEnsemble& ens) {
    const int N = ens.grid().N;
    const int n = p.n;
    const int ell = p.ell;
    const int d = ens.dims();
    const int P = ens.paths();
    const double h = ens.grid().h();

    OptimalityReport rep;
    AdaptedProcess X;
    rep.J = control_cost(p, u, ens, &X);
    MSolution adj = adjoint_solve(p, u, X, ens);
    rep.adjoint_equation_residual = adj.equation_residual;
    rep.adjoint_m_residual = adj.m_residual;
    rep.convexity_certificate = p.convexity_certificate;

    rep.G = AdaptedProcess::zeros(ens, ell);
    const bool has_bu = !p.drift.zero && !p.drift.du_zero;
    const bool has_su = !p.diffusion.zero && !p.diffusion.du_zero;
    std::vector<double> yrow(static_cast<std::size_t>(P) * n);
    std::vector<double> condY(static_cast<std::size_t>(P) * n);
    std::vector<double> dub(static_cast<std::size_t>(n) * ell);
    std::vector<double> dus(static_cast<std::size_t>(d) * n * ell);
    for (int j = 1; j <= N; ++j) {
        for (int path = 0; path < P; ++path) {
            std::memcpy(yrow.data() + static_cast<std::size_t>(path) * n,
                        adj.Y.at(path, j).data(), sizeof(double) * n);
        }
        double tj = ens.grid().node(j);
        for (int i = 0; i < j; ++i) {
            double ti = ens.grid().node(i);
            double tau = tj - ti;
            double disc = std::exp(-p.lambda * tau) * h;
            bool need_cond = has_bu;
            if (need_cond) ens.cond_expect(yrow, n, i, condY, p.basis, nullptr);
            double wb = has_bu ? transposed_weight(p.drift, tau, h) : 0.0;
            double ws = has_su ? transposed_weight(p.diffusion, tau, h) : 0.0;
            if (wb == 0.0 && ws == 0.0) continue;
            for (int path = 0; path < P; ++path) {
                auto g = rep.G.at(path, i);
                auto x = X.at(path, i);
                auto uu = u.at(path, i);
                if (wb != 0.0) {
                    if (p.drift.factor) {
                        p.drift.du_reduced(ti, path, x, uu, dub);
                    } else {
                        p.drift.du(tj, ti, path, x, uu, dub);
                    }
                    for (int c = 0; c < ell; ++c) {
                        double acc = 0.0;
                        for (int r = 0; r < n; ++r) {
                            acc += dub[static_cast<std::size_t>(r) * ell + c] *
                                   condY[static_cast<std::size_t>(path) * n + r];
                        }
                        g[c] += disc * wb * acc;
                    }
                }
                if (ws != 0.0) {
                    if (p.diffusion.factor) {
                        p.diffusion.du_reduced(ti, path, x, uu, dus);
                    } else {
                        p.diffusion.du(tj, ti, path, x, uu, dus);
                    }
                    auto z = adj.Z.at(path, j, i);
                    for (int k = 0; k < d; ++k) {
                        const double* blk = dus.data() + static_cast<std::size_t>(k) * n * ell;
                        for (int c = 0; c < ell; ++c) {
                            double acc = 0.0;
                            for (int r = 0; r < n; ++r) {
                                acc += blk[static_cast<std::size_t>(r) * ell + c] * z[r * d + k];
                            }
                            g[c] += disc * ws * acc;
                        }
                    }
                }
            }
        }
    }
    // Running-cost gradient; the control at t_N never enters J, so G(t_N) = 0.
    std::vector<double> hu(ell);
    for (int i = 0; i < N; ++i) {
        for (int path = 0; path < P; ++path) {
            p.cost.du(ens.grid().node(i), X.at(path, i), u.at(path, i), hu);
            auto g = rep.G.at(path, i);
            for (int c = 0; c < ell; ++c) g[c] += hu[c];
        }
    }

    // r = || u - Pi_U(u - G) || with unit step inside the projection.
    AdaptedProcess R = AdaptedProcess::zeros(ens, ell);
    std::vector<double> trial(ell);
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i <= N; ++i) {
            auto uu = u.at(path, i);
            auto g = rep.G.at(path, i);
            for (int c = 0; c < ell; ++c) trial[c] = uu[c] - g[c];
            if (p.project) p.project(trial);
            auto out = R.at(path, i);
            for (int c = 0; c < ell; ++c) out[c] = uu[c] - trial[c];
        }
    }
    rep.r = weighted_sq_norm(ens, R, -p.mu);
    return rep;
}

OptimizeResult optimize(const ControlProblem& p, const AdaptedProcess& u0,
                        const FilteredEnsemble& ens, const OptimizeOptions& opts) {
    const int N = ens.grid().N;
    const int ell = p.ell;
    const double h = ens.grid().h();

    OptimizeResult res;
    res.u = u0;
    if (p.project) {
        for (int path = 0; path < ens.paths(); ++path) {
            for (int i = 0; i <= N; ++i) p.project(res.u.at(path, i));
        }
    }
    res.status = "max_iters";
    double step = 1.0;
    for (int iter = 0; iter < opts.max_iters; ++iter) {
        OptimalityReport rep = stationarity_residual(p, res.u, ens);
        res.trace.push_back({iter, rep.J, rep.r, step});
        if (rep.r < opts.tol) {
            res.report = std::move(rep);
            res.status = "converged";
            return res;
        }
        // Descent direction: the gradient representer G itself. The discounted
        // factor belongs to the pairing; any positive per-node scaling keeps
        // the same stationary set, and the unit scaling conditions all nodes
        // evenly.
        const AdaptedProcess& dir = rep.G;
        step = std::min(1.0, 2.0 * step);
        bool accepted = false;
        for (int bt = 0; bt <= opts.max_backtracks; ++bt) {
            AdaptedProcess trial = res.u;
            for (int path = 0; path < ens.paths(); ++path) {
                for (int i = 0; i <= N; ++i) {
                    auto t = trial.at(path, i);
                    auto dd = dir.at(path, i);
                    for (int c = 0; c < ell; ++c) t[c] -= step * dd[c];
                    if (p.project) p.project(t);
                }
            }
            // Directional term <grad J, trial - u> in the discounted pairing.
            double inner = 0.0;
            for (int i = 0; i < N; ++i) {
                double w = std::exp(-p.lambda * ens.grid().node(i)) * h;
                double s = 0.0;
                for (int path = 0; path < ens.paths(); ++path) {
                    auto g = rep.G.at(path, i);
                    auto t = trial.at(path, i);
                    auto uu = res.u.at(path, i);
                    for (int c = 0; c < ell; ++c) s += g[c] * (t[c] - uu[c]);
                }
                inner += w * s / ens.paths();
            }
            double Jt = control_cost(p, trial, ens);
            if (Jt <= rep.J + opts.armijo_c * inner && inner < 0.0) {
                res.u = std::move(trial);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.report = std::move(rep);
            res.status = "stalled";
            return res;
        }
    }
    res.report = stationarity_residual(p, res.u, ens);
    return res;
}

// ---------------------------------------------------------------------------
// Problem families
// ---------------------------------------------------------------------------

namespace {

RunningCost quadratic_cost(double m1, double m2, double m3) {
    RunningCost c;
    c.eval = [m1, m2, m3](double, std::span<const double> x, std::span<const double> u) {
        return 0.5 * (m1 * x[0] * x[0] + m2 * u[0] * u[0] + 2.0 * m3 * x[0] * u[0]);
    };
    c.dx = [m1, m3](double, std::span<const double> x, std::span<const double> u,
                    std::span<double> out) { out[0] = m1 * x[0] + m3 * u[0]; };
    c.du = [m2, m3](double, std::span<const double> x, std::span<const double> u,
                    std::span<double> out) { out[0] = m2 * u[0] + m3 * x[0]; };
    c.growth_C = std::max({std::fabs(m1), std::fabs(m2), std::fabs(m3), 1.0});
    return c;
}

ControlCoeff scalar_kernel_linear(const Kernel& kx, const Kernel& ku) {
    // f(t,s,x,u) = kx(t-s) x + ku(t-s) u, plain evaluation (bounded profiles).
    ControlCoeff c;
    c.zero = kx.is_zero() && ku.is_zero();
    c.dx_zero = kx.is_zero();
    c.du_zero = ku.is_zero();
    c.eval = [kx, ku](double t, double s, int, std::span<const double> x,
                      std::span<const double> u, std::span<double> out) {
        out[0] = (kx.is_zero() ? 0.0 : kx.eval(t - s) * x[0]) +
                 (ku.is_zero() ? 0.0 : ku.eval(t - s) * u[0]);
    };
    c.dx = [kx](double t, double s, int, std::span<const double>, std::span<const double>,
                std::span<double> out) { out[0] = kx.is_zero() ? 0.0 : kx.eval(t - s); };
    c.du = [ku](double t, double s, int, std::span<const double>, std::span<const double>,
                std::span<double> out) { out[0] = ku.is_zero() ? 0.0 : ku.eval(t - s); };
    return c;
}

ControlCoeff scalar_affine(double cx, double cu, double c0) {
    // t-independent f(s, x, u) = cx x + cu u + c0.
    ControlCoeff c;
    c.zero = cx == 0.0 && cu == 0.0 && c0 == 0.0;
    c.dx_zero = cx == 0.0;
    c.du_zero = cu == 0.0;
    c.eval = [cx, cu, c0](double, double, int, std::span<const double> x,
                          std::span<const double> u, std::span<double> out) {
        out[0] = cx * x[0] + cu * u[0] + c0;
    };
    c.dx = [cx](double, double, int, std::span<const double>, std::span<const double>,
                std::span<double> out) { out[0] = cx; };
    c.du = [cu](double, double, int, std::span<const double>, std::span<const double>,
                std::span<double> out) { out[0] = cu; };
    return c;
}

ControlCoeff scalar_factored_affine(const Kernel& factor, double cx, double cu, double c0) {
    ControlCoeff c;
    c.zero = (cx == 0.0 && cu == 0.0 && c0 == 0.0) || factor.is_zero();
    c.dx_zero = cx == 0.0;
    c.du_zero = cu == 0.0;
    c.factor = factor;
    c.eval_reduced = [cx, cu, c0](double, int, std::span<const double> x,
                                  std::span<const double> u, std::span<double> out) {
        out[0] = cx * x[0] + cu * u[0] + c0;
    };
    c.dx_reduced = [cx](double, int, std::span<const double>, std::span<const double>,
                        std::span<double> out) { out[0] = cx; };
    c.du_reduced = [cu](double, int, std::span<const double>, std::span<const double>,
                        std::span<double> out) { out[0] = cu; };
    return c;
}

Kernel scaled(const Kernel& k, double factor) {
    if (k.is_zero() || factor == 0.0) return Kernel::zero();
    Kernel out = k;
    out.scale *= std::fabs(factor);
    return out;
}

}  // namespace

ControlProblem make_lq_problem(const LqSpec& spec, const FilteredEnsemble& ens) {
    ControlProblem p;
    p.n = p.ell = 1;
    p.drift = scalar_kernel_linear(spec.A, spec.B);
    p.diffusion = scalar_kernel_linear(spec.C, spec.D);
    p.cost = quadratic_cost(spec.m1, spec.m2, spec.m3);
    p.phi = AdaptedProcess::constant(ens, std::vector<double>{spec.x0});
    p.mu = spec.mu;
    p.lambda = spec.lambda;
    p.kernels = ControlKernels{spec.A, spec.B, spec.C, spec.D};
    p.convexity_certificate = spec.m1 >= 0.0 && spec.m2 > 0.0 &&
                              spec.m1 * spec.m2 - spec.m3 * spec.m3 >= 0.0;
    return p;
}

ControlProblem make_sde_problem(const SdeSpec& spec, const FilteredEnsemble& ens) {
    ControlProblem p;
    p.n = p.ell = 1;
    p.drift = scalar_affine(spec.bx, spec.bu, spec.b0);
    p.diffusion = scalar_affine(spec.sx, spec.su, spec.s0);
    p.cost = quadratic_cost(spec.m1, spec.m2, spec.m3);
    p.phi = AdaptedProcess::constant(ens, std::vector<double>{spec.x0});
    p.mu = spec.mu;
    p.lambda = spec.lambda;
    p.kernels = ControlKernels{
        spec.bx == 0.0 ? Kernel::zero() : Kernel::constant(std::fabs(spec.bx)),
        spec.bu == 0.0 ? Kernel::zero() : Kernel::constant(std::fabs(spec.bu)),
        spec.sx == 0.0 ? Kernel::zero() : Kernel::constant(std::fabs(spec.sx)),
        spec.su == 0.0 ? Kernel::zero() : Kernel::constant(std::fabs(spec.su))};
    p.convexity_certificate = spec.m1 >= 0.0 && spec.m2 > 0.0 &&
                              spec.m1 * spec.m2 - spec.m3 * spec.m3 >= 0.0;
    return p;
}

double caputo_admissibility_fn(double alpha, double L_bx, double L_sx, double rho) {
    return L_bx * std::pow(rho, -alpha) +
           L_sx * std::sqrt(std::tgamma(2.0 * alpha - 1.0)) / std::tgamma(alpha) *
               std::pow(2.0 * rho, -(alpha - 0.5));
}

ControlProblem make_caputo_problem(const CaputoSpec& spec, const FilteredEnsemble& ens) {
    if (!(spec.alpha > 0.5 && spec.alpha < 1.0)) {
        throw std::invalid_argument("make_caputo_problem: alpha must lie in (1/2, 1)");
    }
    Kernel frac = Kernel::fractional(spec.alpha, 1.0 / std::tgamma(spec.alpha));
    ControlProblem p;
    p.n = p.ell = 1;
    p.drift = scalar_factored_affine(frac, spec.bx, spec.bu, spec.b0);
    p.diffusion = scalar_factored_affine(frac, spec.sx, spec.su, spec.s0);
    p.cost = quadratic_cost(spec.m1, spec.m2, spec.m3);
    p.phi = AdaptedProcess::constant(ens, std::vector<double>{spec.x0});
    p.lambda = spec.lambda;
    p.mu = spec.mu > 0.0 ? spec.mu : spec.lambda / 2.0;
    p.kernels = ControlKernels{scaled(frac, spec.bx), scaled(frac, spec.bu),
                               scaled(frac, spec.sx), scaled(frac, spec.su)};
    p.convexity_certificate = spec.m1 >= 0.0 && spec.m2 > 0.0 &&
                              spec.m1 * spec.m2 - spec.m3 * spec.m3 >= 0.0;
    return p;
}

IntegroLifted integro_lift(const IntegroSpec& spec, const FilteredEnsemble& ens) {
    const double Lbx = std::fabs(spec.bx), L1 = std::fabs(spec.b1), L2 = std::fabs(spec.b2);
    const double Lsx = std::fabs(spec.sx), L3 = std::fabs(spec.s3), L4 = std::fabs(spec.s4);
    Kernel A1 = spec.A1, A2 = spec.A2, A3 = spec.A3, A4 = spec.A4;

    auto admissibility = [=](double mu, double lambda) {
        ControlAdmissibility a;
        if (!(mu > 0.0)) {
            a.failure = "mu <= 0";
            return a;
        }
        double ctrl = weighted_norm(A2, 1, mu) + weighted_norm(A4, 1, mu);
        if (!std::isfinite(ctrl)) {
            a.failure = "[K2]_1(mu) + [K4]_1(mu) diverges";
            return a;
        }
        double state = (Lbx + L1 + L2) / mu + (Lsx + L3 + L4) / std::sqrt(2.0 * mu) +
                       weighted_norm(A1, 1, mu) + weighted_norm(A3, 1, mu);
        a.rho_star = state;  // report the attained sum in place of a root
        if (!(state < 1.0)) {
            a.failure = "(L_bx+L1+L2)/mu + (L_sx+L3+L4)/sqrt(2mu) + [K1]_1 + [K3]_1 >= 1";
            return a;
        }
        if (!(lambda >= 2.0 * mu)) {
            a.failure = "lambda < 2*mu";
            return a;
        }
        a.ok = true;
        return a;
    };

    IntegroLifted out;
    out.spec = spec;
    ControlProblem& p = out.problem;
    p.n = 5;
    p.ell = 1;
    p.mu = spec.mu;
    p.lambda = spec.lambda;
    p.admissibility = admissibility;
    p.adjoint_margin = [=](double eta, double lambda) {
        BsvieMargin m;
        double rho = eta + lambda;
        double sum = (rho > 0.0 ? (Lbx + L1 + L2) / rho : kInf) + weighted_norm(A1, 1, rho) +
                     weighted_norm(A3, 1, rho) +
                     (rho > 0.0 ? (Lsx + L3 + L4) / std::sqrt(2.0 * rho) : kInf);
        m.margin = 1.0 - sum;
        m.c_eta_lambda = m.margin > 0.0 ? std::sqrt(2.0) / m.margin : kInf;
        return m;
    };

    const double bx = spec.bx, bu = spec.bu, b1 = spec.b1, b2 = spec.b2, b0 = spec.b0;
    const double sx = spec.sx, su = spec.su, s3 = spec.s3, s4 = spec.s4;

    p.drift.eval = [=](double t, double s, int, std::span<const double> X,
                       std::span<const double> u, std::span<double> out) {
        out[0] = bx * X[0] + bu * u[0] + b1 * X[1] + b2 * X[2] + b0;
        out[1] = A1.is_zero() ? 0.0 : A1.eval(t - s) * X[0];
        out[2] = A2.is_zero() ? 0.0 : A2.eval(t - s) * u[0];
        out[3] = A3.is_zero() ? 0.0 : A3.eval(t - s) * X[0];
        out[4] = A4.is_zero() ? 0.0 : A4.eval(t - s) * u[0];
    };
    p.drift.dx = [=](double t, double s, int, std::span<const double>, std::span<const double>,
                     std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0 * 5 + 0] = bx;
        out[0 * 5 + 1] = b1;
        out[0 * 5 + 2] = b2;
        out[1 * 5 + 0] = A1.is_zero() ? 0.0 : A1.eval(t - s);
        out[3 * 5 + 0] = A3.is_zero() ? 0.0 : A3.eval(t - s);
    };
    p.drift.du = [=](double t, double s, int, std::span<const double>, std::span<const double>,
                     std::span<double> out) {
        out[0] = bu;
        out[1] = 0.0;
        out[2] = A2.is_zero() ? 0.0 : A2.eval(t - s);
        out[3] = 0.0;
        out[4] = A4.is_zero() ? 0.0 : A4.eval(t - s);
    };

    p.diffusion.eval = [=](double, double, int, std::span<const double> X,
                           std::span<const double> u, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = sx * X[0] + su * u[0] + s3 * X[3] + s4 * X[4];
    };
    p.diffusion.dx = [=](double, double, int, std::span<const double>, std::span<const double>,
                         std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0 * 5 + 0] = sx;
        out[0 * 5 + 3] = s3;
        out[0 * 5 + 4] = s4;
    };
    p.diffusion.du = [=](double, double, int, std::span<const double>, std::span<const double>,
                         std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = su;
    };
    p.drift.zero = false;
    p.diffusion.zero = sx == 0.0 && su == 0.0 && s3 == 0.0 && s4 == 0.0;
    p.drift.dx_zero = false;
    p.drift.du_zero = bu == 0.0 && A2.is_zero() && A4.is_zero();
    p.diffusion.dx_zero = sx == 0.0 && s3 == 0.0 && s4 == 0.0;
    p.diffusion.du_zero = su == 0.0;

    // Lifted running cost h~(t, X, u) = h(t, J_n X, u).
    const double m1 = spec.m1, m2 = spec.m2, m3 = spec.m3;
    p.cost.eval = [=](double, std::span<const double> X, std::span<const double> u) {
        return 0.5 * (m1 * X[0] * X[0] + m2 * u[0] * u[0] + 2.0 * m3 * X[0] * u[0]);
    };
    p.cost.dx = [=](double, std::span<const double> X, std::span<const double> u,
                    std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = m1 * X[0] + m3 * u[0];
    };
    p.cost.du = [=](double, std::span<const double> X, std::span<const double> u,
                    std::span<double> out) { out[0] = m2 * u[0] + m3 * X[0]; };
    p.cost.growth_C = std::max({std::fabs(m1), std::fabs(m2), std::fabs(m3), 1.0});
    p.convexity_certificate = m1 >= 0.0 && m2 > 0.0 && m1 * m2 - m3 * m3 >= 0.0;

    std::vector<double> x0(5, 0.0);
    x0[0] = spec.x0;
    p.phi = AdaptedProcess::constant(ens, x0);

    require_admissible(p);
    return out;
}

AdaptedProcess integro_expanded_condition(const IntegroLifted& lifted, const AdaptedProcess& u,
                                          const FilteredEnsemble& ens) {
    const IntegroSpec& s = lifted.spec;
    const ControlProblem& p = lifted.problem;
    const int N = ens.grid().N;
    const int P = ens.paths();
    const double h = ens.grid().h();

    AdaptedProcess X = solve_state(p, u, ens);
    MSolution adj = adjoint_solve(p, u, X, ens);

    // Transposed-consistent reductions cY(t_i) = sum_{j>i} e^{-lambda tau} E_t[Y_j] h
    // and cZ(t_i) = sum_{j>i} e^{-lambda tau} Z0(j, i) h on the first coordinate.
    AdaptedProcess G = AdaptedProcess::zeros(ens, 1);
    std::vector<double> row(static_cast<std::size_t>(P)), cond(static_cast<std::size_t>(P));
    std::vector<double> row2(static_cast<std::size_t>(P)), cond2(static_cast<std::size_t>(P));
    std::vector<double> row4(static_cast<std::size_t>(P)), cond4(static_cast<std::size_t>(P));
    for (int j = 1; j <= N; ++j) {
        for (int path = 0; path < P; ++path) {
            row[path] = adj.Y.at(path, j)[0];
            row2[path] = adj.Y.at(path, j)[2];
            row4[path] = adj.Y.at(path, j)[4];
        }
        double tj = ens.grid().node(j);
        for (int i = 0; i < j; ++i) {
            double tau = tj - ens.grid().node(i);
            double disc = std::exp(-p.lambda * tau) * h;
            ens.cond_expect(row, 1, i, cond, p.basis, nullptr);
            ens.cond_expect(row2, 1, i, cond2, p.basis, nullptr);
            ens.cond_expect(row4, 1, i, cond4, p.basis, nullptr);
            double a2 = s.A2.is_zero() ? 0.0 : s.A2.eval(tau);
            double a4 = s.A4.is_zero() ? 0.0 : s.A4.eval(tau);
            for (int path = 0; path < P; ++path) {
                double z0 = adj.Z.at(path, j, i)[0];  // first coordinate, d = 1
                G.at(path, i)[0] += disc * (s.bu * cond[path] + a2 * cond2[path] +
                                            a4 * cond4[path] + s.su * z0);
            }
        }
    }
    for (int i = 0; i < N; ++i) {
        for (int path = 0; path < P; ++path) {
            G.at(path, i)[0] += s.m2 * u.at(path, i)[0] + s.m3 * X.at(path, i)[0];
        }
    }
    return G;
}

AnticipatedBsdeCheck verify_anticipated_bsde(const IntegroLifted& lifted,
                                             const AdaptedProcess& u,
                                             const FilteredEnsemble& ens) {
    const IntegroSpec& s = lifted.spec;
    const ControlProblem& p = lifted.problem;
    const int N = ens.grid().N;
    const int P = ens.paths();
    const double h = ens.grid().h();

    AdaptedProcess X = solve_state(p, u, ens);
    MSolution adj = adjoint_solve(p, u, X, ens);

    // Project the lifted M-solution onto the first coordinate and reduce.
    MSolution proj;
    proj.Y = AdaptedProcess::from_fn(ens, 1, [&](int path, int i, std::span<double> out) {
        out[0] = adj.Y.at(path, i)[0];
    });
    proj.Z = TwoParameterProcess::zeros(P, N + 1, N, 1);
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i <= N; ++i) {
            for (int j = 0; j < N; ++j) proj.Z.at(path, i, j)[0] = adj.Z.at(path, i, j)[0];
        }
    }
    BsdeReduction red = bsvie_to_bsde(proj, p.lambda, p.mu, ens, p.basis);

    AnticipatedBsdeCheck out;
    out.cY = red.cY;
    out.cZ = red.cZ;
    out.residual = AdaptedProcess::zeros(ens, 1);

    // E_t[ d_{x1} b^T cY(s) ] and E_t[ d_{x3} sigma^T cZ(s) ] terms (linear
    // coefficients: the partials are the constants b1, s3).
    std::vector<double> rowY(static_cast<std::size_t>(P)), condY(static_cast<std::size_t>(P));
    std::vector<double> rowZ(static_cast<std::size_t>(P)), condZ(static_cast<std::size_t>(P));
    AdaptedProcess anticipated = AdaptedProcess::zeros(ens, 1);
    for (int j = 1; j <= N; ++j) {
        for (int path = 0; path < P; ++path) {
            rowY[path] = s.b1 * red.cY.at(path, j)[0];
            rowZ[path] = s.s3 * red.cZ.at(path, j)[0];
        }
        double tj = ens.grid().node(j);
        for (int i = 0; i < j; ++i) {
            double tau = tj - ens.grid().node(i);
            double disc = std::exp(-p.lambda * tau) * h;
            ens.cond_expect(rowY, 1, i, condY, p.basis, nullptr);
            ens.cond_expect(rowZ, 1, i, condZ, p.basis, nullptr);
            double a1 = s.A1.is_zero() ? 0.0 : s.A1.eval(tau);
            double a3 = s.A3.is_zero() ? 0.0 : s.A3.eval(tau);
            for (int path = 0; path < P; ++path) {
                anticipated.at(path, i)[0] += disc * (a1 * condY[path] + a3 * condZ[path]);
            }
        }
    }
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i < N; ++i) {
            double hx = s.m1 * X.at(path, i)[0] + s.m3 * u.at(path, i)[0];
            double drive = hx + anticipated.at(path, i)[0] + s.bx * red.cY.at(path, i)[0] +
                           s.sx * red.cZ.at(path, i)[0];
            double res = red.cY.at(path, i + 1)[0] - red.cY.at(path, i)[0] + drive * h -
                         p.lambda * red.cY.at(path, i)[0] * h -
                         red.cZ.at(path, i)[0] * ens.increment(path, i, 0);
            out.residual.at(path, i)[0] = res;
        }
    }
    out.residual_norm = weighted_sq_norm(ens, out.residual, -p.mu);
    return out;
}

}  // namespace volterra
