#include "volterra/linear.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace volterra {

namespace {

// out = a * b for row-major m x m blocks.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out, int m) {
    for (int r = 0; r < m; ++r) {
        for (int c = 0; c < m; ++c) {
            double s = 0.0;
            for (int k = 0; k < m; ++k) s += a[r * m + k] * b[k * m + c];
            out[r * m + c] = s;
        }
    }
}

void matvec(std::span<const double> a, std::span<const double> x, std::span<double> out, int m) {
    for (int r = 0; r < m; ++r) {
        double s = 0.0;
        for (int c = 0; c < m; ++c) s += a[r * m + c] * x[c];
        out[r] = s;
    }
}

}  // namespace

TwoParameterProcess fundamental_phi(const LinearBsvieSpec& spec, const FilteredEnsemble& ens) {
    const int N = ens.grid().N;
    const int P = ens.paths();
    const int m = spec.m;
    const int d = ens.dims();
    TwoParameterProcess phi = TwoParameterProcess::zeros(P, N + 1, N + 1, m * m);
    std::vector<double> bk(static_cast<std::size_t>(m) * m), prod(static_cast<std::size_t>(m) * m);
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i <= N; ++i) {
            auto diag = phi.at(path, i, i);
            for (int r = 0; r < m; ++r) diag[r * m + r] = 1.0;
            for (int j = i; j < N; ++j) {
                auto cur = phi.at(path, i, j);
                auto next = phi.at(path, i, j + 1);
                std::copy(cur.begin(), cur.end(), next.begin());
                if (spec.B_zero) continue;
                double disc = std::exp(-spec.lambda * (ens.grid().node(j) - ens.grid().node(i)));
                for (int k = 0; k < d; ++k) {
                    spec.B(ens.grid().node(i), ens.grid().node(j), path, k, bk);
                    matmul(cur, bk, prod, m);
                    double dw = ens.increment(path, j, k) * disc;
                    for (int c = 0; c < m * m; ++c) next[c] += prod[c] * dw;
                }
            }
        }
    }
    return phi;
}

TwoParameterProcess resolvent(const LinearBsvieSpec& spec, const TwoParameterProcess& phi,
                              const FilteredEnsemble& ens, double series_tol,
                              ResolventDiagnostics* diag) {
    const int N = ens.grid().N;
    const int P = ens.paths();
    const int m = spec.m;
    const double h = ens.grid().h();
    double ratio = spec.series_ratio();
    if (diag) diag->ratio_bound = ratio;
    if (!(ratio < 1.0)) {
        throw std::runtime_error("resolvent: series ratio >= 1, outside the (eta, lambda) domain");
    }

    TwoParameterProcess xi1 = TwoParameterProcess::zeros(P, N + 1, N + 1, m * m);
    std::vector<double> a(static_cast<std::size_t>(m) * m);
    if (!spec.A_zero) {
        for (int path = 0; path < P; ++path) {
            for (int i = 0; i <= N; ++i) {
                for (int j = i; j <= N; ++j) {
                    spec.A(ens.grid().node(i), ens.grid().node(j), path, a);
                    matmul(phi.at(path, i, j), a, xi1.at(path, i, j), m);
                }
            }
        }
    }

    auto term_norm = [&](const TwoParameterProcess& z) {
        // E sum_i e^{2 eta t_i} h sum_{j > i} e^{-2 lambda (s_j - t_i)} |z|^2 h.
        double total = 0.0;
        for (int path = 0; path < P; ++path) {
            for (int i = 0; i < N; ++i) {
                double wi = std::exp(2.0 * spec.eta * ens.grid().node(i)) * h;
                for (int j = i; j <= N; ++j) {
                    double ws =
                        std::exp(-2.0 * spec.lambda * (ens.grid().node(j) - ens.grid().node(i))) * h;
                    auto v = z.at(path, i, j);
                    double s = 0.0;
                    for (int c = 0; c < m * m; ++c) s += v[c] * v[c];
                    total += wi * ws * s;
                }
            }
        }
        return std::sqrt(total / P);
    };

    TwoParameterProcess R = xi1;
    TwoParameterProcess cur = xi1;
    double base = term_norm(xi1);
    if (diag) {
        diag->terms = 1;
        diag->term_norms.push_back(base);
    }
    if (base == 0.0) return R;

    TwoParameterProcess next = TwoParameterProcess::zeros(P, N + 1, N + 1, m * m);
    std::vector<double> acc(static_cast<std::size_t>(m) * m), prod(static_cast<std::size_t>(m) * m);
    for (int term = 2; term <= 200; ++term) {
        // Xi_{i+1}(t_i, s_j) = sum_{r in [i, j)} h Xi_i(t_i, r) Xi_1(r, s_j).
        for (int path = 0; path < P; ++path) {
            for (int i = 0; i <= N; ++i) {
                for (int j = i; j <= N; ++j) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int r = i; r < j; ++r) {
                        matmul(cur.at(path, i, r), xi1.at(path, r, j), prod, m);
                        for (int c = 0; c < m * m; ++c) acc[c] += prod[c] * h;
                    }
                    std::copy(acc.begin(), acc.end(), next.at(path, i, j).begin());
                }
            }
        }
        double n = term_norm(next);
        if (diag) {
            diag->terms = term;
            diag->term_norms.push_back(n);
        }
        for (std::size_t c = 0; c < R.v.size(); ++c) R.v[c] += next.v[c];
        if (n < series_tol * base) break;
        std::swap(cur, next);
    }
    return R;
}

VocResult variation_of_constants(const LinearBsvieSpec& spec, const AdaptedProcess& psi,
                                 const FilteredEnsemble& ens, bool compare_with_solver) {
    if (!spec.admissible()) {
        throw std::runtime_error("variation_of_constants: (eta, lambda) outside the domain");
    }
    const int N = ens.grid().N;
    const int P = ens.paths();
    const int m = spec.m;
    const double h = ens.grid().h();

    TwoParameterProcess phi = fundamental_phi(spec, ens);
    TwoParameterProcess R = resolvent(spec, phi, ens);

    // Payoff per row: Phi(t_i, T) psi(t_i) + sum_{j >= i} e^{-lambda (s_j - t_i)}
    // R(t_i, s_j) Phi(s_j, T) psi(s_j) h, then project onto F_{t_i}.
    VocResult out;
    out.Y = AdaptedProcess::zeros(ens, m);
    std::vector<double> payoff(static_cast<std::size_t>(P) * m);
    std::vector<double> fit(static_cast<std::size_t>(P) * m);
    std::vector<double> tmp(m), tmp2(m);
    for (int i = 0; i <= N; ++i) {
        for (int path = 0; path < P; ++path) {
            double* dst = payoff.data() + static_cast<std::size_t>(path) * m;
            matvec(phi.at(path, i, N), psi.at(path, i), {dst, static_cast<std::size_t>(m)}, m);
            for (int j = i; j < N; ++j) {
                double disc =
                    std::exp(-spec.lambda * (ens.grid().node(j) - ens.grid().node(i))) * h;
                matvec(phi.at(path, j, N), psi.at(path, j), tmp, m);
                matvec(R.at(path, i, j), tmp, tmp2, m);
                for (int c = 0; c < m; ++c) dst[c] += disc * tmp2[c];
            }
        }
        ens.cond_expect(payoff, m, i, fit, spec.basis, nullptr);
        for (int path = 0; path < P; ++path) {
            std::memcpy(out.Y.at(path, i).data(), fit.data() + static_cast<std::size_t>(path) * m,
                        sizeof(double) * m);
        }
    }

    if (compare_with_solver) {
        BsvieProblem p;
        p.m = m;
        p.psi = psi;
        p.lambda = spec.lambda;
        p.eta = spec.eta;
        p.basis = spec.basis;
        const FilteredEnsemble* e = &ens;
        const LinearBsvieSpec* sp = &spec;
        int dd = ens.dims();
        p.driver.eval = [e, sp, m, dd](int i, int j, int path, std::span<const double> y,
                                       std::span<const double> z1, std::span<const double>,
                                       std::span<double> g) {
            std::vector<double> blk(static_cast<std::size_t>(m) * m), tmp(m);
            double t = e->grid().node(i), s = e->grid().node(j);
            std::fill(g.begin(), g.end(), 0.0);
            if (!sp->A_zero) {
                sp->A(t, s, path, blk);
                matvec(blk, y, tmp, m);
                for (int c = 0; c < m; ++c) g[c] += tmp[c];
            }
            if (!sp->B_zero) {
                for (int k = 0; k < dd; ++k) {
                    sp->B(t, s, path, k, blk);
                    // z1 column k
                    for (int r = 0; r < m; ++r) {
                        double acc = 0.0;
                        for (int c = 0; c < m; ++c) acc += blk[r * m + c] * z1[c * dd + k];
                        g[r] += acc;
                    }
                }
            }
        };
        p.driver.lip_y = spec.KA;
        p.driver.lip_z1 = spec.KB;
        p.driver.lip_z2 = Kernel::zero();
        p.driver.depends_y = !spec.A_zero;
        p.driver.depends_z1 = !spec.B_zero;
        p.driver.depends_z2 = false;
        p.driver.zero = spec.A_zero && spec.B_zero;
        MSolution ref = solve_bsvie(p, ens);
        AdaptedProcess dy = out.Y;
        for (std::size_t c = 0; c < dy.v.size(); ++c) dy.v[c] -= ref.Y.v[c];
        out.gap = weighted_sq_norm(ens, dy, spec.eta);
    }
    return out;
}

DualityResult duality_check(const LinearSvieSpec& fwd, const AdaptedProcess& phi0,
                            const AdaptedProcess& psi, double mu, double eta, double lambda,
                            const FilteredEnsemble& ens) {
    double rho = critical_weight(fwd.KC, fwd.KD);
    if (!(eta + lambda >= mu && mu > rho)) {
        throw std::runtime_error("duality_check: requires eta + lambda >= mu > rho_{C,D}");
    }
    const int n = fwd.n;
    const int d = ens.dims();
    const int N = ens.grid().N;
    const int P = ens.paths();
    const double h = ens.grid().h();

    // Forward linear SVIE via svie-style explicit recursion.
    AdaptedProcess X = AdaptedProcess::zeros(ens, n);
    std::vector<double> blk(static_cast<std::size_t>(n) * n), tmp(n);
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i <= N; ++i) {
            auto xi = X.at(path, i);
            auto p0 = phi0.at(path, i);
            for (int c = 0; c < n; ++c) xi[c] = p0[c];
            for (int j = 0; j < i; ++j) {
                double t = ens.grid().node(i), s = ens.grid().node(j);
                if (!fwd.C_zero) {
                    fwd.C(t, s, path, blk);
                    matvec(blk, X.at(path, j), tmp, n);
                    for (int c = 0; c < n; ++c) xi[c] += h * tmp[c];
                }
                if (!fwd.D_zero) {
                    for (int k = 0; k < d; ++k) {
                        fwd.D(t, s, path, k, blk);
                        matvec(blk, X.at(path, j), tmp, n);
                        double dw = ens.increment(path, j, k);
                        for (int c = 0; c < n; ++c) xi[c] += tmp[c] * dw;
                    }
                }
            }
        }
    }

    // Backward: Y(t) = psi(t) + int e^{-lambda(s-t)} { C(s,t)^T Y(s) + sum D_k(s,t)^T Z^k(s,t) } ds - ...
    BsvieProblem bp;
    bp.m = n;
    bp.psi = psi;
    bp.lambda = lambda;
    bp.eta = eta;
    const FilteredEnsemble* e = &ens;
    const LinearSvieSpec* f = &fwd;
    bp.driver.eval = [e, f, n, d](int i, int j, int path, std::span<const double> y,
                                  std::span<const double>, std::span<const double> z2,
                                  std::span<double> g) {
        std::vector<double> blk(static_cast<std::size_t>(n) * n);
        double t = e->grid().node(i), s = e->grid().node(j);
        std::fill(g.begin(), g.end(), 0.0);
        if (!f->C_zero) {
            f->C(s, t, path, blk);  // C(s,t)^T y
            for (int r = 0; r < n; ++r) {
                double acc = 0.0;
                for (int c = 0; c < n; ++c) acc += blk[c * n + r] * y[c];
                g[r] += acc;
            }
        }
        if (!f->D_zero) {
            for (int k = 0; k < d; ++k) {
                f->D(s, t, path, k, blk);
                for (int r = 0; r < n; ++r) {
                    double acc = 0.0;
                    for (int c = 0; c < n; ++c) acc += blk[c * n + r] * z2[c * d + k];
                    g[r] += acc;
                }
            }
        }
    };
    bp.driver.lip_y = fwd.KC;
    bp.driver.lip_z1 = Kernel::zero();
    bp.driver.lip_z2 = fwd.KD;
    bp.driver.depends_y = !fwd.C_zero;
    bp.driver.depends_z1 = false;
    bp.driver.depends_z2 = !fwd.D_zero;
    bp.driver.zero = fwd.C_zero && fwd.D_zero;
    MSolution sol = solve_bsvie(bp, ens);

    DualityResult r;
    for (int i = 0; i < N; ++i) {
        double w = std::exp(-lambda * ens.grid().node(i)) * h;
        double lhs = 0.0, rhs = 0.0;
        for (int path = 0; path < P; ++path) {
            auto xv = X.at(path, i);
            auto pv = psi.at(path, i);
            auto yv = sol.Y.at(path, i);
            auto fv = phi0.at(path, i);
            for (int c = 0; c < n; ++c) {
                lhs += pv[c] * xv[c];
                rhs += yv[c] * fv[c];
            }
        }
        r.lhs += w * lhs / P;
        r.rhs += w * rhs / P;
    }
    r.gap = std::fabs(r.lhs - r.rhs);
    return r;
}

BsdeReduction bsvie_to_bsde(const MSolution& sol, double lambda, double mu,
                            const FilteredEnsemble& ens, const RegressionBasis* basis) {
    if (!(lambda >= 2.0 * mu && mu > 0.0)) {
        throw std::runtime_error("bsvie_to_bsde: requires lambda >= 2 mu > 0");
    }
    const int N = ens.grid().N;
    const int P = ens.paths();
    const int m = sol.Y.dim;
    const int d = ens.dims();
    const double h = ens.grid().h();

    BsdeReduction out;
    out.cY = AdaptedProcess::zeros(ens, m);
    out.cZ = AdaptedProcess::zeros(ens, m * d);
    std::vector<double> payoff(static_cast<std::size_t>(P) * m);
    std::vector<double> fit(static_cast<std::size_t>(P) * m);
    for (int i = 0; i <= N; ++i) {
        for (int path = 0; path < P; ++path) {
            for (int c = 0; c < m; ++c) {
                double acc = 0.0;
                for (int j = i; j < N; ++j) {
                    acc += std::exp(-lambda * (ens.grid().node(j) - ens.grid().node(i))) *
                           sol.Y.at(path, j)[c] * h;
                }
                payoff[static_cast<std::size_t>(path) * m + c] = acc;
            }
        }
        ens.cond_expect(payoff, m, i, fit, basis, nullptr);
        for (int path = 0; path < P; ++path) {
            std::memcpy(out.cY.at(path, i).data(), fit.data() + static_cast<std::size_t>(path) * m,
                        sizeof(double) * m);
            auto cz = out.cZ.at(path, i);
            for (int c = 0; c < m * d; ++c) {
                double acc = 0.0;
                for (int j = i + 1; j <= N; ++j) {
                    if (j >= sol.Z.rows) break;
                    if (i >= sol.Z.cols) break;
                    acc += std::exp(-lambda * (ens.grid().node(j) - ens.grid().node(i))) *
                           sol.Z.at(path, j, i)[c] * h;
                }
                cz[c] = acc;
            }
        }
    }

    // Discrete BSDE defect per step:
    // cY(t_i) - cY(t_{i+1}) - (Y(t_i) - lambda cY(t_i)) h + cZ(t_i) dW(t_i).
    out.residual = AdaptedProcess::zeros(ens, m);
    for (int path = 0; path < P; ++path) {
        for (int i = 0; i < N; ++i) {
            auto res = out.residual.at(path, i);
            auto cy = out.cY.at(path, i);
            auto cyn = out.cY.at(path, i + 1);
            auto y = sol.Y.at(path, i);
            auto cz = out.cZ.at(path, i);
            for (int c = 0; c < m; ++c) {
                double zdw = 0.0;
                for (int k = 0; k < d; ++k) {
                    zdw += cz[static_cast<std::size_t>(c) * d + k] * ens.increment(path, i, k);
                }
                res[c] = cy[c] - cyn[c] - (y[c] - lambda * cy[c]) * h + zdw;
            }
        }
    }
    out.residual_norm = weighted_sq_norm(ens, out.residual, -mu);
    return out;
}

}  // namespace volterra
