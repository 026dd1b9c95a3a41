#include "volterra/bsvie.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace volterra {

namespace {

struct Iterate {
    AdaptedProcess Y;
    TwoParameterProcess Z;
};

double y_distance(const FilteredEnsemble& ens, const AdaptedProcess& a, const AdaptedProcess& b,
                  double eta) {
    AdaptedProcess d = a;
    for (std::size_t k = 0; k < d.v.size(); ++k) d.v[k] -= b.v[k];
    return weighted_sq_norm(ens, d, eta);
}

double z_distance(const FilteredEnsemble& ens, const TwoParameterProcess& a,
                  const TwoParameterProcess& b, double eta) {
    TwoParameterProcess d = a;
    for (std::size_t k = 0; k < d.v.size(); ++k) d.v[k] -= b.v[k];
    return weighted_sq_norm(ens, d, eta);
}

class BsvieEngine {
  public:
    BsvieEngine(const BsvieProblem& p, const FilteredEnsemble& ens)
        : p_(p), ens_(ens), N_(ens.grid().N), P_(ens.paths()), m_(p.m), d_(ens.dims()),
          lag_(driver_lag_weights(p.driver, p.lambda, ens.grid())) {}

    /// Driver integral per path for one t-row: out[path*m + c] =
    /// sum_{j>=i} w_lag(j-i) g(i, j, path, Y(s_j), Z(t_i, s_j), Z(s_j, t_i)).
    void driver_sum(int i, const Iterate& x, std::span<double> out) const {
        std::fill(out.begin(), out.end(), 0.0);
        if (p_.driver.zero) return;
        std::vector<double> g(m_);
        const std::vector<double> zzero(static_cast<std::size_t>(m_) * d_, 0.0);
        for (int j = i; j < N_; ++j) {
            double w = lag_[j - i];
            for (int path = 0; path < P_; ++path) {
                auto y = x.Y.at(path, j);
                std::span<const double> z1 =
                    p_.driver.depends_z1 ? x.Z.at(path, i, j) : std::span<const double>(zzero);
                std::span<const double> z2 =
                    p_.driver.depends_z2 ? x.Z.at(path, j, i) : std::span<const double>(zzero);
                p_.driver.eval(i, j, path, y, z1, z2, g);
                for (int c = 0; c < m_; ++c) out[static_cast<std::size_t>(path) * m_ + c] += w * g[c];
            }
        }
    }

    bool track_z() const { return p_.driver.depends_z1 || p_.driver.depends_z2; }

    /// Exact solve of the discrete gamma-level equation
    ///   Y(t_i) = psi_eff(t_i) + gamma sum_{j>=i} w g(...) - sum_{j>=i} Z dW
    /// by backward rows with a per-row fixed point. The gamma = 0 instance is
    /// the trivial equation. fill_all forces the full Z grid (final output).
    Iterate level_solve(double gamma, const AdaptedProcess& psi_eff, const Iterate* warm,
                        bool fill_all) const {
        Iterate out;
        out.Y = AdaptedProcess::zeros(ens_, m_);
        out.Z = TwoParameterProcess::zeros(P_, N_ + 1, N_, m_ * d_);
        const bool need_upper = fill_all || p_.driver.depends_z1;
        const bool need_lower = fill_all || p_.driver.depends_z2;
        const bool row_has_z = track_z() && gamma != 0.0 && !p_.driver.zero;

        std::vector<double> payoff(static_cast<std::size_t>(P_) * m_);
        std::vector<double> rowfit(static_cast<std::size_t>(P_) * m_);
        std::vector<double> zstep(static_cast<std::size_t>(P_) * m_ * d_);
        std::vector<double> g(m_);
        const std::vector<double> zzero(static_cast<std::size_t>(m_) * d_, 0.0);

        for (int i = N_; i >= 0; --i) {
            // Warm-start the row unknowns.
            for (int path = 0; path < P_; ++path) {
                auto src = warm ? warm->Y.at(path, i) : p_.psi.at(path, i);
                std::copy(src.begin(), src.end(),
                          out.Y.at(path, i).begin());
                if (row_has_z && warm) {
                    for (int j = i; j < N_; ++j) {
                        auto w = warm->Z.at(path, i, j);
                        std::copy(w.begin(), w.end(), out.Z.at(path, i, j).begin());
                    }
                }
            }
            const bool implicit = gamma != 0.0 && !p_.driver.zero && i < N_;
            const int max_row_iter = implicit ? 200 : 1;
            double prev_change = kInf;
            for (int it = 0; it < max_row_iter; ++it) {
                // Assemble the row payoff at the current row iterate.
                for (int path = 0; path < P_; ++path) {
                    auto psi = psi_eff.at(path, i);
                    for (int c = 0; c < m_; ++c) {
                        payoff[static_cast<std::size_t>(path) * m_ + c] = psi[c];
                    }
                }
                if (gamma != 0.0 && !p_.driver.zero) {
                    for (int j = i; j < N_; ++j) {
                        double w = gamma * lag_[j - i];
                        for (int path = 0; path < P_; ++path) {
                            auto y = out.Y.at(path, j);
                            std::span<const double> z1 = p_.driver.depends_z1
                                                             ? out.Z.at(path, i, j)
                                                             : std::span<const double>(zzero);
                            std::span<const double> z2 = p_.driver.depends_z2
                                                             ? out.Z.at(path, j, i)
                                                             : std::span<const double>(zzero);
                            p_.driver.eval(i, j, path, y, z1, z2, g);
                            for (int c = 0; c < m_; ++c) {
                                payoff[static_cast<std::size_t>(path) * m_ + c] += w * g[c];
                            }
                        }
                    }
                }
                // Project: Y_i = E_{t_i}[payoff]; upper Z row from representation.
                ens_.cond_expect(payoff, m_, i, rowfit, p_.basis, nullptr);
                double change = 0.0;
                for (int path = 0; path < P_; ++path) {
                    for (int c = 0; c < m_; ++c) {
                        double& cur = out.Y.at(path, i)[c];
                        double next = rowfit[static_cast<std::size_t>(path) * m_ + c];
                        change = std::max(change, std::fabs(next - cur));
                        cur = next;
                    }
                }
                if (row_has_z) {
                    int jmax = p_.driver.depends_z1 ? N_ : std::min(i + 1, N_);
                    for (int j = i; j < jmax; ++j) {
                        ens_.repr_step(payoff, m_, j, zstep, p_.basis, nullptr);
                        for (int path = 0; path < P_; ++path) {
                            auto dst = out.Z.at(path, i, j);
                            const double* src = zstep.data() + static_cast<std::size_t>(path) * m_ * d_;
                            for (int c = 0; c < m_ * d_; ++c) {
                                change = std::max(change, std::fabs(src[c] - dst[c]));
                                dst[c] = src[c];
                            }
                        }
                    }
                }
                if (!implicit || change < 1e-13 * (1.0 + psi_scale_)) break;
                if (it > 50 && change > prev_change) {
                    throw std::runtime_error("bsvie row fixed point failed to contract");
                }
                prev_change = change;
            }
            // Final upper row (when not maintained during the iteration).
            if (need_upper && !row_has_z) {
                for (int j = i; j < N_; ++j) {
                    ens_.repr_step(payoff, m_, j, zstep, p_.basis, nullptr);
                    for (int path = 0; path < P_; ++path) {
                        std::memcpy(out.Z.at(path, i, j).data(),
                                    zstep.data() + static_cast<std::size_t>(path) * m_ * d_,
                                    sizeof(double) * m_ * d_);
                    }
                }
            } else if (need_upper && row_has_z && !p_.driver.depends_z1) {
                for (int j = i + 1; j < N_; ++j) {
                    ens_.repr_step(payoff, m_, j, zstep, p_.basis, nullptr);
                    for (int path = 0; path < P_; ++path) {
                        std::memcpy(out.Z.at(path, i, j).data(),
                                    zstep.data() + static_cast<std::size_t>(path) * m_ * d_,
                                    sizeof(double) * m_ * d_);
                    }
                }
            }
            // Lower row Z(t_i, s_j), j < i: representation of Y(t_i); feeds the
            // z2 argument of earlier rows.
            if (need_lower) {
                for (int path = 0; path < P_; ++path) {
                    std::memcpy(rowfit.data() + static_cast<std::size_t>(path) * m_,
                                out.Y.at(path, i).data(), sizeof(double) * m_);
                }
                for (int j = 0; j < i; ++j) {
                    ens_.repr_step(rowfit, m_, j, zstep, p_.basis, nullptr);
                    for (int path = 0; path < P_; ++path) {
                        std::memcpy(out.Z.at(path, i, j).data(),
                                    zstep.data() + static_cast<std::size_t>(path) * m_ * d_,
                                    sizeof(double) * m_ * d_);
                    }
                }
            }
        }
        return out;
    }

    void set_psi_scale(double s) { psi_scale_ = s; }

    const BsvieProblem& p_;
    const FilteredEnsemble& ens_;
    int N_, P_, m_, d_;
    std::vector<double> lag_;
    double psi_scale_ = 1.0;
};

void finalize_residuals(const BsvieProblem& p, const FilteredEnsemble& ens,
                        const BsvieEngine& eng, MSolution& sol) {
    const int N = ens.grid().N;
    const int P = ens.paths();
    const int m = p.m;
    const int d = ens.dims();
    Iterate cur{sol.Y, sol.Z};
    std::vector<double> dsum(static_cast<std::size_t>(P) * m);
    AdaptedProcess eq = AdaptedProcess::zeros(ens, m);
    AdaptedProcess mres = AdaptedProcess::zeros(ens, m);
    std::vector<double> meanY(m);
    std::vector<double> yrow(static_cast<std::size_t>(P) * m);
    for (int i = 0; i <= N; ++i) {
        eng.driver_sum(i, cur, dsum);
        for (int path = 0; path < P; ++path) {
            std::memcpy(yrow.data() + static_cast<std::size_t>(path) * m,
                        sol.Y.at(path, i).data(), sizeof(double) * m);
        }
        ens.mean(yrow, m, meanY);
        for (int path = 0; path < P; ++path) {
            auto e = eq.at(path, i);
            auto mr = mres.at(path, i);
            auto y = sol.Y.at(path, i);
            auto psi = p.psi.at(path, i);
            for (int c = 0; c < m; ++c) {
                double stoch = 0.0, mart = 0.0;
                for (int j = 0; j < N; ++j) {
                    auto z = sol.Z.at(path, i, j);
                    for (int k = 0; k < d; ++k) {
                        double zdw = z[static_cast<std::size_t>(c) * d + k] * ens.increment(path, j, k);
                        if (j >= i) stoch += zdw;
                        else mart += zdw;
                    }
                }
                e[c] = y[c] + stoch - psi[c] - dsum[static_cast<std::size_t>(path) * m + c];
                mr[c] = y[c] - meanY[c] - mart;
            }
        }
    }
    sol.equation_residual = weighted_sq_norm(ens, eq, p.eta);
    sol.m_residual = weighted_sq_norm(ens, mres, p.eta);
}

}  // namespace

std::vector<double> driver_lag_weights(const BsvieDriver& d, double lambda, const TimeGrid& g) {
    const double h = g.h();
    std::vector<double> w(g.N, 0.0);
    for (int lag = 0; lag < g.N; ++lag) {
        double base = d.factor ? d.factor->cell_integral(lag * h, (lag + 1) * h) : h;
        w[lag] = std::exp(-lambda * lag * h) * base;
    }
    return w;
}

double truncate_horizon(const PsiTailSpec& psi, double eta, double c_eta_lambda, double tol,
                        double h) {
    if (!(h > 0.0)) throw std::invalid_argument("truncate_horizon: h must be positive");
    if (tol == kInf) return h;
    if (!(tol > 0.0)) throw std::invalid_argument("truncate_horizon: tol must be positive");
    if (psi.kind == PsiTailSpec::Kind::CompactSupport) {
        return std::ceil(psi.support_T / h - 1e-12) * h;
    }
    double kappa = psi.decay;
    if (!(kappa > eta)) {
        throw std::runtime_error(
            "truncate_horizon: tail norm does not decay (decay <= eta); supply T explicitly");
    }
    // tail(T)^2 = bound^2 e^{-2(kappa-eta) T} / (2 (kappa - eta));
    // require c_eta_lambda * tail(T) <= tol.
    double r = kappa - eta;
    double target = tol / std::max(c_eta_lambda, 1e-300);
    double T = (std::log(psi.bound / (target * std::sqrt(2.0 * r)))) / r;
    if (T <= 0.0) return h;
    return std::max(h, std::ceil(T / h - 1e-12) * h);
}

MSolution solve_trivial(const AdaptedProcess& psi, const FilteredEnsemble& ens,
                        const RegressionBasis* basis) {
    BsvieProblem p;
    p.m = psi.dim;
    p.psi = psi;
    p.driver.zero = true;
    p.driver.depends_y = p.driver.depends_z1 = p.driver.depends_z2 = false;
    p.driver.lip_y = p.driver.lip_z1 = p.driver.lip_z2 = Kernel::zero();
    p.basis = basis;
    BsvieEngine eng(p, ens);
    Iterate sol = eng.level_solve(0.0, psi, nullptr, true);
    MSolution out;
    out.Y = std::move(sol.Y);
    out.Z = std::move(sol.Z);
    out.trace.mode = "trivial";
    finalize_residuals(p, ens, eng, out);
    return out;
}

double msolution_norm(const FilteredEnsemble& ens, const AdaptedProcess& y,
                      const TwoParameterProcess& z, double eta) {
    double a = weighted_sq_norm(ens, y, eta);
    double b = weighted_sq_norm(ens, z, eta);
    return std::sqrt(a * a + b * b);
}

MSolution solve_bsvie(const BsvieProblem& p, const FilteredEnsemble& ens,
                      const BsvieOptions& opts) {
    BsvieMargin mg = p.margin_override
                         ? *p.margin_override
                         : bsvie_margin(p.driver.lip_y, p.driver.lip_z1, p.driver.lip_z2, p.eta,
                                        p.lambda);
    if (!mg.admissible()) {
        throw std::runtime_error("solve_bsvie: (eta, lambda) outside the admissibility domain, "
                                 "margin = " + std::to_string(mg.margin));
    }
    const double norm_sum = 1.0 - mg.margin;
    const double C = mg.c_eta_lambda;

    BsvieEngine eng(p, ens);
    double psi_norm = weighted_sq_norm(ens, p.psi, p.eta);
    eng.set_psi_scale(psi_norm);
    double tol = opts.tol;
    if (tol < 0.0) tol = ens.is_tree() ? 1e-8 : 1e-4 * std::max(psi_norm, 1e-12);

    MSolution out;
    const bool with_z = eng.track_z();

    // One Picard stage at driver strength gamma from base gamma0: each sweep
    // folds (gamma - gamma0) times the driver at the previous iterate into the
    // free term and solves the gamma0-level equation exactly.
    auto run_stage = [&](double gamma0, double gamma, Iterate& x, IterationTrace::Level& lvl,
                         bool final_level) -> bool {
        lvl.gamma0 = gamma0;
        lvl.gamma = gamma;
        lvl.theory_ratio = C * (gamma - gamma0) * norm_sum;
        AdaptedProcess psi_eff = AdaptedProcess::zeros(ens, p.m);
        std::vector<double> dsum(static_cast<std::size_t>(ens.paths()) * p.m);
        int bad_streak = 0;
        double prev_dist = -1.0;
        for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
            for (int i = 0; i <= ens.grid().N; ++i) {
                eng.driver_sum(i, x, dsum);
                for (int path = 0; path < ens.paths(); ++path) {
                    auto dst = psi_eff.at(path, i);
                    auto src = p.psi.at(path, i);
                    for (int c = 0; c < p.m; ++c) {
                        dst[c] = src[c] +
                                 (gamma - gamma0) * dsum[static_cast<std::size_t>(path) * p.m + c];
                    }
                }
            }
            Iterate next = eng.level_solve(gamma0, psi_eff, &x, with_z);
            double dist = y_distance(ens, next.Y, x.Y, p.eta);
            if (with_z) {
                double dz = z_distance(ens, next.Z, x.Z, p.eta);
                dist = std::sqrt(dist * dist + dz * dz);
            }
            x = std::move(next);
            lvl.distances.push_back(dist);
            lvl.sweeps = sweep + 1;
            if (prev_dist >= 0.0 && prev_dist > 0.0) {
                double ratio = dist / prev_dist;
                lvl.measured_ratio = std::max(lvl.measured_ratio, ratio);
                if (ratio >= 1.0) {
                    if (++bad_streak >= 3) return false;
                } else {
                    bad_streak = 0;
                }
                // Plain mode bails out early so continuation can take over.
                if (final_level && gamma0 == 0.0 && gamma == 1.0 &&
                    ratio >= opts.plain_threshold && out.trace.mode == "plain") {
                    return false;
                }
            }
            prev_dist = dist;
            if (dist < tol) return true;
        }
        return false;
    };

    // Plain Picard first; fall back to continuation if the measured one-step
    // contraction ratio is too weak.
    auto initial_guess = [&]() {
        Iterate x0;
        if (opts.start_from_trivial) {
            x0 = eng.level_solve(0.0, p.psi, nullptr, with_z);
        } else {
            x0.Y = AdaptedProcess::zeros(ens, p.m);
            x0.Z = TwoParameterProcess::zeros(ens.paths(), ens.grid().N + 1, ens.grid().N,
                                              p.m * ens.dims());
        }
        return x0;
    };
    Iterate x = initial_guess();
    out.trace.mode = "plain";
    IterationTrace::Level plain_lvl;
    bool done = run_stage(0.0, 1.0, x, plain_lvl, true);
    out.trace.levels.push_back(plain_lvl);
    if (!done) {
        out.trace.mode = "continuation";
        out.trace.levels.clear();
        double delta = opts.continuation_safety / C;
        if (!(delta > 1e-6)) {
            throw std::runtime_error("solve_bsvie: continuation step collapsed (margin too small)");
        }
        x = initial_guess();
        double gamma0 = 0.0;
        while (gamma0 < 1.0) {
            double gamma = std::min(gamma0 + delta, 1.0);
            IterationTrace::Level lvl;
            if (!run_stage(gamma0, gamma, x, lvl, gamma == 1.0)) {
                out.trace.levels.push_back(lvl);
                out.converged = false;
                throw std::runtime_error(
                    "solve_bsvie: non-contraction at continuation level gamma = " +
                    std::to_string(gamma) + ", measured ratio " +
                    std::to_string(lvl.measured_ratio));
            }
            out.trace.levels.push_back(lvl);
            gamma0 = gamma;
        }
    }

    // Final Z extraction for drivers that skipped Z tracking during sweeps.
    if (!with_z) {
        AdaptedProcess psi_eff = AdaptedProcess::zeros(ens, p.m);
        std::vector<double> dsum(static_cast<std::size_t>(ens.paths()) * p.m);
        for (int i = 0; i <= ens.grid().N; ++i) {
            eng.driver_sum(i, x, dsum);
            for (int path = 0; path < ens.paths(); ++path) {
                auto dst = psi_eff.at(path, i);
                auto src = p.psi.at(path, i);
                for (int c = 0; c < p.m; ++c) {
                    dst[c] = src[c] + dsum[static_cast<std::size_t>(path) * p.m + c];
                }
            }
        }
        x = eng.level_solve(0.0, psi_eff, &x, true);
    }

    out.Y = std::move(x.Y);
    out.Z = std::move(x.Z);
    finalize_residuals(p, ens, eng, out);
    return out;
}

AprioriCheck apriori_check(const MSolution& sol, const BsvieProblem& p,
                           const FilteredEnsemble& ens, double tol) {
    BsvieMargin mg = bsvie_margin(p.driver.lip_y, p.driver.lip_z1, p.driver.lip_z2, p.eta,
                                  p.lambda);
    AprioriCheck c;
    c.lhs = msolution_norm(ens, sol.Y, sol.Z, p.eta);
    c.rhs = mg.c_eta_lambda * weighted_sq_norm(ens, p.psi, p.eta);
    c.ok = c.lhs <= c.rhs * (1.0 + tol);
    return c;
}

}  // namespace volterra
