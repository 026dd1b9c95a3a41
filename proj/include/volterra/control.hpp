#pragma once

#include "volterra/bsvie.hpp"
#include "volterra/ensemble.hpp"
#include "volterra/kernel.hpp"
#include "volterra/linear.hpp"
#include "volterra/svie.hpp"

#include <functional>
#include <optional>
#include <string>

namespace volterra {

/// Controlled coefficient b(t,s,x,u) (or sigma, out dim n*d) with its partial
/// derivatives. A factored declaration f = K(t-s) * f_reduced(s,x,u) routes
/// the singular time profile through exact kernel cell weights.
struct ControlCoeff {
    bool zero = false;
    std::optional<Kernel> factor;
    // Full forms: (t, s, path, x, u, out).
    std::function<void(double, double, int, std::span<const double>, std::span<const double>,
                       std::span<double>)>
        eval;
    std::function<void(double, double, int, std::span<const double>, std::span<const double>,
                       std::span<double>)>
        dx;  // drift: n x n row-major d(out_r)/d(x_c); diffusion: d blocks of n x n
    std::function<void(double, double, int, std::span<const double>, std::span<const double>,
                       std::span<double>)>
        du;  // drift: n x ell; diffusion: d blocks of n x ell
    // Reduced forms: (s, path, x, u, out), used when `factor` is set.
    std::function<void(double, int, std::span<const double>, std::span<const double>,
                       std::span<double>)>
        eval_reduced, dx_reduced, du_reduced;
    bool dx_zero = false, du_zero = false;
};

struct RunningCost {
    std::function<double(double t, std::span<const double> x, std::span<const double> u)> eval;
    std::function<void(double, std::span<const double>, std::span<const double>,
                       std::span<double>)>
        dx;  // out n
    std::function<void(double, std::span<const double>, std::span<const double>,
                       std::span<double>)>
        du;  // out ell
    double growth_C = 1.0;  // quadratic-growth constant (metadata)
};

struct ControlProblem {
    int n = 1, ell = 1;
    ControlCoeff drift;      // out n
    ControlCoeff diffusion;  // out n*d
    RunningCost cost;
    std::function<void(std::span<double>)> project;  // identity when empty (U = R^ell)
    AdaptedProcess phi;
    double mu = 1.0, lambda = 2.0;
    ControlKernels kernels;  // K_{b,x}, K_{b,u}, K_{sigma,x}, K_{sigma,u}
    std::function<ControlAdmissibility(double mu, double lambda)> admissibility;  // optional
    // Optional sharper margin for the adjoint equation at (eta, lambda), for
    // problems whose state envelope is a sum of kernels.
    std::function<BsvieMargin(double eta, double lambda)> adjoint_margin;
    const RegressionBasis* basis = nullptr;
    bool convexity_certificate = false;  // caller-declared convex Hamiltonian
};

/// Throws when (mu, lambda) fails the admissibility clause; returns the report.
ControlAdmissibility require_admissible(const ControlProblem& p);

/// State trajectory X^u from the controlled SVIE.
AdaptedProcess solve_state(const ControlProblem& p, const AdaptedProcess& u,
                           const FilteredEnsemble& ens);

/// Discounted cost J_lambda(u) = E[sum_i e^{-lambda t_i} h(t_i, X_i, u_i) h].
double control_cost(const ControlProblem& p, const AdaptedProcess& u, const FilteredEnsemble& ens,
                    AdaptedProcess* state_out = nullptr);

/// Adjoint BSVIE: free term h_x along (X, u), Type-II driver
/// b_x(s,t)^T y + sum_k sigma^k_x(s,t)^T z2^k with the transposed
/// product-integration weights of the forward scheme, weight -mu, discount lambda.
MSolution adjoint_solve(const ControlProblem& p, const AdaptedProcess& u,
                        const AdaptedProcess& X, const FilteredEnsemble& ens);

struct OptimalityReport {
    double J = 0.0;
    AdaptedProcess G;  // stationarity residual process (dim ell)
    double r = 0.0;    // || u - Pi_U(u - G) || in the discrete weighted norm (beta = -mu)
    double adjoint_equation_residual = 0.0;
    double adjoint_m_residual = 0.0;
    bool convexity_certificate = false;
};

/// Hamiltonian-gradient process G and its projected stationarity measure r.
OptimalityReport stationarity_residual(const ControlProblem& p, const AdaptedProcess& u,
                                       const FilteredEnsemble& ens);

struct OptimizeOptions {
    double tol = 1e-6;
    int max_iters = 500;
    double armijo_c = 1e-4;
    int max_backtracks = 30;
};

struct OptimizeTraceRow {
    int iter = 0;
    double J = 0.0, r = 0.0, step = 0.0;
};

struct OptimizeResult {
    AdaptedProcess u;
    OptimalityReport report;
    std::vector<OptimizeTraceRow> trace;
    std::string status;  // "converged" | "stalled" | "max_iters"
};

/// Projected gradient with Armijo backtracking on J_lambda.
OptimizeResult optimize(const ControlProblem& p, const AdaptedProcess& u0,
                        const FilteredEnsemble& ens, const OptimizeOptions& opts = {});

// ---------------------------------------------------------------------------
// Worked problem families (scalar builders; the ControlProblem machinery
// itself is dimension-general)
// ---------------------------------------------------------------------------

/// Scalar LQ family: dX = (A x + B u) ds + (C x + D u) dW with kernel profiles
/// A,B,C,D and cost (m1 x^2 + m2 u^2 + 2 m3 x u)/2.
struct LqSpec {
    Kernel A = Kernel::zero(), B = Kernel::zero(), C = Kernel::zero(), D = Kernel::zero();
    double m1 = 1.0, m2 = 1.0, m3 = 0.0;
    double x0 = 1.0;
    double mu = 1.0, lambda = 2.0;
};
ControlProblem make_lq_problem(const LqSpec& spec, const FilteredEnsemble& ens);

/// Classical SDE family: t-independent linear coefficients
/// b = bx x + bu u + b0, sigma = sx x + su u + s0, quadratic cost.
struct SdeSpec {
    double bx = 0.0, bu = 0.0, b0 = 0.0;
    double sx = 0.0, su = 0.0, s0 = 0.0;
    double m1 = 1.0, m2 = 1.0, m3 = 0.0;
    double x0 = 1.0;
    double mu = 1.0, lambda = 2.0;
};
ControlProblem make_sde_problem(const SdeSpec& spec, const FilteredEnsemble& ens);

/// Fractional family: mild-form Caputo dynamics of order alpha in (1/2, 1),
/// coefficients K(tau) = tau^{alpha-1}/Gamma(alpha) times the linear SDE part.
struct CaputoSpec {
    double alpha = 0.75;
    double bx = 0.0, bu = 0.0, b0 = 0.0;
    double sx = 0.0, su = 0.0, s0 = 0.0;
    double m1 = 1.0, m2 = 1.0, m3 = 0.0;
    double x0 = 1.0;
    double lambda = 2.0;
    double mu = -1.0;  // < 0: defaults to lambda / 2
};
ControlProblem make_caputo_problem(const CaputoSpec& spec, const FilteredEnsemble& ens);

/// f_alpha(rho) = L_bx rho^{-alpha} + L_sx sqrt(Gamma(2a-1))/Gamma(a) (2rho)^{-(a-1/2)}.
double caputo_admissibility_fn(double alpha, double L_bx, double L_sx, double rho);

/// Stochastic integro-differential family (scalar blocks), lifted to a
/// 5-dimensional SVIE with state [x, int A1 x, int A2 u, int A3 x, int A4 u].
struct IntegroSpec {
    double x0 = 1.0;
    double bx = 0.0, bu = 0.0, b1 = 0.0, b2 = 0.0, b0 = 0.0;
    double sx = 0.0, su = 0.0, s3 = 0.0, s4 = 0.0;
    Kernel A1 = Kernel::zero(), A2 = Kernel::zero(), A3 = Kernel::zero(), A4 = Kernel::zero();
    double m1 = 1.0, m2 = 1.0, m3 = 0.0;
    double mu = 1.0, lambda = 2.0;
};

struct IntegroLifted {
    ControlProblem problem;  // dimension 5
    IntegroSpec spec;
};

/// Builds the lifted problem; throws (naming the clause) when the example's
/// admissibility condition fails.
IntegroLifted integro_lift(const IntegroSpec& spec, const FilteredEnsemble& ens);

/// Expanded scalar optimality condition of the integro-differential example,
/// computed from the lifted adjoint blocks; node-wise equal to the lifted G.
AdaptedProcess integro_expanded_condition(const IntegroLifted& lifted, const AdaptedProcess& u,
                                          const FilteredEnsemble& ens);

struct AnticipatedBsdeCheck {
    AdaptedProcess cY, cZ;    // J_n-projected BSDE reduction of the lifted adjoint
    AdaptedProcess residual;  // path-wise anticipated-BSDE defect per step
    double residual_norm = 0.0;
};

/// Forms (cY, cZ) from the lifted adjoint and evaluates the discrete
/// anticipated-BSDE residual.
AnticipatedBsdeCheck verify_anticipated_bsde(const IntegroLifted& lifted,
                                             const AdaptedProcess& u,
                                             const FilteredEnsemble& ens);

}  // namespace volterra
