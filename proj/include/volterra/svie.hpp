#pragma once

#include "volterra/ensemble.hpp"
#include "volterra/kernel.hpp"

#include <functional>
#include <optional>

namespace volterra {

/// Coefficient of a forward SVIE: full form f(t, s, x, u) or the factored
/// form f = K(t-s) * f_reduced(s, x, u) declared through `factor`, which
/// enables weight-exact product integration across the diagonal singularity.
struct SvieCoeff {
    /// Full evaluation; ignored when `factor` is set.
    std::function<void(double t, double s, int path, std::span<const double> x,
                       std::span<const double> u, std::span<double> out)>
        eval;
    /// Reduced evaluation f_reduced(s, x, u); required when `factor` is set.
    std::function<void(double s, int path, std::span<const double> x,
                       std::span<const double> u, std::span<double> out)>
        eval_reduced;
    std::optional<Kernel> factor;
    Kernel lip_x;  // Lipschitz envelope in the state
    Kernel lip_u;  // Lipschitz envelope in the control (zero if control-free)
    bool zero = false;

    bool factored() const { return factor.has_value(); }
};

struct SvieProblem {
    int n = 1;
    AdaptedProcess phi;      // free term (adapted)
    SvieCoeff drift;         // out dim n
    SvieCoeff diffusion;     // out dim n*d
    const AdaptedProcess* control = nullptr;  // optional, dim = problem's control dim
    double mu = 1.0;         // registered weight for the admissibility check
    bool skip_lipschitz_check = false;
    // Set by callers that have already certified admissibility at mu through a
    // sharper criterion than the single-kernel envelopes can express.
    bool skip_admissibility_check = false;
};

struct SvieDiagnostics {
    double margin = 0.0;           // 1 - [K_bx]_1(mu) - [K_sx]_2(mu)
    bool plain_weight_warning = false;  // general coefficient fell back to rectangle weights
};

/// Explicit left-point product-integration time stepping for
/// X(t) = phi(t) + int_0^t b ds + int_0^t sigma dW. Refuses when the declared
/// envelopes are inadmissible at the registered weight mu.
AdaptedProcess solve_svie(const SvieProblem& p, const FilteredEnsemble& ens,
                          SvieDiagnostics* diag = nullptr);

struct StabilityGap {
    double lhs = 0.0;  // weighted norm of X - X'
    double rhs = 0.0;  // C_mu * weighted norm of the perturbation free term
    bool ok = false;   // lhs <= rhs * (1 + eps_tol)
};

/// Discrete analogue of the forward stability estimate: compares the solution
/// gap against C_mu times the perturbation assembled along X'.
StabilityGap stability_gap(const SvieProblem& p, const SvieProblem& pprime,
                           const FilteredEnsemble& ens, double eps_tol = 1e-9);

/// Product-integration weights W[i][j] = cell integral of the factor kernel
/// over [t_i - s_{j+1}, t_i - s_j] (or plain h when no factor is declared).
std::vector<double> product_weights(const SvieCoeff& c, const TimeGrid& grid);

}  // namespace volterra
