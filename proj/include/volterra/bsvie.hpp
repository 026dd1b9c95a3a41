#pragma once

#include "volterra/ensemble.hpp"
#include "volterra/kernel.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace volterra {

/// Driver g(t, s, y, z1, z2) of a Type-I/Type-II BSVIE, evaluated on grid
/// nodes (i = t-node, j = s-step) per path. A singular driver must be
/// declared in factored form g = K(s-t) * g_reduced(t, s, ...); the solver
/// then uses the exact kernel cell weight and evaluates g_reduced at the
/// left point.
struct BsvieDriver {
    std::function<void(int i, int j, int path, std::span<const double> y,
                       std::span<const double> z1, std::span<const double> z2,
                       std::span<double> out)>
        eval;
    std::optional<Kernel> factor;
    Kernel lip_y, lip_z1, lip_z2;
    bool depends_y = true, depends_z1 = true, depends_z2 = true;
    bool zero = false;
};

struct BsvieProblem {
    int m = 1;
    AdaptedProcess psi;  // free term: per-path, per-node values (need not be adapted)
    BsvieDriver driver;
    double lambda = 0.0;  // discount rate
    double eta = 0.0;     // target weight of the solution space
    const RegressionBasis* basis = nullptr;
    // Caller-certified margin for drivers whose Lipschitz envelope is a sum of
    // kernels the single-kernel fields cannot express.
    std::optional<BsvieMargin> margin_override;
};

struct IterationTrace {
    struct Level {
        double gamma0 = 0.0, gamma = 0.0;
        double theory_ratio = 0.0;  // C_{eta,lambda} (gamma - gamma0) * kernel norm sum
        std::vector<double> distances;
        double measured_ratio = 0.0;  // max over consecutive-sweep distance ratios
        int sweeps = 0;
    };
    std::vector<Level> levels;
    std::string mode;  // "trivial" | "plain" | "continuation"
};

struct MSolution {
    AdaptedProcess Y;       // m per path/node
    TwoParameterProcess Z;  // m*d on the (N+1) x N grid
    double equation_residual = 0.0;  // weighted norm of the equation defect
    double m_residual = 0.0;         // weighted norm of the M-constraint defect
    IterationTrace trace;
    bool converged = true;
};

struct BsvieOptions {
    double tol = -1.0;  // < 0: auto (1e-8 tree, 1e-4 * ||psi|| Monte Carlo)
    int max_sweeps = 500;
    double plain_threshold = 0.95;      // switch to continuation at this measured ratio
    double continuation_safety = 0.9;   // delta = safety / C_{eta,lambda}
    bool start_from_trivial = false;    // initial guess: trivial solve instead of zero
};

/// Declared tail envelope of a free term, used to pick the truncation horizon.
struct PsiTailSpec {
    enum class Kind { CompactSupport, ExponentialEnvelope } kind;
    double support_T = 0.0;  // CompactSupport: psi vanishes beyond this time
    double bound = 1.0;      // ExponentialEnvelope: |psi(t)| <= bound * e^{-decay t}
    double decay = 0.0;
};

/// Smallest grid-representable horizon T with
/// c_eta_lambda * ||psi||_{L^{2,eta}(T,inf)} <= tol.
double truncate_horizon(const PsiTailSpec& psi, double eta, double c_eta_lambda, double tol,
                        double h);

/// Adapted M-solution of Y(t) = psi(t) - int_t^inf Z(t,s) dW(s):
/// Y(t_i) = E_{t_i}[psi(t_i)], Z from martingale representation.
MSolution solve_trivial(const AdaptedProcess& psi, const FilteredEnsemble& ens,
                        const RegressionBasis* basis = nullptr);

/// Adapted M-solution by Picard iteration, with homotopy continuation in the
/// driver strength when the measured one-step contraction is too weak.
MSolution solve_bsvie(const BsvieProblem& p, const FilteredEnsemble& ens,
                      const BsvieOptions& opts = {});

struct AprioriCheck {
    double lhs = 0.0;  // discrete M-norm of the solution
    double rhs = 0.0;  // C_{eta,lambda} * ||psi||
    bool ok = false;
};

AprioriCheck apriori_check(const MSolution& sol, const BsvieProblem& p,
                           const FilteredEnsemble& ens, double tol = 0.05);

/// Discrete M-norm sqrt(||Y||^2_{2,eta} + ||Z||^2_{L2,eta}).
double msolution_norm(const FilteredEnsemble& ens, const AdaptedProcess& y,
                      const TwoParameterProcess& z, double eta);

/// e^{-lambda (s_j - t_i)} * (factored cell weight or h): the j-th summand
/// weight of the discrete driver integral.
std::vector<double> driver_lag_weights(const BsvieDriver& d, double lambda, const TimeGrid& g);

}  // namespace volterra
