#pragma once

#include "volterra/bsvie.hpp"
#include "volterra/ensemble.hpp"
#include "volterra/kernel.hpp"

#include <functional>

namespace volterra {

/// Linear Type-I BSVIE
///   Y(t) = psi(t) + int_t^inf e^{-lambda(s-t)} { A(t,s) Y(s) + sum_k B_k(t,s) Z^k(t,s) } ds
///          - int_t^inf Z(t,s) dW(s)
/// with |A| <= K_A in L^{1,*} and (sum_k |B_k|^2)^{1/2} <= K_B in L^{2,*}.
struct LinearBsvieSpec {
    int m = 1;
    std::function<void(double t, double s, int path, std::span<double> out)> A;  // m*m
    std::function<void(double t, double s, int path, int k, std::span<double> out)> B;  // m*m
    Kernel KA, KB;
    double lambda = 0.0;
    double eta = 0.0;
    bool A_zero = false, B_zero = false;
    const RegressionBasis* basis = nullptr;

    double series_ratio() const {
        return weighted_norm(KA, 1, eta + lambda) / (1.0 - weighted_norm(KB, 2, lambda));
    }
    bool admissible() const {
        return weighted_norm(KA, 1, eta + lambda) + weighted_norm(KB, 2, lambda) < 1.0;
    }
};

/// Linear forward SVIE dX = C X ds + sum_k D_k X dW_k against which the
/// duality principle is checked.
struct LinearSvieSpec {
    int n = 1;
    std::function<void(double t, double s, int path, std::span<double> out)> C;  // n*n
    std::function<void(double t, double s, int path, int k, std::span<double> out)> D;  // n*n
    Kernel KC, KD;
    bool C_zero = false, D_zero = false;
};

/// Fundamental solution Phi(t_i, s_j), j >= i, of the row-wise linear SDE
///   Phi(t, s) = I + sum_k int_t^s e^{-lambda(r-t)} Phi(t, r) B_k(t, r) dW_k(r),
/// stored on the (N+1) x (N+1) node-node grid (dim m*m). Phi(t, inf) is
/// identified with the last column.
TwoParameterProcess fundamental_phi(const LinearBsvieSpec& spec, const FilteredEnsemble& ens);

struct ResolventDiagnostics {
    int terms = 0;
    std::vector<double> term_norms;  // weighted norm of each Xi_i
    double ratio_bound = 0.0;        // [K_A]_1(eta+lambda) / (1 - [K_B]_2(lambda))
};

/// Resolvent series R = sum Xi_i with Xi_1 = Phi A and
/// Xi_{i+1}(t,s) = int_t^s Xi_i(t,r) Xi_1(r,s) dr (left-rectangle composition),
/// truncated when the last term's weighted norm drops below series_tol
/// relative to the Xi_1 norm. Refuses when the geometric ratio is >= 1.
TwoParameterProcess resolvent(const LinearBsvieSpec& spec, const TwoParameterProcess& phi,
                              const FilteredEnsemble& ens, double series_tol = 1e-10,
                              ResolventDiagnostics* diag = nullptr);

struct VocResult {
    AdaptedProcess Y;
    double gap = 0.0;  // weighted-norm distance to the solve_bsvie solution
};

/// Variation-of-constants representation
///   Y(t) = E_t[ Phi(t,inf) psi(t) + int_t^inf e^{-lambda(s-t)} R(t,s) Phi(s,inf) psi(s) ds ],
/// optionally cross-validated against solve_bsvie on the same data.
VocResult variation_of_constants(const LinearBsvieSpec& spec, const AdaptedProcess& psi,
                                 const FilteredEnsemble& ens, bool compare_with_solver = false);

struct DualityResult {
    double lhs = 0.0;  // E int e^{-lambda t} <psi, X> dt
    double rhs = 0.0;  // E int e^{-lambda t} <Y, phi> dt
    double gap = 0.0;
};

/// Duality principle: forward X from (C, D, phi), backward (Y, Z) from the
/// transposed Type-II BSVIE with free term psi; requires eta+lambda >= mu > rho_{C,D}.
DualityResult duality_check(const LinearSvieSpec& fwd, const AdaptedProcess& phi,
                            const AdaptedProcess& psi, double mu, double eta, double lambda,
                            const FilteredEnsemble& ens);

struct BsdeReduction {
    AdaptedProcess cY;        // E_t[int_t^inf e^{-lambda(s-t)} Y(s) ds]
    AdaptedProcess cZ;        // int_t^inf e^{-lambda(s-t)} Z(s,t) ds
    AdaptedProcess residual;  // path-wise discrete BSDE defect per step
    double residual_norm = 0.0;
};

/// Reduces an M-solution to the associated infinite-horizon BSDE pair;
/// requires lambda >= 2 mu > 0.
BsdeReduction bsvie_to_bsde(const MSolution& sol, double lambda, double mu,
                            const FilteredEnsemble& ens, const RegressionBasis* basis = nullptr);

}  // namespace volterra
