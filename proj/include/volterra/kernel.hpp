#pragma once

#include <limits>
#include <optional>
#include <string>

namespace volterra {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Scalar convolution coefficient tau -> K(tau) with singularity/decay metadata.
/// Envelope kernels bound Lipschitz constants of SVIE/BSVIE coefficients; the
/// weighted norms [K]_p(rho) drive every admissibility domain.
enum class KernelKind {
    Zero,
    Constant,          // K(tau) = c
    Exponential,       // K(tau) = c * exp(-rate * tau)
    Fractional,        // K(tau) = c * tau^(alpha-1), alpha in (1/2, 1)
    PowerExponential,  // K(tau) = c * tau^(alpha-1) * exp(-rate * tau)
};

struct Kernel {
    KernelKind kind = KernelKind::Zero;
    double alpha = 1.0;  // power exponent for Fractional / PowerExponential
    double rate = 0.0;   // exponential decay rate (may be negative: growth at infinity)
    double scale = 0.0;  // c >= 0

    static Kernel zero() { return {}; }
    static Kernel constant(double c);
    static Kernel exponential(double rate, double c);
    static Kernel fractional(double alpha, double c);
    static Kernel power_exponential(double alpha, double rate, double c);

    bool is_zero() const { return kind == KernelKind::Zero || scale == 0.0; }

    double eval(double tau) const;

    /// Exact integral of K over a cell [a, b], 0 <= a < b. Finite for every
    /// kernel kind even when the cell touches the singularity at 0.
    double cell_integral(double a, double b) const;

    /// Smallest p-class the kernel belongs to (metadata).
    int p_integrability() const;

    /// Throws std::invalid_argument on parameter violations (NaN, alpha out of
    /// (1/2,1), negative scale).
    void validate() const;
};

/// [K]_p(rho) = (int_0^inf e^{-p rho t} K(t)^p dt)^{1/p}, p in {1,2}.
/// Closed form for Zero/Constant/Exponential/Fractional; quadrature for
/// PowerExponential. Returns +inf when the integral diverges.
double weighted_norm(const Kernel& k, int p, double rho);

/// Generic quadrature route for the same quantity: graded geometric cells on
/// (0,1] (ratio 1/2, 60 cells, the innermost cell by analytic power-moment
/// series) plus adaptive Simpson on [1, inf) truncated where the integrand
/// drops below 1e-16 of its value at 1.
double weighted_norm_quadrature(const Kernel& k, int p, double rho);

/// rho_{b,sigma} = inf{ rho : [K_b]_1(rho) + [K_sigma]_2(rho) <= 1 }.
/// Returns -inf when the sum stays below 1 on the whole searchable range and
/// +inf (with a diagnostic) when it never drops to 1.
double critical_weight(const Kernel& kb, const Kernel& ksigma, std::string* diagnostic = nullptr);

struct BsvieMargin {
    double margin = 0.0;         // 1 - [K_{g,y}]_1(eta+lambda) - [K_{g,z1}]_2(lambda) - [K_{g,z2}]_2(eta+lambda)
    double c_eta_lambda = kInf;  // sqrt(2)/margin when margin > 0, else +inf
    bool admissible() const { return margin > 0.0; }
};

/// (eta, lambda) lies in the driver's admissibility domain iff margin > 0.
BsvieMargin bsvie_margin(const Kernel& kgy, const Kernel& kgz1, const Kernel& kgz2,
                         double eta, double lambda);

struct ControlKernels {
    Kernel b_x, b_u, sigma_x, sigma_u;
};

struct ControlAdmissibility {
    bool ok = false;
    double rho_star = kInf;  // inf{rho >= 0 : u-norms finite and x-norm sum <= 1}
    std::string failure;     // names the violated clause when !ok
};

/// Checks mu > rho_star and lambda >= 2 mu for the controlled SVIE kernel set.
ControlAdmissibility control_admissible(const ControlKernels& k, double mu, double lambda);

/// Report emitted by the domain calculus (CLI-facing).
struct DomainReport {
    std::string family;       // "svie" | "bsvie" | "control"
    double rho_star = kInf;   // critical weight (families svie/control)
    double margin = 0.0;      // margin at the probed point
    double contraction = kInf;// C_mu or C_{eta,lambda} at the probed point
    bool admissible = false;
    std::string diagnostic;
};

/// Margin and contraction constant of the forward SVIE at weight mu:
/// margin = 1 - [K_b]_1(mu) - [K_sigma]_2(mu), C_mu = 1/margin.
DomainReport svie_domain_report(const Kernel& kb, const Kernel& ksigma, double mu);

}  // namespace volterra
