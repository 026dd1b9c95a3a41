#include "volterra/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace volterra {

namespace {

bool finite(double x) { return std::isfinite(x); }

// Lower incomplete gamma gamma(s, x) = int_0^x t^{s-1} e^{-t} dt, s > 0, x >= 0.
// Series for x < s+1, continued fraction for the complement otherwise.
double lower_gamma(double s, double x) {
    if (x <= 0.0) return 0.0;
    const double lg = std::lgamma(s);
    if (x < s + 1.0) {
        double term = 1.0 / s;
        double sum = term;
        for (int k = 1; k < 500; ++k) {
            term *= x / (s + k);
            sum += term;
            if (std::fabs(term) < 1e-17 * std::fabs(sum)) break;
        }
        return sum * std::exp(-x + s * std::log(x));
    }
    // Upper gamma by Lentz continued fraction, then gamma = Gamma - upper.
    const double tiny = 1e-300;
    double b = x + 1.0 - s, c = 1.0 / tiny, d = 1.0 / b, f = d;
    for (int i = 1; i < 500; ++i) {
        double an = -i * (i - s);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        f *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    double upper = std::exp(-x + s * std::log(x)) * f;
    return std::exp(lg) - upper;
}

// int_a^b tau^(beta-1) e^{-r tau} dtau, beta > 0, 0 <= a < b, any real r.
double power_exp_integral(double beta, double r, double a, double b) {
    if (r == 0.0) return (std::pow(b, beta) - std::pow(a, beta)) / beta;
    if (r > 0.0) {
        return (lower_gamma(beta, r * b) - lower_gamma(beta, r * a)) / std::pow(r, beta);
    }
    // Growing exponential: entire series sum_k |r|^k (b^{beta+k} - a^{beta+k}) / (k! (beta+k)).
    const double g = -r;
    double sum = 0.0, powb = std::pow(b, beta), powa = std::pow(a, beta), fact = 1.0, gk = 1.0;
    for (int k = 0; k < 400; ++k) {
        double term = gk / fact * (powb - powa) / (beta + k);
        sum += term;
        if (std::fabs(term) < 1e-17 * std::fabs(sum) && k > 2) break;
        powb *= b;
        powa *= a;
        gk *= g;
        fact *= (k + 1);
    }
    return sum;
}

// 20-point Gauss-Legendre nodes/weights on [-1, 1].
constexpr int kGL = 10;
const double kGLx[kGL] = {0.0765265211334973, 0.2277858511416451, 0.3737060887154196,
                          0.5108670019508271, 0.6360536807265150, 0.7463319064601508,
                          0.8391169718222188, 0.9122344282513259, 0.9639719272779138,
                          0.9931285991850949};
const double kGLw[kGL] = {0.1527533871307258, 0.1491729864726037, 0.1420961093183821,
                          0.1316886384491766, 0.1181945319615184, 0.1019301198172404,
                          0.0832767415767048, 0.0626720483341091, 0.0406014298003869,
                          0.0176140071391521};

template <typename F>
double gauss20(const F& f, double a, double b) {
    const double c = 0.5 * (a + b), hw = 0.5 * (b - a);
    double s = 0.0;
    for (int i = 0; i < kGL; ++i) {
        s += kGLw[i] * (f(c + hw * kGLx[i]) + f(c - hw * kGLx[i]));
    }
    return s * hw;
}

template <typename F>
double simpson_rec(const F& f, double a, double b, double fa, double fm, double fb,
                   double whole, double tol, int depth) {
    double m = 0.5 * (a + b);
    double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    double flm = f(lm), frm = f(rm);
    double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    double delta = left + right - whole;
    if (depth <= 0 || std::fabs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
    return simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

template <typename F>
double adaptive_simpson(const F& f, double a, double b, double tol) {
    double fa = f(a), fb = f(b), m = 0.5 * (a + b), fm = f(m);
    double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return simpson_rec(f, a, b, fa, fm, fb, whole, tol, 40);
}

double bisect_monotone(const std::function<bool(double)>& admissible, double lo, double hi) {
    // admissible(lo) == false, admissible(hi) == true; margin monotone in rho.
    for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
        double mid = 0.5 * (lo + hi);
        (admissible(mid) ? hi : lo) = mid;
    }
    return hi;
}

}  // namespace

Kernel Kernel::constant(double c) {
    Kernel k;
    k.kind = KernelKind::Constant;
    k.scale = c;
    k.validate();
    return k;
}

Kernel Kernel::exponential(double rate, double c) {
    Kernel k;
    k.kind = KernelKind::Exponential;
    k.rate = rate;
    k.scale = c;
    k.validate();
    return k;
}

Kernel Kernel::fractional(double alpha, double c) {
    Kernel k;
    k.kind = KernelKind::Fractional;
    k.alpha = alpha;
    k.scale = c;
    k.validate();
    return k;
}

Kernel Kernel::power_exponential(double alpha, double rate, double c) {
    Kernel k;
    k.kind = KernelKind::PowerExponential;
    k.alpha = alpha;
    k.rate = rate;
    k.scale = c;
    k.validate();
    return k;
}

void Kernel::validate() const {
    if (!finite(alpha) || !finite(rate) || !finite(scale)) {
        throw std::invalid_argument("kernel parameter is not finite");
    }
    if (scale < 0.0) throw std::invalid_argument("kernel scale must be >= 0");
    if (kind == KernelKind::Fractional || kind == KernelKind::PowerExponential) {
        if (!(alpha > 0.5 && alpha < 1.0)) {
            throw std::invalid_argument("fractional exponent alpha must lie in (1/2, 1)");
        }
    }
}

double Kernel::eval(double tau) const {
    switch (kind) {
        case KernelKind::Zero: return 0.0;
        case KernelKind::Constant: return scale;
        case KernelKind::Exponential: return scale * std::exp(-rate * tau);
        case KernelKind::Fractional: return scale * std::pow(tau, alpha - 1.0);
        case KernelKind::PowerExponential:
            return scale * std::pow(tau, alpha - 1.0) * std::exp(-rate * tau);
    }
    return 0.0;
}

double Kernel::cell_integral(double a, double b) const {
    if (!(a >= 0.0 && b > a)) throw std::invalid_argument("cell_integral needs 0 <= a < b");
    switch (kind) {
        case KernelKind::Zero: return 0.0;
        case KernelKind::Constant: return scale * (b - a);
        case KernelKind::Exponential:
            if (rate == 0.0) return scale * (b - a);
            return scale * (std::exp(-rate * a) - std::exp(-rate * b)) / rate;
        case KernelKind::Fractional:
            return scale * (std::pow(b, alpha) - std::pow(a, alpha)) / alpha;
        case KernelKind::PowerExponential:
            return scale * power_exp_integral(alpha, rate, a, b);
    }
    return 0.0;
}

int Kernel::p_integrability() const {
    switch (kind) {
        case KernelKind::Zero:
        case KernelKind::Constant:
        case KernelKind::Exponential: return 1;
        case KernelKind::Fractional:
        case KernelKind::PowerExponential:
            // tau^(alpha-1) with alpha > 1/2 is L^2 near 0, L^1 as well; the
            // square norm is what constrains alpha, so report 1.
            return 1;
    }
    return 1;
}

double weighted_norm(const Kernel& k, int p, double rho) {
    if (p != 1 && p != 2) throw std::invalid_argument("weighted_norm: p must be 1 or 2");
    if (!finite(rho)) throw std::invalid_argument("weighted_norm: rho must be finite");
    if (k.is_zero()) return 0.0;
    const double c = k.scale;
    switch (k.kind) {
        case KernelKind::Zero: return 0.0;
        case KernelKind::Constant: {
            double r = p * rho;
            if (r <= 0.0) return kInf;
            return c * std::pow(1.0 / r, 1.0 / p);
        }
        case KernelKind::Exponential: {
            double r = p * (rho + k.rate);
            if (r <= 0.0) return kInf;
            return c * std::pow(1.0 / r, 1.0 / p);
        }
        case KernelKind::Fractional: {
            if (rho <= 0.0) return kInf;
            double beta = p * (k.alpha - 1.0) + 1.0;  // > 0 for p in {1,2}, alpha > 1/2
            double integral = std::tgamma(beta) / std::pow(p * rho, beta);
            return c * std::pow(integral, 1.0 / p);
        }
        case KernelKind::PowerExponential:
            return weighted_norm_quadrature(k, p, rho);
    }
    return kInf;
}

double weighted_norm_quadrature(const Kernel& k, int p, double rho) {
    if (p != 1 && p != 2) throw std::invalid_argument("weighted_norm: p must be 1 or 2");
    if (k.is_zero()) return 0.0;
    // Effective decay of K(t)^p e^{-p rho t}: polynomial factor t^{p(alpha-1)}
    // is bounded on [1,inf), so the integral is finite iff rho + rate > 0.
    const double rho_eff = rho + (k.kind == KernelKind::Exponential ||
                                  k.kind == KernelKind::PowerExponential
                                      ? k.rate
                                      : 0.0);
    if (rho_eff <= 0.0) return kInf;

    const double beta = (k.kind == KernelKind::Fractional || k.kind == KernelKind::PowerExponential)
                            ? p * (k.alpha - 1.0) + 1.0
                            : 1.0;
    auto integrand = [&](double t) {
        double v = k.eval(t);
        return std::pow(v, p) * std::exp(-p * rho * t);
    };

    // (0, 1]: 60 geometrically graded cells toward the origin.
    double total = 0.0;
    double hi = 1.0;
    for (int cell = 0; cell < 60; ++cell) {
        double lo = hi * 0.5;
        total += gauss20(integrand, lo, hi);
        hi = lo;
    }
    // Innermost cell [0, 2^-60]: analytic power-moment series of the full
    // exponential factor.
    total += std::pow(k.scale, p) * power_exp_integral(beta, p * (rho + k.rate), 0.0, hi);

    // [1, T]: adaptive Simpson, truncated where the integrand is negligible.
    double f1 = integrand(1.0);
    if (f1 > 0.0) {
        double T = 1.0 + (40.0 * std::log(10.0)) / (p * rho_eff);
        total += adaptive_simpson(integrand, 1.0, T, 1e-12 * std::max(total, f1));
    }
    return std::pow(total, 1.0 / p);
}

double critical_weight(const Kernel& kb, const Kernel& ksigma, std::string* diagnostic) {
    kb.validate();
    ksigma.validate();
    auto margin_ok = [&](double rho) {
        double s = weighted_norm(kb, 1, rho) + weighted_norm(ksigma, 2, rho);
        return s <= 1.0;
    };
    if (kb.is_zero() && ksigma.is_zero()) return -kInf;

    // Expand upward for an admissible weight.
    double hi = 1e-8;
    if (!margin_ok(hi)) {
        hi = 1.0;
        while (!margin_ok(hi)) {
            hi *= 2.0;
            if (hi > 1e8) {
                if (diagnostic) *diagnostic = "norm sum exceeds 1 on the whole bracket [1e-8, 1e8]";
                return kInf;
            }
        }
    }
    // Expand downward for an inadmissible weight (the inf can be negative).
    double lo = std::min(hi, 1e-8);
    if (margin_ok(lo)) {
        lo = -1e-8;
        while (margin_ok(lo)) {
            lo *= 2.0;
            if (lo < -1e8) return -kInf;  // sum < 1 everywhere it is finite
        }
    }
    return bisect_monotone(margin_ok, lo, hi);
}

BsvieMargin bsvie_margin(const Kernel& kgy, const Kernel& kgz1, const Kernel& kgz2,
                         double eta, double lambda) {
    kgy.validate();
    kgz1.validate();
    kgz2.validate();
    double sum = weighted_norm(kgy, 1, eta + lambda) + weighted_norm(kgz1, 2, lambda) +
                 weighted_norm(kgz2, 2, eta + lambda);
    BsvieMargin m;
    m.margin = 1.0 - sum;  // -inf when any norm diverges
    m.c_eta_lambda = m.margin > 0.0 ? std::sqrt(2.0) / m.margin : kInf;
    return m;
}

ControlAdmissibility control_admissible(const ControlKernels& k, double mu, double lambda) {
    k.b_x.validate();
    k.b_u.validate();
    k.sigma_x.validate();
    k.sigma_u.validate();
    auto admissible_at = [&](double rho) {
        double u_norms = weighted_norm(k.b_u, 1, rho) + weighted_norm(k.sigma_u, 2, rho);
        if (!std::isfinite(u_norms)) return false;
        double x_norms = weighted_norm(k.b_x, 1, rho) + weighted_norm(k.sigma_x, 2, rho);
        return x_norms <= 1.0;
    };

    ControlAdmissibility out;
    if (admissible_at(0.0)) {
        out.rho_star = 0.0;
    } else {
        double hi = 1.0;
        while (!admissible_at(hi)) {
            hi *= 2.0;
            if (hi > 1e8) {
                out.failure = "no admissible rho in [0, 1e8]";
                out.rho_star = kInf;
                return out;
            }
        }
        out.rho_star = bisect_monotone(admissible_at, 0.0, hi);
    }
    if (!(mu > out.rho_star)) {
        out.failure = "mu <= rho_star";
        return out;
    }
    if (!(lambda >= 2.0 * mu)) {
        out.failure = "lambda < 2*mu";
        return out;
    }
    out.ok = true;
    return out;
}

DomainReport svie_domain_report(const Kernel& kb, const Kernel& ksigma, double mu) {
    DomainReport r;
    r.family = "svie";
    std::string diag;
    r.rho_star = critical_weight(kb, ksigma, &diag);
    r.diagnostic = diag;
    double sum = weighted_norm(kb, 1, mu) + weighted_norm(ksigma, 2, mu);
    r.margin = 1.0 - sum;
    r.admissible = r.margin > 0.0;
    r.contraction = r.admissible ? 1.0 / r.margin : kInf;
    return r;
}

}  // namespace volterra
