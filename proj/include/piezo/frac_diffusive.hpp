#pragma once

// Diffusive realization of the exponentially weighted Caputo derivative
//
//     d^{a,eta} f(t) = 1/Gamma(1-a) * int_0^t exp(-eta (t-s)) (t-s)^{-a} f'(s) ds
//
// as a bank of first-order modes phi(xi, t) driven by the input u = f':
//
//     phi_t + (xi^2 + eta) phi = mu(xi) u,     mu(xi) = |xi|^{(2a-1)/2},
//     output = sin(a pi)/pi * int_R mu(xi) phi(xi, t) dxi.
//
// The xi-integral is replaced by a positive quadrature on geometric nodes; the
// even symmetry in xi is folded into the weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "piezo/error.hpp"

namespace piezo {

/// Order, exponential weight and feedback gain of one fractional boundary damper.
struct FracParams {
    double a = 0.5;     ///< order, 0 < a < 1
    double eta = 1.0;   ///< exponential weight (1/time), > 0
    double gain = 1.0;  ///< feedback coefficient l_i; 0 switches the damper off

    /// sin(a pi)/pi, the prefactor of the output functional.
    double output_scale() const { return std::sin(a * std::numbers::pi) / std::numbers::pi; }

    std::vector<std::string> violations(const std::string& prefix = "") const {
        std::vector<std::string> out;
        if (!(a > 0.0 && a < 1.0)) out.push_back(prefix + "a must satisfy 0 < a < 1");
        if (!(eta > 0.0)) out.push_back(prefix + "eta must be > 0");
        if (!(gain >= 0.0) || !std::isfinite(gain)) out.push_back(prefix + "gain must be >= 0");
        return out;
    }

    void validate() const {
        auto v = violations();
        if (!v.empty()) throw DomainError(v.front());
    }

    friend bool operator==(const FracParams&, const FracParams&) = default;
};

namespace detail {
inline void require_order(double a) {
    if (!(a > 0.0 && a < 1.0)) throw DomainError("fractional order a must lie in (0,1)");
}
}  // namespace detail

/// Kernel mu(xi) = |xi|^{(2a-1)/2}.
inline double evaluate_mu(double xi, double a) {
    detail::require_order(a);
    if (xi < 0.0) throw DomainError("evaluate_mu: xi must be >= 0");
    const double e = (2.0 * a - 1.0) / 2.0;
    if (e == 0.0) return 1.0;
    if (xi == 0.0) return e > 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::pow(xi, e);
}

/// Exact value of int_R mu^2(xi)/(xi^2 + eta + lam) dxi = pi/sin(a pi) * (eta + lam)^{a-1}.
inline double closed_form_moment(double a, double eta, double lam) {
    detail::require_order(a);
    if (eta < 0.0 || lam < 0.0 || !(eta + lam > 0.0))
        throw DomainError("closed_form_moment: need eta, lam >= 0 and eta + lam > 0");
    return std::numbers::pi / std::sin(a * std::numbers::pi) * std::pow(eta + lam, a - 1.0);
}

/// The two explicit second-moment identities used as quadrature oracles:
///   first  = (int_R dxi / (lam + xi^2 + eta)^2)^{1/2}     = sqrt(pi/2) (lam+eta)^{-3/4}
///   second = (int_R xi^2 dxi / (lam + xi^2 + eta)^4)^{1/2} = sqrt(pi)/4 (lam+eta)^{-5/4}
inline std::pair<double, double> closed_form_second_moments(double eta, double lam) {
    if (eta < 0.0 || lam < 0.0 || !(eta + lam > 0.0))
        throw DomainError("closed_form_second_moments: need eta, lam >= 0 and eta + lam > 0");
    const double s = eta + lam;
    return {std::sqrt(std::numbers::pi / 2.0) * std::pow(s, -0.75),
            std::sqrt(std::numbers::pi) / 4.0 * std::pow(s, -1.25)};
}

/// Quadrature accuracy budget. Each truncated tail of the moment integrand is
/// allowed kTailBudgetAtReference of the exact moment at kReferenceModes nodes;
/// the allowance scales like 1/N so the moment error halves per doubling.
inline constexpr std::size_t kReferenceModes = 128;
inline constexpr double kTailBudgetAtReference = 1e-3;
/// Moments are guaranteed on lam in [0, kMomentLambdaMax].
inline constexpr double kMomentLambdaMax = 10.0;

inline double tail_budget(std::size_t n_modes) {
    return kTailBudgetAtReference * static_cast<double>(kReferenceModes) / static_cast<double>(n_modes);
}

/// Smallest node admissible for n_modes: the integrand near 0 behaves like xi^{2a-1}/eta,
/// so int_0^xi_min <= xi_min^{2a}/(a eta), set equal to the budget at lam = 0.
inline double lower_cutoff(const FracParams& p, std::size_t n_modes) {
    const double m0 = closed_form_moment(p.a, p.eta, 0.0);
    return std::pow(p.a * p.eta * tail_budget(n_modes) * m0, 1.0 / (2.0 * p.a));
}

/// Analytic bound on the moment mass beyond xi_max: int_{xi_max}^inf 2 xi^{2a-3} = xi_max^{2a-2}/(1-a).
inline double upper_tail_bound(double a, double xi_max) {
    return std::pow(xi_max, 2.0 * a - 2.0) / (1.0 - a);
}

/// Smallest xi_max whose upper tail fits the budget over the whole advertised lam range
/// (the relative tail is largest at lam = kMomentLambdaMax).
inline double recommended_xi_max(const FracParams& p, std::size_t n_modes) {
    p.validate();
    const double m = closed_form_moment(p.a, p.eta, kMomentLambdaMax);
    return std::pow((1.0 - p.a) * tail_budget(n_modes) * m, -1.0 / (2.0 - 2.0 * p.a));
}

/// A finite bank of damped modes realizing one fractional boundary operator.
class DiffusiveOperator {
public:
    FracParams params;
    Eigen::ArrayXd nodes;          ///< xi_k, strictly increasing, > 0
    Eigen::ArrayXd weights;        ///< w_k > 0, symmetry factor 2 included
    Eigen::ArrayXd kernel_values;  ///< mu(xi_k)
    Eigen::ArrayXd modal_state;    ///< phi_k at the current time

    std::size_t size() const { return static_cast<std::size_t>(nodes.size()); }

    /// Relaxation rates xi_k^2 + eta.
    Eigen::ArrayXd rates() const { return nodes.square() + params.eta; }

    /// Exponential integrator for input held constant over dt; exact for constant input.
    void advance(double input_u, double dt) {
        if (!(dt > 0.0)) throw DomainError("step_modes: dt must be > 0");
        for (Eigen::Index k = 0; k < nodes.size(); ++k) {
            const double lam = nodes[k] * nodes[k] + params.eta;
            const double decay = std::exp(-lam * dt);
            const double gain = -std::expm1(-lam * dt) / lam;
            modal_state[k] = decay * modal_state[k] + gain * kernel_values[k] * input_u;
        }
    }

    /// (sin(a pi)/pi) * sum_k w_k mu_k phi_k.
    double output() const {
        return params.output_scale() * (weights * kernel_values * modal_state).sum();
    }

    /// Energy stored in the bank: (sin(a pi)/2pi) * gain * sum_k w_k phi_k^2.
    double stored_energy() const {
        return 0.5 * params.output_scale() * params.gain * (weights * modal_state.square()).sum();
    }

    /// Dissipation rate: (sin(a pi)/pi) * gain * sum_k w_k (xi_k^2 + eta) phi_k^2.
    double dissipation() const {
        return params.output_scale() * params.gain * (weights * rates() * modal_state.square()).sum();
    }

    /// Discrete counterpart of closed_form_moment.
    double moment(double lam) const {
        return (weights * kernel_values.square() / (nodes.square() + params.eta + lam)).sum();
    }

    std::pair<double, double> second_moments(double lam) const {
        const Eigen::ArrayXd d = lam + nodes.square() + params.eta;
        return {std::sqrt((weights / d.square()).sum()),
                std::sqrt((weights * nodes.square() / d.square().square()).sum())};
    }

    void reset() { modal_state.setZero(); }
};

/// Geometric nodes on (xi_min, xi_max], midpoint rule in log xi, zero modal state.
/// Throws DomainError if xi_max leaves an upper tail larger than the budget for n_modes.
inline DiffusiveOperator build_quadrature(const FracParams& params, std::size_t n_modes, double xi_max) {
    params.validate();
    if (n_modes < 2) throw DomainError("build_quadrature: need at least 2 modes");
    if (!(xi_max > 0.0)) throw DomainError("build_quadrature: xi_max must be > 0");
    const double needed = recommended_xi_max(params, n_modes);
    if (xi_max < needed * (1.0 - 1e-12))
        throw DomainError("build_quadrature: xi_max = " + std::to_string(xi_max) +
                          " truncates more than the tail budget; need xi_max >= " + std::to_string(needed));
    const double xi_min = lower_cutoff(params, n_modes);
    if (!(xi_min < xi_max)) throw DomainError("build_quadrature: empty node range");

    const auto n = static_cast<Eigen::Index>(n_modes);
    const double lo = std::log(xi_min);
    const double h = (std::log(xi_max) - lo) / static_cast<double>(n);

    DiffusiveOperator op;
    op.params = params;
    op.nodes.resize(n);
    op.weights.resize(n);
    op.kernel_values.resize(n);
    op.modal_state = Eigen::ArrayXd::Zero(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double xi = std::exp(lo + (static_cast<double>(k) + 0.5) * h);
        op.nodes[k] = xi;
        op.weights[k] = 2.0 * xi * h;
        op.kernel_values[k] = evaluate_mu(xi, params.a);
    }
    return op;
}

/// Default bank for n_modes: build_quadrature at the recommended cutoff.
inline DiffusiveOperator build_quadrature(const FracParams& params, std::size_t n_modes) {
    return build_quadrature(params, n_modes, recommended_xi_max(params, n_modes));
}

inline DiffusiveOperator step_modes(DiffusiveOperator op, double input_u, double dt) {
    op.advance(input_u, dt);
    return op;
}

inline double read_output(const DiffusiveOperator& op) { return op.output(); }

/// Product-integration evaluation of d^{a,eta} f on a uniform grid t_n = n dt.
/// f is taken piecewise linear; the weakly singular kernel is integrated exactly on
/// every subinterval, so only the interpolation of f contributes error.
inline std::vector<double> reference_caputo(std::span<const double> samples, double dt, double a, double eta) {
    detail::require_order(a);
    if (samples.size() < 3) throw DomainError("reference_caputo: need at least 3 samples");
    if (!(dt > 0.0)) throw DomainError("reference_caputo: dt must be > 0");
    if (eta < 0.0) throw DomainError("reference_caputo: eta must be >= 0");

    const std::size_t n = samples.size();
    // kernel moments m_k = int_{k dt}^{(k+1) dt} exp(-eta u) u^{-a} du
    std::vector<double> moments(n - 1);
    const double s = 1.0 - a;
    if (eta == 0.0) {
        for (std::size_t k = 0; k + 1 < n; ++k) {
            moments[k] = (std::pow(static_cast<double>(k + 1), s) - std::pow(static_cast<double>(k), s)) *
                         std::pow(dt, s) / s;
        }
    } else {
        const double scale = std::pow(eta, -s);
        double prev = 0.0;
        for (std::size_t k = 0; k + 1 < n; ++k) {
            const double next = boost::math::tgamma_lower(s, eta * dt * static_cast<double>(k + 1));
            moments[k] = scale * (next - prev);
            prev = next;
        }
    }

    std::vector<double> slopes(n - 1);
    for (std::size_t j = 0; j + 1 < n; ++j) slopes[j] = (samples[j + 1] - samples[j]) / dt;

    const double inv_gamma = 1.0 / std::tgamma(s);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 1; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < i; ++j) acc += slopes[j] * moments[i - 1 - j];
        out[i] = inv_gamma * acc;
    }
    return out;
}

/// Drives a bank with input u(t) = f'(t) (held at its midpoint value on each step)
/// and records the output at t_n = n dt, n = 0..n_steps.
inline std::vector<double> realize_derivative(DiffusiveOperator op, const std::function<double(double)>& input,
                                              double dt, std::size_t n_steps) {
    op.reset();
    std::vector<double> out;
    out.reserve(n_steps + 1);
    out.push_back(op.output());
    for (std::size_t i = 0; i < n_steps; ++i) {
        op.advance(input((static_cast<double>(i) + 0.5) * dt), dt);
        out.push_back(op.output());
    }
    return out;
}

/// Relative discrete L2 discrepancy ||x - ref|| / ||ref||.
inline double relative_l2(std::span<const double> x, std::span<const double> ref) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < std::min(x.size(), ref.size()); ++i) {
        num += (x[i] - ref[i]) * (x[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// ---------------------------------------------------------------------------
// Oracle suite

struct MomentCheck {
    double lam;
    double discrete;
    double exact;
    double rel_error() const { return std::abs(discrete - exact) / exact; }
};

struct CaputoCheck {
    std::string signal;  ///< "t" or "sin t"
    double rel_l2;
};

struct KernelValidation {
    FracParams params;
    std::size_t n_modes = 0;
    std::vector<MomentCheck> moments;
    std::vector<MomentCheck> second_moments;  ///< both identities, flattened
    std::vector<CaputoCheck> caputo;
    double moment_tolerance = 0.01;
    double caputo_tolerance = 0.02;

    bool passed() const {
        for (const auto& m : moments)
            if (!(m.rel_error() <= moment_tolerance)) return false;
        for (const auto& m : second_moments)
            if (!(m.rel_error() <= moment_tolerance)) return false;
        for (const auto& c : caputo)
            if (!(c.rel_l2 <= caputo_tolerance)) return false;
        return true;
    }
};

/// Moment identities at lam in {0, 1, 10} plus the ramp and sine cross-validation
/// against reference_caputo on [0, 5] with 2048 steps.
inline KernelValidation validate_kernel(const FracParams& params, std::size_t n_modes = kReferenceModes) {
    KernelValidation v;
    v.params = params;
    v.n_modes = n_modes;
    const DiffusiveOperator op = build_quadrature(params, n_modes);
    for (double lam : {0.0, 1.0, 10.0}) {
        v.moments.push_back({lam, op.moment(lam), closed_form_moment(params.a, params.eta, lam)});
        if (lam > 0.0) {
            auto [d1, d2] = op.second_moments(lam);
            auto [e1, e2] = closed_form_second_moments(params.eta, lam);
            v.second_moments.push_back({lam, d1, e1});
            v.second_moments.push_back({lam, d2, e2});
        }
    }

    constexpr std::size_t steps = 2048;
    const double dt = 5.0 / static_cast<double>(steps);
    struct Signal {
        const char* name;
        double (*f)(double);
        double (*df)(double);
    };
    const Signal signals[] = {
        {"t", [](double t) { return t; }, [](double) { return 1.0; }},
        {"sin t", [](double t) { return std::sin(t); }, [](double t) { return std::cos(t); }},
    };
    for (const auto& sig : signals) {
        std::vector<double> samples(steps + 1);
        for (std::size_t i = 0; i <= steps; ++i) samples[i] = sig.f(static_cast<double>(i) * dt);
        const auto ref = reference_caputo(samples, dt, params.a, params.eta);
        const auto got = realize_derivative(op, sig.df, dt, steps);
        v.caputo.push_back({sig.name, relative_l2(got, ref)});
    }
    return v;
}

}  // namespace piezo
