#pragma once

// Decay diagnostics for the beam: least-squares decay fits, the perturbed-energy
// Lyapunov functional of the thermal system with its explicit constant
// constraints, and resolvent norms of the semi-discrete generator.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "piezo/time_integrator.hpp"

namespace piezo {

// ---------------------------------------------------------------------------
// Decay fits

enum class DecayModel { exponential, polynomial };

inline const char* to_string(DecayModel m) { return m == DecayModel::exponential ? "exponential" : "polynomial"; }

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

inline LineFit least_squares_line(std::span<const double> x, std::span<const double> y) {
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    LineFit f;
    f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    double sse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - f.intercept - f.slope * x[i];
        sse += r * r;
    }
    f.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
    return f;
}

struct DecayFit {
    DecayModel model = DecayModel::exponential;
    double rate_omega = 0.0;  ///< E ~ E0 exp(-omega t)
    double exponent_p = 0.0;  ///< E ~ C t^{-p}
    double r2_exponential = 0.0;
    double r2_polynomial = 0.0;
    double t_lo = 0.0, t_hi = 0.0;
    std::size_t samples = 0;
};

/// Fits log E against t and against log t over [t_lo, t_hi] and keeps the better model.
inline DecayFit fit_decay(std::span<const double> t, std::span<const double> energy, double t_lo, double t_hi) {
    if (t.size() != energy.size()) throw DomainError("fit_decay: t and energy differ in length");
    if (!(t_lo > 0.0) || !(t_hi > t_lo)) throw DomainError("fit_decay: need 0 < t_lo < t_hi");
    std::vector<double> ts, lts, les;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < t_lo || t[i] > t_hi) continue;
        if (!(energy[i] > 0.0))
            throw DomainError("fit_decay: energy <= 0 at t = " + std::to_string(t[i]) + "; shrink the window");
        ts.push_back(t[i]);
        lts.push_back(std::log(t[i]));
        les.push_back(std::log(energy[i]));
    }
    if (ts.size() < 20) throw DomainError("fit_decay: fewer than 20 samples in window");
    const LineFit e = least_squares_line(ts, les);
    const LineFit p = least_squares_line(lts, les);
    DecayFit f;
    f.rate_omega = -e.slope;
    f.exponent_p = -p.slope;
    f.r2_exponential = e.r2;
    f.r2_polynomial = p.r2;
    f.model = p.r2 > e.r2 ? DecayModel::polynomial : DecayModel::exponential;
    f.t_lo = t_lo;
    f.t_hi = t_hi;
    f.samples = ts.size();
    return f;
}

inline DecayFit fit_decay(const std::vector<EnergyReport>& series, double t_lo, double t_hi) {
    std::vector<double> t, e;
    t.reserve(series.size());
    e.reserve(series.size());
    for (const auto& r : series) {
        t.push_back(r.t);
        e.push_back(r.energy);
    }
    return fit_decay(t, e, t_lo, t_hi);
}

// ---------------------------------------------------------------------------
// Lyapunov functionals

struct Functionals {
    double i1 = 0.0;
    std::optional<double> i2;  ///< thermal states only
    double i3 = 0.0;
    double i4 = 0.0;

    double i2_value() const {
        if (!i2) throw DomainError("I2 requires a thermal state");
        return *i2;
    }
};

/// I1 = int rho V_t V + mag_mu P_t P
/// I2 = rho c int theta(x) int_x^L V_t dy dx
/// I3 = rho int V_t V + gamma mag_mu int P_t V
/// I4 = rho int V_t (gamma V - P) + gamma mag_mu int P_t (gamma V - P)
inline Functionals evaluate_functionals(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    detail::check_sizes(cfg, grid, s);
    const auto n = static_cast<Eigen::Index>(grid.n_cells);
    const double dx = grid.dx;
    Functionals out;
    for (Eigen::Index j = 1; j <= n; ++j) {
        const double h = j == n ? 0.5 * dx : dx;
        const double w = s.v[j] * cfg.gamma - s.p[j];
        out.i1 += h * (cfg.rho * s.v_t[j] * s.v[j] + cfg.mag_mu * s.p_t[j] * s.p[j]);
        out.i3 += h * (cfg.rho * s.v_t[j] * s.v[j] + cfg.gamma * cfg.mag_mu * s.p_t[j] * s.v[j]);
        out.i4 += h * (cfg.rho * s.v_t[j] * w + cfg.gamma * cfg.mag_mu * s.p_t[j] * w);
    }
    if (s.thermal()) {
        // tail(j) = int_{x_j}^L V_t, cumulative trapezoid from the right
        Eigen::VectorXd tail = Eigen::VectorXd::Zero(n + 1);
        for (Eigen::Index j = n - 1; j >= 0; --j) tail[j] = tail[j + 1] + 0.5 * dx * (s.v_t[j] + s.v_t[j + 1]);
        double acc = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) {
            const double mid = 0.5 * (s.v_t[c] + s.v_t[c + 1]);
            const double inner = tail[c + 1] + 0.25 * dx * (mid + s.v_t[c + 1]);
            acc += dx * s.theta[c] * inner;
        }
        out.i2 = cfg.rho * cfg.c_heat * acc;
    }
    return out;
}

/// Multipliers and auxiliary constants of the perturbed energy
/// L = N E + N1 I1 + N2 I2 + N3 I3 + N4 I4.
struct LyapunovConfig {
    double N = 0.0, N1 = 0.0, N2 = 0.0, N3 = 0.0, N4 = 0.0;
    double eta1 = 0.0, eta2 = 0.0, eta3 = 0.0, eta4 = 0.0;
    double Cp = 0.0;  ///< Poincare constant (length^2)
    double M = 0.0;   ///< max(eta^{a-1} l1, eta^{a-1} l2)
};

/// The six coefficients of the derivative estimate and the resulting rate N0.
struct LyapunovCoefficients {
    double lambda[6] = {};
    double n0 = 0.0;
    double c_n4 = 0.0;
    double c_eta2 = 0.0;
};

inline double poincare_constant(double length) { return 4.0 * length * length / (std::numbers::pi * std::numbers::pi); }

inline double trace_bound_constant(const BeamConfig& cfg) {
    return std::max(std::pow(cfg.frac1.eta, cfg.frac1.a - 1.0) * cfg.frac1.gain,
                    std::pow(cfg.frac2.eta, cfg.frac2.a - 1.0) * cfg.frac2.gain);
}

namespace detail {
inline double n4_bound(const BeamConfig& c, double n1) {
    return 2.0 * c.beta / (3.0 * c.gamma * c.mag_mu) + c.mag_mu * n1 + c.gamma * c.mag_mu / 8.0;
}
inline double n3_bound(const BeamConfig& c, double n1, double n4) {
    const double a1 = c.alpha1();
    const double cn4 = 3.0 * a1 * a1 * n4 / (4.0 * c.beta);
    return (2.0 + c.gamma * c.gamma) * c.beta / a1 + 0.5 + cn4 * n4 / a1 - n1;
}
inline double n2_bound(const BeamConfig& c, double n1, double n3, double n4) {
    const double g2 = c.gamma * c.gamma;
    const double dr = c.delta * c.rho;
    return 1.0 / (2.0 * g2 * c.beta * dr) + n1 / c.delta + n3 / c.delta + n3 * n3 / (2.0 * dr) +
           c.gamma * n4 / c.delta +
           3.0 * n4 * n4 / (4.0 * c.beta * dr) * (c.rho * c.rho + g2 * g2 * c.mag_mu * c.mag_mu);
}
inline void require_lyapunov_setting(const BeamConfig& c) {
    if (!c.thermal) throw ConfigError("the Lyapunov functional needs the thermal system");
    if (!(c.gamma > 0.0)) throw ConfigError("the Lyapunov constants need gamma > 0");
    if (!(c.delta > 0.0)) throw ConfigError("the Lyapunov constants need delta > 0");
    if (!(c.frac1.gain > 0.0 && c.frac2.gain > 0.0)) throw ConfigError("the Lyapunov constants need l1, l2 > 0");
}
}  // namespace detail

inline LyapunovCoefficients lyapunov_coefficients(const BeamConfig& c, const LyapunovConfig& k) {
    const double a1 = c.alpha1();
    const double L = c.length;
    const double g = c.gamma, b = c.beta, mu = c.mag_mu, rho = c.rho;
    const double d2 = c.delta * c.delta;
    LyapunovCoefficients out;
    out.c_n4 = 3.0 * a1 * a1 * k.N4 / (4.0 * b);
    out.c_eta2 = k.Cp * c.c_heat * c.delta + g * g * b * b * rho * rho * c.kappa * c.kappa / (2.0 * k.eta2) +
                 c.c_heat * c.c_heat * k.Cp * a1 * a1 / (2.0 * k.eta2) + c.c_heat * c.c_heat * k.Cp * L / (2.0 * k.eta2);
    double* l = out.lambda;
    l[0] = k.N - k.N1 * k.M * L / k.eta1 - k.N2 * k.eta2 * k.M - k.N3 * 4.0 * k.M * L * k.eta3 / a1 -
           k.N4 * a1 * a1 * k.M / k.eta4;
    l[1] = k.N * c.kappa - k.N1 * d2 * k.Cp / (2.0 * k.eta1) - k.N2 * out.c_eta2 -
           k.N3 * 4.0 * k.Cp * d2 * k.eta3 / a1 - k.N4 * k.Cp * d2 / k.eta4;
    l[2] = k.N2 * c.delta * rho - 1.0 / (2.0 * g * g * b) - k.N1 * rho - k.N3 * rho - k.N3 * k.eta3 - k.N4 * g * rho -
           3.0 * k.N4 * k.N4 / (4.0 * b) * (rho * rho + g * g * g * g * mu * mu);
    l[3] = k.N4 * g * mu - 2.0 * b / 3.0 - k.N1 * mu - g * g * mu * mu / 8.0;
    l[4] = k.N1 * a1 - (2.0 + g * g) * b + k.N3 * a1 - a1 / 2.0 - out.c_n4 * k.N4;
    l[5] = k.N1 * b - 3.0 * b;
    const double eta = std::min(c.frac1.eta, c.frac2.eta);
    out.n0 = 2.0 * std::min({l[0] * eta, l[1] / c.c_heat, l[2] / rho, l[3] / mu, l[4] / a1, l[5] / b});
    return out;
}

/// Constant C with |N1 I1 + N2 I2 + N3 I3 + N4 I4| <= C E, from Cauchy-Schwarz, Young and Poincare.
inline double sandwich_constant(const BeamConfig& c, const LyapunovConfig& k) {
    const double cp = k.Cp, g = std::abs(c.gamma), L = c.length;
    double f = 0.0, gg = 0.0, vx = 0.0, sh = 0.0, th = 0.0;
    // I1: |P_x|^2 <= 2|gamma V_x - P_x|^2 + 2 gamma^2 |V_x|^2
    f += k.N1 * c.rho / 2.0;
    gg += k.N1 * c.mag_mu / 2.0;
    vx += k.N1 * (c.rho * cp / 2.0 + c.mag_mu * cp * g * g);
    sh += k.N1 * c.mag_mu * cp;
    // I2: |int_x^L V_t|^2 <= (L - x) ||V_t||^2
    const double i2 = c.rho * c.c_heat * L / (2.0 * std::sqrt(2.0));
    f += k.N2 * i2;
    th += k.N2 * i2;
    // I3
    f += k.N3 * c.rho / 2.0;
    gg += k.N3 * g * c.mag_mu / 2.0;
    vx += k.N3 * (c.rho + g * c.mag_mu) * cp / 2.0;
    // I4, with ||gamma V - P||^2 <= Cp ||gamma V_x - P_x||^2
    f += k.N4 * c.rho / 2.0;
    gg += k.N4 * g * c.mag_mu / 2.0;
    sh += k.N4 * (c.rho + g * c.mag_mu) * cp / 2.0;
    return 2.0 * std::max({f / c.rho, gg / c.mag_mu, vx / c.alpha1(), sh / c.beta, th / c.c_heat});
}

/// Every violated constraint, each naming its inequality.
inline std::vector<std::string> lyapunov_violations(const BeamConfig& c, const LyapunovConfig& k) {
    std::vector<std::string> out;
    detail::require_lyapunov_setting(c);
    auto close = [](double x, double y) { return std::abs(x - y) <= 1e-12 * std::max(std::abs(x), std::abs(y)); };
    if (!(k.N1 > 3.0)) out.push_back("N1 > 3 violated (N1 = " + std::to_string(k.N1) + ")");
    if (!(k.N4 > detail::n4_bound(c, k.N1)))
        out.push_back("N4 > 2*beta/(3*gamma*mag_mu) + mag_mu*N1 + gamma*mag_mu/8 violated");
    if (!(k.N3 > detail::n3_bound(c, k.N1, k.N4)))
        out.push_back("N3 > (2+gamma^2)*beta/alpha1 + 1/2 + C_N4*N4/alpha1 - N1 violated");
    if (!(k.N2 > detail::n2_bound(c, k.N1, k.N3, k.N4)))
        out.push_back("N2 > 1/(2 gamma^2 beta delta rho) + N1/delta + N3/delta + N3^2/(2 delta rho) + gamma N4/delta"
                      " + 3 N4^2 (rho^2 + gamma^4 mag_mu^2)/(4 beta delta rho) violated");
    if (!close(k.N3 / 2.0, k.eta3)) out.push_back("coupling N3/2 = eta3 violated");
    if (!close(3.0 * k.N4 * k.eta4, 4.0 * c.beta)) out.push_back("coupling 3*N4*eta4 = 4*beta violated");
    if (!close(k.N1 * k.eta1, c.beta)) out.push_back("coupling N1*eta1 = beta violated");
    if (!close(k.N2 * k.eta2, c.beta)) out.push_back("coupling N2*eta2 = beta violated");
    if (!(k.Cp > 0.0)) out.push_back("Cp > 0 violated");
    if (!(k.M > 0.0)) out.push_back("M > 0 violated");
    if (out.empty()) {
        const auto co = lyapunov_coefficients(c, k);
        for (int i = 0; i < 6; ++i)
            if (!(co.lambda[i] > 0.0)) out.push_back("lambda" + std::to_string(i + 1) + " > 0 violated");
        if (!(k.N > sandwich_constant(c, k))) out.push_back("N > sandwich constant violated (m1 would not be > 0)");
    }
    return out;
}

inline void validate_lyapunov(const BeamConfig& c, const LyapunovConfig& k) {
    auto v = lyapunov_violations(c, k);
    if (!v.empty()) throw ConfigError(std::move(v));
}

/// Picks the constants in the order N1, N4, N3, N2, N with 10% slack on each lower bound.
/// A given n1 is used as is; the downstream constants adapt to it.
inline LyapunovConfig choose_lyapunov_constants(const BeamConfig& c, double slack = 1.1,
                                                std::optional<double> n1 = {}) {
    detail::require_lyapunov_setting(c);
    auto above = [slack](double bound) { return bound > 0.0 ? slack * bound : 1.0; };
    LyapunovConfig k;
    k.Cp = poincare_constant(c.length);
    k.M = trace_bound_constant(c);
    k.N1 = n1.value_or(above(3.0));
    // lambda4 > 0 reads N4 > 2 beta/(3 gamma mu) + N1/gamma + gamma mu/8; take the larger of the two forms
    k.N4 = above(std::max(detail::n4_bound(c, k.N1),
                          2.0 * c.beta / (3.0 * c.gamma * c.mag_mu) + k.N1 / c.gamma + c.gamma * c.mag_mu / 8.0));
    k.N3 = above(detail::n3_bound(c, k.N1, k.N4));
    k.N2 = above(detail::n2_bound(c, k.N1, k.N3, k.N4));
    k.eta1 = c.beta / k.N1;
    k.eta2 = c.beta / k.N2;
    k.eta3 = k.N3 / 2.0;
    k.eta4 = 4.0 * c.beta / (3.0 * k.N4);

    // N: lambda1 > 0, lambda2 > 0 and the sandwich
    k.N = 0.0;
    const auto co = lyapunov_coefficients(c, k);
    const double n_l1 = -co.lambda[0];
    const double n_l2 = -co.lambda[1] / c.kappa;
    k.N = above(std::max({n_l1, n_l2, sandwich_constant(c, k)}));
    return k;
}

struct LyapunovSample {
    double t = 0.0;
    double energy = 0.0;
    Functionals functionals;
    double identity_residual = 0.0;
};

/// Observer that records energy and functionals at every reported step.
inline Observer lyapunov_recorder(const BeamConfig& cfg, const Grid& grid, std::vector<LyapunovSample>& out) {
    return [&cfg, &grid, &out](const BeamState& s, const EnergyReport& r) {
        out.push_back({r.t, r.energy, evaluate_functionals(cfg, grid, s), r.identity_residual});
    };
}

struct LyapunovReport {
    LyapunovConfig constants;
    LyapunovCoefficients coefficients;
    double m1 = 0.0, m2 = 0.0;  ///< min and max of L/E over the run
    bool sandwich_holds = false;
    std::size_t steps = 0;
    std::size_t derivative_ok = 0;
    double derivative_fraction = 0.0;
    double required_fraction = 0.99;

    bool passed() const { return sandwich_holds && derivative_fraction >= required_fraction; }
};

inline double lyapunov_value(const LyapunovConfig& k, const LyapunovSample& s) {
    const auto& f = s.functionals;
    return k.N * s.energy + k.N1 * f.i1 + k.N2 * f.i2_value() + k.N3 * f.i3 + k.N4 * f.i4;
}

/// Sandwich and derivative checks along a recorded run. Consecutive samples must be
/// one step apart for the derivative check to be meaningful.
inline LyapunovReport lyapunov_check(const BeamConfig& cfg, const std::vector<LyapunovSample>& run,
                                     const LyapunovConfig& k) {
    validate_lyapunov(cfg, k);
    if (run.size() < 2) throw DomainError("lyapunov_check: need at least two samples");
    LyapunovReport rep;
    rep.constants = k;
    rep.coefficients = lyapunov_coefficients(cfg, k);
    rep.m1 = std::numeric_limits<double>::infinity();
    rep.m2 = -std::numeric_limits<double>::infinity();
    std::vector<double> lv(run.size());
    for (std::size_t i = 0; i < run.size(); ++i) {
        lv[i] = lyapunov_value(k, run[i]);
        if (run[i].energy > 0.0) {
            const double q = lv[i] / run[i].energy;
            rep.m1 = std::min(rep.m1, q);
            rep.m2 = std::max(rep.m2, q);
        }
    }
    rep.sandwich_holds = rep.m1 > 0.0 && rep.m1 <= rep.m2;
    for (std::size_t i = 1; i < run.size(); ++i) {
        const double dt = run[i].t - run[i - 1].t;
        const double dl = (lv[i] - lv[i - 1]) / dt;
        const double e_mid = 0.5 * (run[i].energy + run[i - 1].energy);
        const double tol = 10.0 * run[i].identity_residual;
        ++rep.steps;
        if (dl <= -rep.coefficients.n0 * e_mid + tol) ++rep.derivative_ok;
    }
    rep.derivative_fraction = static_cast<double>(rep.derivative_ok) / static_cast<double>(rep.steps);
    return rep;
}

// ---------------------------------------------------------------------------
// Generator and resolvent

struct Generator {
    Eigen::MatrixXd state_form;   ///< y' = A y in the stacked layout
    Eigen::MatrixXd gram;         ///< E = y^T W y / 2, restricted to the energy-carrying coordinates
    Eigen::MatrixXd energy_form;  ///< A in coordinates where the energy is |z|^2 / 2
    std::vector<Eigen::Index> energy_coordinates;  ///< rows of state_form kept in the energy form
};

/// Energy Gram matrix on the full stacked layout (zero rows for zero-gain damper modes).
inline Eigen::MatrixXd energy_gram(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    const StateLayout L(grid, s, cfg.thermal);
    const Eigen::Index n = L.n;
    const double dx = grid.dx;
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(L.size(), L.size());
    // gradient part: dx * sum_c [alpha DV^2 - 2 gamma beta DV DP + beta DP^2]
    const double gb = cfg.gamma * cfg.beta;
    for (Eigen::Index c = 1; c <= n; ++c) {
        // DV_c = (V_c - V_{c-1})/dx: entries (c, +1/dx), (c-1, -1/dx) with V_0 dropped
        std::vector<std::pair<Eigen::Index, double>> dv{{L.v(c), 1.0 / dx}}, dp{{L.p(c), 1.0 / dx}};
        if (c > 1) {
            dv.push_back({L.v(c - 1), -1.0 / dx});
            dp.push_back({L.p(c - 1), -1.0 / dx});
        }
        for (auto [i, a] : dv)
            for (auto [j, b] : dv) W(i, j) += dx * cfg.alpha * a * b;
        for (auto [i, a] : dp)
            for (auto [j, b] : dp) W(i, j) += dx * cfg.beta * a * b;
        for (auto [i, a] : dv)
            for (auto [j, b] : dp) {
                W(i, j) -= dx * gb * a * b;
                W(j, i) -= dx * gb * a * b;
            }
    }
    for (Eigen::Index j = 1; j <= n; ++j) {
        const double h = j == n ? 0.5 * dx : dx;
        W(L.f(j), L.f(j)) = cfg.rho * h;
        W(L.g(j), L.g(j)) = cfg.mag_mu * h;
    }
    const double s1 = s.damper1.params.output_scale() * cfg.frac1.gain;
    const double s2 = s.damper2.params.output_scale() * cfg.frac2.gain;
    for (Eigen::Index k = 0; k < L.modes1; ++k) W(L.phi1(k), L.phi1(k)) = s1 * s.damper1.weights[k];
    for (Eigen::Index k = 0; k < L.modes2; ++k) W(L.phi2(k), L.phi2(k)) = s2 * s.damper2.weights[k];
    if (cfg.thermal)
        for (Eigen::Index c = 0; c < n; ++c) W(L.theta(c), L.theta(c)) = cfg.c_heat * dx;
    return W;
}

/// Dense generator in state and energy form. The modes of a zero-gain damper are
/// driven by the beam but never act back and carry no energy; they are left out of
/// the energy form.
inline Generator assemble_generator(const BeamConfig& cfg, const Grid& grid, std::size_t n_modes) {
    cfg.validate();
    BeamState proto = initial_condition("zero", cfg, grid, n_modes);
    const StateLayout L(grid, proto, cfg.thermal);
    Generator g;
    g.state_form = Eigen::MatrixXd(assemble_system(cfg, grid, proto));
    const Eigen::MatrixXd W = energy_gram(cfg, grid, proto);

    for (Eigen::Index i = 0; i < L.size(); ++i) {
        const bool dead1 = cfg.frac1.gain == 0.0 && i >= L.phi1(0) && i < L.phi1(0) + L.modes1;
        const bool dead2 = cfg.frac2.gain == 0.0 && i >= L.phi2(0) && i < L.phi2(0) + L.modes2;
        if (!dead1 && !dead2) g.energy_coordinates.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(g.energy_coordinates.size());
    g.gram.resize(m, m);
    Eigen::MatrixXd A(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) {
            g.gram(i, j) = W(g.energy_coordinates[static_cast<std::size_t>(i)],
                             g.energy_coordinates[static_cast<std::size_t>(j)]);
            A(i, j) = g.state_form(g.energy_coordinates[static_cast<std::size_t>(i)],
                                   g.energy_coordinates[static_cast<std::size_t>(j)]);
        }
    // W = R^T R, z = R y: A_z = R A R^{-1}
    const Eigen::LLT<Eigen::MatrixXd> llt(g.gram);
    if (llt.info() != Eigen::Success) throw InvariantError("energy Gram matrix is not positive definite");
    const Eigen::MatrixXd R = llt.matrixU();
    const Eigen::MatrixXd RA = R * A;
    g.energy_form = llt.matrixU().transpose().solve(RA.transpose()).transpose();
    return g;
}

struct ResolventPoint {
    double lambda = 0.0;
    double norm = 0.0;
    bool singular = false;  ///< shift hit the spectrum to machine precision; norm is meaningless
};

namespace detail {

/// LU of a shifted upper Hessenberg matrix S = i*lambda - H with adjacent-row pivoting.
/// Factor and solves cost O(m^2).
class ShiftedHessenbergLU {
public:
    using cd = std::complex<double>;

    ShiftedHessenbergLU(const Eigen::MatrixXd& H, double lambda) : U_(-H.cast<cd>()) {
        const Eigen::Index m = U_.rows();
        U_.diagonal().array() += cd(0.0, lambda);
        mult_.resize(m > 0 ? m - 1 : 0);
        swap_.assign(static_cast<std::size_t>(mult_.size()), false);
        for (Eigen::Index k = 0; k + 1 < m; ++k) {
            if (std::abs(U_(k + 1, k)) > std::abs(U_(k, k))) {
                U_.row(k).tail(m - k).swap(U_.row(k + 1).tail(m - k));
                swap_[static_cast<std::size_t>(k)] = true;
            }
            const cd l = U_(k, k) == cd(0.0) ? cd(0.0) : U_(k + 1, k) / U_(k, k);
            mult_[k] = l;
            U_.row(k + 1).tail(m - k) -= l * U_.row(k).tail(m - k);
        }
        min_pivot_ = U_.diagonal().cwiseAbs().minCoeff();
    }

    double min_pivot() const { return min_pivot_; }

    /// x = S^{-1} b
    Eigen::VectorXcd solve(Eigen::VectorXcd b) const {
        for (Eigen::Index k = 0; k < mult_.size(); ++k) {
            if (swap_[static_cast<std::size_t>(k)]) std::swap(b[k], b[k + 1]);
            b[k + 1] -= mult_[k] * b[k];
        }
        return U_.triangularView<Eigen::Upper>().solve(b);
    }

    /// x = S^{-H} b
    Eigen::VectorXcd solve_adjoint(const Eigen::VectorXcd& b) const {
        Eigen::VectorXcd x = U_.adjoint().triangularView<Eigen::Lower>().solve(b);
        for (Eigen::Index k = mult_.size() - 1; k >= 0; --k) {
            x[k] -= std::conj(mult_[k]) * x[k + 1];
            if (swap_[static_cast<std::size_t>(k)]) std::swap(x[k], x[k + 1]);
        }
        return x;
    }

private:
    Eigen::MatrixXcd U_;
    Eigen::VectorXcd mult_;
    std::vector<bool> swap_;
    double min_pivot_ = 0.0;
};

}  // namespace detail

/// ||(i lambda - A)^{-1}||_2 = 1 / sigma_min(i lambda - A) at each lambda.
/// A is reduced once to Hessenberg form (an orthogonal similarity, so the norm is
/// unchanged); each shift is then factorized in O(m^2) and the largest singular value
/// of the inverse is found by power iteration on S^{-H} S^{-1}.
inline std::vector<ResolventPoint> resolvent_sweep(const Eigen::MatrixXd& A, std::span<const double> lambdas) {
    using cd = std::complex<double>;
    std::vector<ResolventPoint> out;
    out.reserve(lambdas.size());
    const Eigen::HessenbergDecomposition<Eigen::MatrixXd> hd(A);
    const Eigen::MatrixXd H = hd.matrixH();
    const Eigen::Index m = A.rows();
    const double scale = std::max(A.norm(), 1.0);
    for (double lam : lambdas) {
        ResolventPoint p{lam, 0.0, false};
        const detail::ShiftedHessenbergLU lu(H, lam);
        if (!(lu.min_pivot() > 1e-14 * scale)) {
            p.singular = true;
            p.norm = std::numeric_limits<double>::infinity();
            out.push_back(p);
            continue;
        }
        Eigen::VectorXcd x(m);
        for (Eigen::Index i = 0; i < m; ++i) x[i] = cd(1.0 + 0.5 * std::sin(1.7 * static_cast<double>(i)), 0.0);
        x.normalize();
        double est = 0.0;
        for (int it = 0; it < 500; ++it) {
            const Eigen::VectorXcd y = lu.solve(x);
            const double next = y.norm();
            x = lu.solve_adjoint(y);
            x.normalize();
            const bool done = it > 0 && std::abs(next - est) <= 1e-12 * next;
            est = next;
            if (done) break;
        }
        if (!std::isfinite(est) || est * 1e-14 * scale > 1.0) {
            p.singular = true;
            p.norm = std::numeric_limits<double>::infinity();
        } else {
            p.norm = est;
        }
        out.push_back(p);
    }
    return out;
}

/// Upper end of the trustworthy frequency range: half the grid cutoff of the slow
/// characteristic family.
inline double resolvent_lambda_max(const BeamConfig& cfg, const Grid& grid) {
    return 0.5 * std::numbers::pi * cfg.min_wave_speed() / grid.dx;
}

/// count log-spaced frequencies on [lambda_min, resolvent_lambda_max].
inline std::vector<double> resolvent_window(const BeamConfig& cfg, const Grid& grid, std::size_t count = 40,
                                            double lambda_min = 1.0) {
    const double hi = resolvent_lambda_max(cfg, grid);
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i)
        out[i] = lambda_min * std::pow(hi / lambda_min, static_cast<double>(i) / static_cast<double>(count - 1));
    return out;
}

/// Resolvent norm at the peaks: one point per eigenvalue of A whose frequency lies in
/// [lo, hi], evaluated at lambda = Im(eigenvalue). Tracks the envelope that the
/// growth bound describes, free of the off-resonance troughs of a fixed grid.
inline std::vector<ResolventPoint> resolvent_peaks(const Eigen::MatrixXd& A, double lo, double hi) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
    std::vector<double> freqs;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double w = es.eigenvalues()[i].imag();
        if (w >= lo && w <= hi) freqs.push_back(w);
    }
    std::sort(freqs.begin(), freqs.end());
    return resolvent_sweep(A, freqs);
}

struct SlopeFit {
    double slope = 0.0;
    double r2 = 0.0;
    std::size_t used = 0;
    std::size_t rejected = 0;
};

/// Least-squares slope of log norm against log lambda over [lo, hi]. Singular points are
/// dropped; then points whose residual exceeds 3 median absolute deviations are rejected
/// once and the line refitted.
inline SlopeFit resolvent_slope(const std::vector<ResolventPoint>& pts, double lo, double hi) {
    std::vector<double> x, y;
    SlopeFit out;
    for (const auto& p : pts) {
        if (p.lambda < lo || p.lambda > hi) continue;
        if (p.singular || !std::isfinite(p.norm)) {
            ++out.rejected;
            continue;
        }
        x.push_back(std::log(p.lambda));
        y.push_back(std::log(p.norm));
    }
    if (x.size() < 3) throw DomainError("resolvent_slope: fewer than 3 usable points in window");
    LineFit f = least_squares_line(x, y);
    std::vector<double> res(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) res[i] = std::abs(y[i] - f.intercept - f.slope * x[i]);
    std::vector<double> sorted = res;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
    const double mad = sorted[sorted.size() / 2];
    if (mad > 0.0) {
        std::vector<double> x2, y2;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (res[i] <= 3.0 * mad) {
                x2.push_back(x[i]);
                y2.push_back(y[i]);
            } else {
                ++out.rejected;
            }
        }
        if (x2.size() >= 3 && x2.size() < x.size()) {
            x.swap(x2);
            y.swap(y2);
            f = least_squares_line(x, y);
        }
    }
    out.slope = f.slope;
    out.r2 = f.r2;
    out.used = x.size();
    return out;
}

struct ResolventStudy {
    double lambda_hi = 0.0;
    double norm_at_zero = 0.0;
    std::vector<ResolventPoint> sweep;  ///< fixed log-spaced window
    std::vector<ResolventPoint> peaks;  ///< at eigenfrequencies in [lambda_hi/10, lambda_hi]
    SlopeFit slope;                     ///< fitted on the peaks

    bool sweep_finite() const {
        for (const auto& p : sweep)
            if (p.singular || !std::isfinite(p.norm)) return false;
        return std::isfinite(norm_at_zero);
    }
};

/// Sweep of the energy-form generator over the trustworthy window plus the growth
/// slope of the peak envelope over its upper decade.
inline ResolventStudy resolvent_study(const BeamConfig& cfg, const Grid& grid, std::size_t n_modes,
                                      std::size_t points = 40) {
    const Generator g = assemble_generator(cfg, grid, n_modes);
    ResolventStudy out;
    out.lambda_hi = resolvent_lambda_max(cfg, grid);
    const double zero[] = {0.0};
    out.norm_at_zero = resolvent_sweep(g.energy_form, zero).front().norm;
    const auto lambdas = resolvent_window(cfg, grid, points);
    out.sweep = resolvent_sweep(g.energy_form, lambdas);
    out.peaks = resolvent_peaks(g.energy_form, 0.1 * out.lambda_hi, out.lambda_hi);
    out.slope = resolvent_slope(out.peaks, 0.1 * out.lambda_hi, out.lambda_hi);
    return out;
}

}  // namespace piezo
