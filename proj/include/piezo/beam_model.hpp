#pragma once

// Piezoelectric beam on (0, L) with magnetic effects, optionally coupled to a
// Fourier heat equation:
//
//     rho V_tt    = alpha V_xx - gamma beta P_xx - delta theta_x
//     mag_mu P_tt = beta P_xx - gamma beta V_xx
//     c theta_t   = kappa theta_xx - delta V_xt
//
// V(0) = P(0) = 0, theta_x(0) = theta(L) = 0, and at x = L the fractional Robin pair
//
//     alpha V_x - gamma beta P_x = -l1 O1,    beta P_x - gamma beta V_x = -l2 O2,
//
// where O1, O2 are the outputs of the diffusive banks driven by V_t(L), P_t(L).
//
// Spatial scheme: V, P and their velocities live on nodes 1..n (node 0 is pinned),
// stresses and temperature on cell midpoints. Staggering theta against V_t keeps
// the thermal coupling alive down to the grid scale. The tip node
// carries half a cell and receives the Robin stress through a ghost-node closure,
// which makes the semi-discrete energy balance exact.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "piezo/error.hpp"
#include "piezo/frac_diffusive.hpp"

namespace piezo {

inline constexpr const char* kSchemaVersion = "1.0";

struct BeamConfig {
    double rho = 1.0;
    double alpha = 2.0;
    double beta = 1.0;
    double gamma = 1.0;
    double mag_mu = 1.0;  ///< magnetic permeability
    double delta = 1.0;
    double c_heat = 1.0;
    double kappa = 1.0;
    double length = 1.0;
    FracParams frac1;  ///< damper on the V equation, driven by V_t(L)
    FracParams frac2;  ///< damper on the P equation, driven by P_t(L)
    bool thermal = false;

    double alpha1() const { return alpha - gamma * gamma * beta; }

    /// Every violated constraint, prefixed by `prefix` (e.g. "beam.").
    std::vector<std::string> violations(const std::string& prefix = "") const {
        std::vector<std::string> out;
        auto positive = [&](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v)) out.push_back(prefix + name + " must be > 0");
        };
        positive(rho, "rho");
        positive(alpha, "alpha");
        positive(beta, "beta");
        positive(mag_mu, "mag_mu");
        positive(length, "length");
        if (!std::isfinite(gamma)) out.push_back(prefix + "gamma must be finite");
        if (!(alpha1() > 0.0)) out.push_back(prefix + "alpha - gamma^2*beta must be > 0");
        if (thermal) {
            if (!(delta >= 0.0) || !std::isfinite(delta)) out.push_back(prefix + "delta must be >= 0");
            positive(c_heat, "c_heat");
            positive(kappa, "kappa");
        }
        for (auto& v : frac1.violations(prefix + "damper1.")) out.push_back(std::move(v));
        for (auto& v : frac2.violations(prefix + "damper2.")) out.push_back(std::move(v));
        return out;
    }

    void validate() const {
        auto v = violations();
        if (!v.empty()) throw ConfigError(std::move(v));
    }

    /// Larger of the uncoupled speeds sqrt(alpha/rho), sqrt(beta/mag_mu).
    double max_wave_speed() const { return std::max(std::sqrt(alpha / rho), std::sqrt(beta / mag_mu)); }

    /// Characteristic speeds of the coupled (V, P) system: square roots of the eigenvalues
    /// of diag(rho, mag_mu)^{-1} [[alpha, -gamma beta], [-gamma beta, beta]], slow first.
    std::pair<double, double> characteristic_speeds() const {
        const double a = alpha / rho, d = beta / mag_mu;
        const double off2 = gamma * beta * gamma * beta / (rho * mag_mu);
        const double mean = 0.5 * (a + d);
        const double rad = std::sqrt(0.25 * (a - d) * (a - d) + off2);
        return {std::sqrt(mean - rad), std::sqrt(mean + rad)};
    }
    double min_wave_speed() const { return characteristic_speeds().first; }

    static BeamConfig paper_nonthermal() { return BeamConfig{}; }
    static BeamConfig paper_thermal() {
        BeamConfig c;
        c.thermal = true;
        return c;
    }

    friend bool operator==(const BeamConfig&, const BeamConfig&) = default;
};

struct Grid {
    std::size_t n_cells = 0;
    double length = 1.0;
    double dx = 0.0;

    Grid() = default;
    Grid(std::size_t n, double len) : n_cells(n), length(len), dx(len / static_cast<double>(n)) {
        if (n < 8) throw ConfigError("grid.n_cells must be >= 8");
        if (!(len > 0.0)) throw ConfigError("length must be > 0");
    }

    std::size_t n() const { return n_cells; }
    double x(std::size_t j) const { return static_cast<double>(j) * dx; }

    Eigen::VectorXd nodes() const {
        Eigen::VectorXd out(static_cast<Eigen::Index>(n_cells) + 1);
        for (std::size_t j = 0; j <= n_cells; ++j) out[static_cast<Eigen::Index>(j)] = x(j);
        out[static_cast<Eigen::Index>(n_cells)] = length;
        return out;
    }

    /// Cell midpoints x_{c+1/2}, c = 0..n_cells-1.
    Eigen::VectorXd centers() const {
        Eigen::VectorXd out(static_cast<Eigen::Index>(n_cells));
        for (std::size_t c = 0; c < n_cells; ++c) out[static_cast<Eigen::Index>(c)] = (static_cast<double>(c) + 0.5) * dx;
        return out;
    }
};

/// v, v_t, p, p_t have n_cells + 1 entries indexed by node. theta has n_cells entries,
/// one per cell midpoint x_{c+1/2}; it is empty for the non-thermal system.
struct BeamState {
    double t = 0.0;
    Eigen::VectorXd v, v_t, p, p_t, theta;
    DiffusiveOperator damper1, damper2;

    bool thermal() const { return theta.size() > 0; }
};

/// Time derivative of a BeamState, same layout; damper entries are d(phi_k)/dt.
struct StateRate {
    Eigen::VectorXd v, v_t, p, p_t, theta;
    Eigen::ArrayXd damper1, damper2;
};

/// Manufactured forcing: nodal accelerations added to the v_t, p_t, theta rates and
/// additive stresses entering the two tip boundary equations.
struct SourceTerms {
    Eigen::VectorXd v_t, p_t, theta;
    double stress_v = 0.0;
    double stress_p = 0.0;
};

/// Unique (V_x(L), P_x(L)) with alpha V_x - gamma beta P_x = -l1 o1 + s1 and
/// beta P_x - gamma beta V_x = -l2 o2 + s2.
inline std::pair<double, double> solve_boundary_gradients(const BeamConfig& cfg, double o1, double o2,
                                                          double s1 = 0.0, double s2 = 0.0) {
    const double r1 = -cfg.frac1.gain * o1 + s1;
    const double r2 = -cfg.frac2.gain * o2 + s2;
    const double gb = cfg.gamma * cfg.beta;
    const double det = cfg.alpha * cfg.beta - gb * gb;  // beta * alpha1
    return {(cfg.beta * r1 + gb * r2) / det, (gb * r1 + cfg.alpha * r2) / det};
}

/// Build both damper banks with n_modes nodes each at the default cutoff.
inline std::pair<DiffusiveOperator, DiffusiveOperator> make_dampers(const BeamConfig& cfg, std::size_t n_modes) {
    return {build_quadrature(cfg.frac1, n_modes), build_quadrature(cfg.frac2, n_modes)};
}

namespace detail {

inline void check_sizes(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    const auto m = static_cast<Eigen::Index>(grid.n_cells) + 1;
    if (s.v.size() != m || s.v_t.size() != m || s.p.size() != m || s.p_t.size() != m)
        throw DomainError("state arrays must have n_cells + 1 entries");
    if (cfg.thermal && s.theta.size() != m - 1) throw DomainError("thermal state needs theta with n_cells entries");
    if (s.damper1.size() == 0 || s.damper2.size() == 0) throw DomainError("state has no damper modes");
}

/// Cell stresses s_V, s_P on cells c = 1..n (entry c-1), with V_0 = P_0 = 0.
inline void cell_stresses(const BeamConfig& cfg, const Grid& grid, const BeamState& s, Eigen::VectorXd& sv,
                          Eigen::VectorXd& sp) {
    const auto n = static_cast<Eigen::Index>(grid.n_cells);
    const double gb = cfg.gamma * cfg.beta;
    sv.resize(n);
    sp.resize(n);
    for (Eigen::Index c = 1; c <= n; ++c) {
        const double dv = (s.v[c] - s.v[c - 1]) / grid.dx;
        const double dp = (s.p[c] - s.p[c - 1]) / grid.dx;
        sv[c - 1] = cfg.alpha * dv - gb * dp;
        sp[c - 1] = cfg.beta * dp - gb * dv;
    }
}

inline StateRate mechanical_rate(const BeamConfig& cfg, const Grid& grid, const BeamState& s,
                                 const SourceTerms* src) {
    const auto n = static_cast<Eigen::Index>(grid.n_cells);
    const double dx = grid.dx;
    Eigen::VectorXd sv, sp;
    cell_stresses(cfg, grid, s, sv, sp);

    const auto [vx, px] = solve_boundary_gradients(cfg, s.damper1.output(), s.damper2.output(),
                                                   src ? src->stress_v : 0.0, src ? src->stress_p : 0.0);
    const double gb = cfg.gamma * cfg.beta;
    const double sigma_v = cfg.alpha * vx - gb * px;
    const double sigma_p = cfg.beta * px - gb * vx;

    StateRate r;
    r.v = s.v_t;
    r.p = s.p_t;
    r.v[0] = 0.0;
    r.p[0] = 0.0;
    r.v_t = Eigen::VectorXd::Zero(n + 1);
    r.p_t = Eigen::VectorXd::Zero(n + 1);
    for (Eigen::Index j = 1; j < n; ++j) {
        r.v_t[j] = (sv[j] - sv[j - 1]) / (dx * cfg.rho);
        r.p_t[j] = (sp[j] - sp[j - 1]) / (dx * cfg.mag_mu);
    }
    r.v_t[n] = 2.0 * (sigma_v - sv[n - 1]) / (dx * cfg.rho);
    r.p_t[n] = 2.0 * (sigma_p - sp[n - 1]) / (dx * cfg.mag_mu);

    const double u1 = s.v_t[n];
    const double u2 = s.p_t[n];
    r.damper1 = -s.damper1.rates() * s.damper1.modal_state + s.damper1.kernel_values * u1;
    r.damper2 = -s.damper2.rates() * s.damper2.modal_state + s.damper2.kernel_values * u2;

    if (src) {
        if (src->v_t.size()) r.v_t.tail(n) += src->v_t.tail(n);
        if (src->p_t.size()) r.p_t.tail(n) += src->p_t.tail(n);
    }
    return r;
}

}  // namespace detail

/// Semi-discrete rate of the non-thermal system. A theta field, if present, is ignored.
inline StateRate rhs_nonthermal(const BeamConfig& cfg, const Grid& grid, const BeamState& s,
                                const SourceTerms* src = nullptr) {
    detail::check_sizes(cfg, grid, s);
    return detail::mechanical_rate(cfg, grid, s, src);
}

/// Semi-discrete rate of the thermal system.
inline StateRate rhs_thermal(const BeamConfig& cfg, const Grid& grid, const BeamState& s,
                             const SourceTerms* src = nullptr) {
    if (!cfg.thermal) throw ConfigError("rhs_thermal called with thermal = false");
    detail::check_sizes(cfg, grid, s);
    StateRate r = detail::mechanical_rate(cfg, grid, s, src);

    const auto n = static_cast<Eigen::Index>(grid.n_cells);
    const double dx = grid.dx;
    const auto& th = s.theta;  // th[c] at x_{c+1/2}
    const auto& f = s.v_t;

    // theta_x at node j from the two adjacent cells; theta(L) = 0 half a cell past the last one
    for (Eigen::Index j = 1; j < n; ++j) r.v_t[j] -= cfg.delta / cfg.rho * (th[j] - th[j - 1]) / dx;
    r.v_t[n] -= cfg.delta / cfg.rho * (-2.0 * th[n - 1] / dx);

    // face fluxes: zero at x = 0 (mirror ghost), one-sided to theta(L) = 0 at the tip
    r.theta = Eigen::VectorXd::Zero(n);
    for (Eigen::Index c = 0; c < n; ++c) {
        const double left = c == 0 ? 0.0 : (th[c] - th[c - 1]) / dx;
        const double right = c + 1 == n ? -2.0 * th[c] / dx : (th[c + 1] - th[c]) / dx;
        r.theta[c] = cfg.kappa / cfg.c_heat * (right - left) / dx - cfg.delta / cfg.c_heat * (f[c + 1] - f[c]) / dx;
    }
    if (src && src->theta.size()) r.theta += src->theta;
    return r;
}

inline StateRate rhs(const BeamConfig& cfg, const Grid& grid, const BeamState& s, const SourceTerms* src = nullptr) {
    return cfg.thermal ? rhs_thermal(cfg, grid, s, src) : rhs_nonthermal(cfg, grid, s, src);
}

/// Throws DomainError naming the first broken invariant.
inline void validate_state(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    detail::check_sizes(cfg, grid, s);
    if (s.v[0] != 0.0 || s.p[0] != 0.0) throw DomainError("state violates V(0) = P(0) = 0");
    if (s.v_t[0] != 0.0 || s.p_t[0] != 0.0) throw DomainError("state violates V_t(0) = P_t(0) = 0");
    auto finite = [](const auto& x) { return x.allFinite(); };
    if (!finite(s.v) || !finite(s.v_t) || !finite(s.p) || !finite(s.p_t) || !finite(s.theta) ||
        !finite(s.damper1.modal_state) || !finite(s.damper2.modal_state))
        throw DomainError("state contains non-finite values");
}

inline const std::vector<std::string>& initial_condition_names() {
    static const std::vector<std::string> names{"zero", "fundamental", "pluck", "coupled"};
    return names;
}

/// Library of initial data. All damper modes start at zero.
///   zero         everything 0
///   fundamental  V = sin(pi x/2L), theta = cos(pi x/2L)  (theta only if thermal)
///   pluck        V = min(2x/L, 1), a kinked profile with a broadband spectrum
///   coupled      V = sin(pi x/2L), P = gamma sin(pi x/2L) + sin(3 pi x/2L)/2, V_t = sin(3 pi x/2L)
inline BeamState initial_condition(const std::string& name, const BeamConfig& cfg, const Grid& grid,
                                   std::size_t n_modes) {
    const auto m = static_cast<Eigen::Index>(grid.n_cells) + 1;
    BeamState s;
    s.v = s.v_t = s.p = s.p_t = Eigen::VectorXd::Zero(m);
    if (cfg.thermal) s.theta = Eigen::VectorXd::Zero(m - 1);
    std::tie(s.damper1, s.damper2) = make_dampers(cfg, n_modes);

    const double k = std::numbers::pi / (2.0 * cfg.length);
    const Eigen::VectorXd x = grid.nodes();
    const Eigen::ArrayXd xc = grid.centers().array();
    if (name == "zero") {
    } else if (name == "fundamental") {
        s.v = (k * x.array()).sin().matrix();
        if (cfg.thermal) s.theta = (k * xc).cos().matrix();
    } else if (name == "pluck") {
        s.v = (2.0 * x.array() / cfg.length).min(1.0).matrix();
    } else if (name == "coupled") {
        s.v = (k * x.array()).sin().matrix();
        s.p = (cfg.gamma * (k * x.array()).sin() + 0.5 * (3.0 * k * x.array()).sin()).matrix();
        s.v_t = (3.0 * k * x.array()).sin().matrix();
        if (cfg.thermal) s.theta = (k * xc).cos().matrix();
    } else {
        throw ConfigError("unknown initial condition '" + name + "'");
    }
    s.v[0] = s.p[0] = s.v_t[0] = s.p_t[0] = 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Linear-system view: the stacked state y = (V_1..n, f_1..n, P_1..n, g_1..n,
// phi1, phi2, theta cells) and the sparse matrix A with y' = A y.

struct StateLayout {
    Eigen::Index n = 0, modes1 = 0, modes2 = 0;
    bool thermal = false;

    StateLayout(const Grid& grid, const BeamState& s, bool th)
        : n(static_cast<Eigen::Index>(grid.n_cells)), modes1(s.damper1.nodes.size()),
          modes2(s.damper2.nodes.size()), thermal(th) {}

    Eigen::Index v(Eigen::Index j) const { return j - 1; }
    Eigen::Index f(Eigen::Index j) const { return n + j - 1; }
    Eigen::Index p(Eigen::Index j) const { return 2 * n + j - 1; }
    Eigen::Index g(Eigen::Index j) const { return 3 * n + j - 1; }
    Eigen::Index phi1(Eigen::Index k) const { return 4 * n + k; }
    Eigen::Index phi2(Eigen::Index k) const { return 4 * n + modes1 + k; }
    Eigen::Index theta(Eigen::Index c) const { return 4 * n + modes1 + modes2 + c; }
    Eigen::Index size() const { return 4 * n + modes1 + modes2 + (thermal ? n : 0); }
};

inline Eigen::VectorXd pack(const StateLayout& L, const BeamState& s) {
    Eigen::VectorXd y(L.size());
    for (Eigen::Index j = 1; j <= L.n; ++j) {
        y[L.v(j)] = s.v[j];
        y[L.f(j)] = s.v_t[j];
        y[L.p(j)] = s.p[j];
        y[L.g(j)] = s.p_t[j];
    }
    for (Eigen::Index k = 0; k < L.modes1; ++k) y[L.phi1(k)] = s.damper1.modal_state[k];
    for (Eigen::Index k = 0; k < L.modes2; ++k) y[L.phi2(k)] = s.damper2.modal_state[k];
    if (L.thermal)
        for (Eigen::Index j = 0; j < L.n; ++j) y[L.theta(j)] = s.theta[j];
    return y;
}

/// Writes y back into `s` (which supplies the damper nodes and weights).
inline void unpack(const StateLayout& L, const Eigen::VectorXd& y, BeamState& s) {
    for (Eigen::Index j = 1; j <= L.n; ++j) {
        s.v[j] = y[L.v(j)];
        s.v_t[j] = y[L.f(j)];
        s.p[j] = y[L.p(j)];
        s.p_t[j] = y[L.g(j)];
    }
    s.v[0] = s.v_t[0] = s.p[0] = s.p_t[0] = 0.0;
    for (Eigen::Index k = 0; k < L.modes1; ++k) s.damper1.modal_state[k] = y[L.phi1(k)];
    for (Eigen::Index k = 0; k < L.modes2; ++k) s.damper2.modal_state[k] = y[L.phi2(k)];
    if (L.thermal)
        for (Eigen::Index c = 0; c < L.n; ++c) s.theta[c] = y[L.theta(c)];
}

/// Stacked forcing vector for the sources (zero where no source acts).
inline Eigen::VectorXd pack_sources(const BeamConfig& cfg, const Grid& grid, const StateLayout& L,
                                    const SourceTerms& src) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(L.size());
    for (Eigen::Index j = 1; j <= L.n; ++j) {
        if (src.v_t.size()) b[L.f(j)] = src.v_t[j];
        if (src.p_t.size()) b[L.g(j)] = src.p_t[j];
    }
    b[L.f(L.n)] += 2.0 * src.stress_v / (grid.dx * cfg.rho);
    b[L.g(L.n)] += 2.0 * src.stress_p / (grid.dx * cfg.mag_mu);
    if (L.thermal && src.theta.size())
        for (Eigen::Index j = 0; j < L.n; ++j) b[L.theta(j)] = src.theta[j];
    return b;
}

/// Sparse generator A of the semi-discrete system, y' = A y, in the stacked layout.
/// Damper banks come from `s` (only nodes/weights are used).
inline Eigen::SparseMatrix<double> assemble_system(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    const StateLayout L(grid, s, cfg.thermal);
    const Eigen::Index n = L.n;
    const double dx = grid.dx;
    const double gb = cfg.gamma * cfg.beta;
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<std::size_t>(16 * n + 4 * (L.modes1 + L.modes2)));

    for (Eigen::Index j = 1; j <= n; ++j) {
        t.emplace_back(L.v(j), L.f(j), 1.0);
        t.emplace_back(L.p(j), L.g(j), 1.0);
    }

    // cell stress c (nodes c-1, c) added into row with factor w: w * (a DV_c + b DP_c)
    auto add_cell = [&](Eigen::Index row, Eigen::Index c, double w, double a, double b) {
        const double ca = w * a / dx, cb = w * b / dx;
        t.emplace_back(row, L.v(c), ca);
        t.emplace_back(row, L.p(c), cb);
        if (c > 1) {
            t.emplace_back(row, L.v(c - 1), -ca);
            t.emplace_back(row, L.p(c - 1), -cb);
        }
    };
    for (Eigen::Index j = 1; j < n; ++j) {
        const double wf = 1.0 / (dx * cfg.rho), wg = 1.0 / (dx * cfg.mag_mu);
        add_cell(L.f(j), j + 1, wf, cfg.alpha, -gb);
        add_cell(L.f(j), j, -wf, cfg.alpha, -gb);
        add_cell(L.g(j), j + 1, wg, -gb, cfg.beta);
        add_cell(L.g(j), j, -wg, -gb, cfg.beta);
    }
    const double wf = 2.0 / (dx * cfg.rho), wg = 2.0 / (dx * cfg.mag_mu);
    add_cell(L.f(n), n, -wf, cfg.alpha, -gb);
    add_cell(L.g(n), n, -wg, -gb, cfg.beta);

    // tip stress = -l O, O = scale * sum w mu phi
    const auto& d1 = s.damper1;
    const auto& d2 = s.damper2;
    const double o1 = -cfg.frac1.gain * d1.params.output_scale();
    const double o2 = -cfg.frac2.gain * d2.params.output_scale();
    for (Eigen::Index k = 0; k < L.modes1; ++k) {
        if (o1 != 0.0) t.emplace_back(L.f(n), L.phi1(k), wf * o1 * d1.weights[k] * d1.kernel_values[k]);
        t.emplace_back(L.phi1(k), L.phi1(k), -(d1.nodes[k] * d1.nodes[k] + d1.params.eta));
        t.emplace_back(L.phi1(k), L.f(n), d1.kernel_values[k]);
    }
    for (Eigen::Index k = 0; k < L.modes2; ++k) {
        if (o2 != 0.0) t.emplace_back(L.g(n), L.phi2(k), wg * o2 * d2.weights[k] * d2.kernel_values[k]);
        t.emplace_back(L.phi2(k), L.phi2(k), -(d2.nodes[k] * d2.nodes[k] + d2.params.eta));
        t.emplace_back(L.phi2(k), L.g(n), d2.kernel_values[k]);
    }

    if (cfg.thermal) {
        const double cv = cfg.delta / cfg.rho, ct = cfg.delta / cfg.c_heat, kt = cfg.kappa / cfg.c_heat;
        for (Eigen::Index j = 1; j < n; ++j) {
            t.emplace_back(L.f(j), L.theta(j), -cv / dx);
            t.emplace_back(L.f(j), L.theta(j - 1), cv / dx);
        }
        t.emplace_back(L.f(n), L.theta(n - 1), 2.0 * cv / dx);

        const double k2 = kt / (dx * dx);
        for (Eigen::Index c = 0; c < n; ++c) {
            if (c > 0) {
                t.emplace_back(L.theta(c), L.theta(c - 1), k2);
                t.emplace_back(L.theta(c), L.theta(c), -k2);
            }
            if (c + 1 < n) {
                t.emplace_back(L.theta(c), L.theta(c + 1), k2);
                t.emplace_back(L.theta(c), L.theta(c), -k2);
            } else {
                t.emplace_back(L.theta(c), L.theta(c), -2.0 * k2);
            }
            t.emplace_back(L.theta(c), L.f(c + 1), -ct / dx);
            if (c > 0) t.emplace_back(L.theta(c), L.f(c), ct / dx);
        }
    }

    Eigen::SparseMatrix<double> A(L.size(), L.size());
    A.setFromTriplets(t.begin(), t.end());
    return A;
}

// ---------------------------------------------------------------------------
// Snapshots: CSV with '#' metadata lines, a nodal table, a cell table for theta
// (thermal only) and one table per damper.

namespace detail {
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw ConfigError(where + ": cannot parse number '" + s + "'");
    return v;
}
}  // namespace detail

inline void write_snapshot(std::ostream& os, const Grid& grid, const BeamState& s) {
    using detail::fmt17;
    os << "# schema_version " << kSchemaVersion << "\n";
    os << "# t " << fmt17(s.t) << "\n";
    os << "# length " << fmt17(grid.length) << "\n";
    os << "x,v,v_t,p,p_t\n";
    for (Eigen::Index j = 0; j < s.v.size(); ++j)
        os << fmt17(grid.x(static_cast<std::size_t>(j))) << ',' << fmt17(s.v[j]) << ',' << fmt17(s.v_t[j]) << ','
           << fmt17(s.p[j]) << ',' << fmt17(s.p_t[j]) << '\n';
    if (s.thermal()) {
        os << "# theta cell midpoints\n";
        os << "x,theta\n";
        for (Eigen::Index c = 0; c < s.theta.size(); ++c)
            os << fmt17((static_cast<double>(c) + 0.5) * grid.dx) << ',' << fmt17(s.theta[c]) << '\n';
    }
    const DiffusiveOperator* ds[] = {&s.damper1, &s.damper2};
    for (int i = 0; i < 2; ++i) {
        const auto& d = *ds[i];
        os << "# damper" << (i + 1) << " a " << fmt17(d.params.a) << " eta " << fmt17(d.params.eta) << " gain "
           << fmt17(d.params.gain) << "\n";
        os << "k,xi,weight,mu,phi\n";
        for (Eigen::Index k = 0; k < d.nodes.size(); ++k)
            os << k << ',' << fmt17(d.nodes[k]) << ',' << fmt17(d.weights[k]) << ',' << fmt17(d.kernel_values[k])
               << ',' << fmt17(d.modal_state[k]) << '\n';
    }
}

inline void write_snapshot(const std::string& path, const Grid& grid, const BeamState& s) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open snapshot for writing: " + path);
    write_snapshot(os, grid, s);
}

inline BeamState read_snapshot(std::istream& is, const std::string& where = "snapshot") {
    BeamState s;
    std::string line;
    std::vector<std::vector<double>> nodal;
    std::vector<double> theta;
    std::vector<std::vector<double>> damp[2];
    FracParams params[2];
    int section = -2;  // -2 nodal, -1 theta, 0/1 damper
    bool saw_version = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string here = where + ":" + std::to_string(lineno);
        if (line[0] == '#') {
            std::istringstream ls(line.substr(1));
            std::string key;
            ls >> key;
            if (key == "schema_version") {
                std::string ver;
                ls >> ver;
                if (ver.substr(0, ver.find('.')) != "1")
                    throw ConfigError(here + ": unsupported schema_version " + ver);
                saw_version = true;
            } else if (key == "t") {
                std::string v;
                ls >> v;
                s.t = detail::parse_double(v, here);
            } else if (key == "theta") {
                section = -1;
            } else if (key == "damper1" || key == "damper2") {
                section = key == "damper1" ? 0 : 1;
                std::string name, val;
                while (ls >> name >> val) {
                    const double x = detail::parse_double(val, here);
                    if (name == "a") params[section].a = x;
                    else if (name == "eta") params[section].eta = x;
                    else if (name == "gain") params[section].gain = x;
                }
            }
            continue;
        }
        if (line[0] == 'x' || line[0] == 'k') continue;
        std::vector<double> row;
        for (const auto& item : detail::split_csv(line)) row.push_back(detail::parse_double(item, here));
        if (section == -2) {
            if (row.size() != 5u) throw ConfigError(here + ": wrong column count");
            nodal.push_back(std::move(row));
        } else if (section == -1) {
            if (row.size() != 2u) throw ConfigError(here + ": wrong theta column count");
            theta.push_back(row[1]);
        } else {
            if (row.size() != 5u) throw ConfigError(here + ": wrong damper column count");
            damp[section].push_back(std::move(row));
        }
    }
    if (!saw_version) throw ConfigError(where + ": missing schema_version");
    if (nodal.empty() || damp[0].empty() || damp[1].empty()) throw ConfigError(where + ": incomplete snapshot");

    const auto m = static_cast<Eigen::Index>(nodal.size());
    s.v.resize(m);
    s.v_t.resize(m);
    s.p.resize(m);
    s.p_t.resize(m);
    for (Eigen::Index j = 0; j < m; ++j) {
        const auto& r = nodal[static_cast<std::size_t>(j)];
        s.v[j] = r[1];
        s.v_t[j] = r[2];
        s.p[j] = r[3];
        s.p_t[j] = r[4];
    }
    if (!theta.empty()) s.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    DiffusiveOperator* ds[] = {&s.damper1, &s.damper2};
    for (int i = 0; i < 2; ++i) {
        auto& d = *ds[i];
        const auto& rows = damp[i];
        const auto nm = static_cast<Eigen::Index>(rows.size());
        d.params = params[i];
        d.nodes.resize(nm);
        d.weights.resize(nm);
        d.kernel_values.resize(nm);
        d.modal_state.resize(nm);
        for (Eigen::Index k = 0; k < nm; ++k) {
            const auto& r = rows[static_cast<std::size_t>(k)];
            d.nodes[k] = r[1];
            d.weights[k] = r[2];
            d.kernel_values[k] = r[3];
            d.modal_state[k] = r[4];
        }
    }
    return s;
}

inline BeamState read_snapshot(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open snapshot: " + path);
    return read_snapshot(is, path);
}

}  // namespace piezo
