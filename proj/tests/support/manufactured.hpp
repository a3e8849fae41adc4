#pragma once

// Manufactured solution for convergence studies:
//   V     = sin(kv x) cos(w t)
//   P     = sin(kp x) (1 - cos(w t))
//   theta = cos(kt x) exp(-t),  kt = pi/(2L)  (meets theta_x(0) = theta(L) = 0)
// Both tip velocities are multiples of sin(w t), so the damper modes driven by them
// have the closed form phi_k = c mu_k g_k(t) with
//   g(t) = int_0^t exp(-r (t-s)) sin(w s) ds = (r sin wt - w cos wt + w exp(-r t)) / (r^2 + w^2).
// The tip stress sources cancel the mismatch between the exact boundary stress and
// -l O evaluated on those exact modes.

#include <cmath>
#include <numbers>

#include "piezo/beam_model.hpp"
#include "piezo/time_integrator.hpp"

namespace piezo::testing {

struct Manufactured {
    BeamConfig cfg;
    double w = 2.0;
    double kv, kp, kt;

    explicit Manufactured(const BeamConfig& c)
        : cfg(c),
          kv(0.75 * std::numbers::pi / c.length),
          kp(1.25 * std::numbers::pi / c.length),
          kt(0.5 * std::numbers::pi / c.length) {}

    double V(double x, double t) const { return std::sin(kv * x) * std::cos(w * t); }
    double P(double x, double t) const { return std::sin(kp * x) * (1.0 - std::cos(w * t)); }
    double theta(double x, double t) const { return std::cos(kt * x) * std::exp(-t); }

    static double g(double r, double w, double t) {
        return (r * std::sin(w * t) - w * std::cos(w * t) + w * std::exp(-r * t)) / (r * r + w * w);
    }

    void exact_modes(DiffusiveOperator& op, double amplitude, double t) const {
        const Eigen::ArrayXd r = op.rates();
        for (Eigen::Index k = 0; k < op.modal_state.size(); ++k)
            op.modal_state[k] = amplitude * op.kernel_values[k] * g(r[k], w, t);
    }

    /// Tip velocities are -w sin(kv L) sin(wt) and w sin(kp L) sin(wt).
    double amp1() const { return -w * std::sin(kv * cfg.length); }
    double amp2() const { return w * std::sin(kp * cfg.length); }

    BeamState exact(const Grid& grid, double t, std::size_t n_modes) const {
        BeamState s = initial_condition("zero", cfg, grid, n_modes);
        s.t = t;
        for (std::size_t j = 0; j <= grid.n_cells; ++j) {
            const auto i = static_cast<Eigen::Index>(j);
            const double x = grid.nodes()[i];
            s.v[i] = V(x, t);
            s.v_t[i] = -w * std::sin(kv * x) * std::sin(w * t);
            s.p[i] = P(x, t);
            s.p_t[i] = w * std::sin(kp * x) * std::sin(w * t);
        }
        s.v[0] = s.v_t[0] = s.p[0] = s.p_t[0] = 0.0;
        if (cfg.thermal) {
            const Eigen::VectorXd xc = grid.centers();
            for (Eigen::Index c = 0; c < xc.size(); ++c) s.theta[c] = theta(xc[c], t);
        }
        exact_modes(s.damper1, amp1(), t);
        exact_modes(s.damper2, amp2(), t);
        return s;
    }

    /// Residual forcing of the continuous equations, sampled on the grid.
    SourceTerms forcing(const Grid& grid, const BeamState& proto, double t) const {
        const BeamConfig& c = cfg;
        const double gb = c.gamma * c.beta;
        const double cw = std::cos(w * t), sw = std::sin(w * t), et = std::exp(-t);
        SourceTerms src;
        const auto m = static_cast<Eigen::Index>(grid.n_cells) + 1;
        src.v_t = Eigen::VectorXd::Zero(m);
        src.p_t = Eigen::VectorXd::Zero(m);
        const Eigen::VectorXd x = grid.nodes();
        for (Eigen::Index j = 1; j < m; ++j) {
            const double sv = std::sin(kv * x[j]), sp = std::sin(kp * x[j]);
            const double vtt = -w * w * sv * cw;
            const double ptt = w * w * sp * cw;
            const double vxx = -kv * kv * sv * cw;
            const double pxx = -kp * kp * sp * (1.0 - cw);
            src.v_t[j] = vtt - (c.alpha * vxx - gb * pxx) / c.rho;
            src.p_t[j] = ptt - (c.beta * pxx - gb * vxx) / c.mag_mu;
            if (c.thermal) {
                const double thx = -kt * std::sin(kt * x[j]) * et;
                src.v_t[j] += c.delta / c.rho * thx;
            }
        }
        if (c.thermal) {
            const Eigen::VectorXd xc = grid.centers();
            src.theta.resize(xc.size());
            for (Eigen::Index i = 0; i < xc.size(); ++i) {
                const double th = std::cos(kt * xc[i]) * et;
                const double tht = -th;
                const double thxx = -kt * kt * th;
                const double vxt = -w * kv * std::cos(kv * xc[i]) * sw;
                src.theta[i] = tht - (c.kappa * thxx - c.delta * vxt) / c.c_heat;
            }
        }
        const double L = c.length;
        const double vx = kv * std::cos(kv * L) * cw;
        const double px = kp * std::cos(kp * L) * (1.0 - cw);
        DiffusiveOperator d1 = proto.damper1, d2 = proto.damper2;
        exact_modes(d1, amp1(), t);
        exact_modes(d2, amp2(), t);
        src.stress_v = c.alpha * vx - gb * px + c.frac1.gain * d1.output();
        src.stress_p = c.beta * px - gb * vx + c.frac2.gain * d2.output();
        return src;
    }

    /// Discrete L2 norm of the V, P and theta errors (tip node at half weight).
    double error(const Grid& grid, const BeamState& s) const {
        const BeamState e = exact(grid, s.t, s.damper1.size());
        const auto n = static_cast<Eigen::Index>(grid.n_cells);
        double acc = 0.0;
        for (Eigen::Index j = 1; j <= n; ++j) {
            const double h = j == n ? 0.5 * grid.dx : grid.dx;
            acc += h * (std::pow(s.v[j] - e.v[j], 2) + std::pow(s.p[j] - e.p[j], 2));
        }
        if (cfg.thermal) acc += grid.dx * (s.theta - e.theta).squaredNorm();
        return std::sqrt(acc);
    }

    /// Error at t_end of a run from the exact initial data with the default dt.
    double run_error(std::size_t n_cells, double t_end, std::size_t n_modes = 64) const {
        const Grid grid(n_cells, cfg.length);
        const BeamState init = exact(grid, 0.0, n_modes);
        RunOptions opt;
        opt.t_end = t_end;
        opt.report_cadence = 1u << 30;
        opt.forcing = [this, &grid, init](double t) { return forcing(grid, init, t); };
        const RunResult r = run(cfg, grid, init, opt);
        return error(grid, r.final_state);
    }
};

}  // namespace piezo::testing
