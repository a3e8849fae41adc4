#pragma once

// Implicit-midpoint time stepping of the full augmented system (beam fields,
// damper modes, temperature) together with per-step energy accounting.
//
// The midpoint rule preserves quadratic invariants of linear systems, so for the
// semi-discrete energy E = y^T W y / 2 it gives exactly
//     E^{n+1} - E^n = -dt * D(y^{n+1/2}),
// where D is the semi-discrete dissipation rate. The energy therefore never
// increases, whatever dt and dx are.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "piezo/beam_model.hpp"

namespace piezo {

struct EnergyReport {
    double t = 0.0;
    double energy = 0.0;
    double boundary_dissipation = 0.0;  ///< at time t
    double thermal_dissipation = 0.0;   ///< at time t
    /// |(E^{n+1} - E^n)/dt + (D^n + D^{n+1})/2| for the step ending at t; 0 for the initial report.
    double identity_residual = 0.0;

    double total_dissipation() const { return boundary_dissipation + thermal_dissipation; }
};

/// Semi-discrete energy: trapezoid weights on nodal velocities (half weight at the tip),
/// midpoint sums on cell gradients and cell temperatures, plus the damper banks.
inline double compute_energy(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    detail::check_sizes(cfg, grid, s);
    const auto n = static_cast<Eigen::Index>(grid.n_cells);
    const double dx = grid.dx;
    double kin = 0.0;
    for (Eigen::Index j = 1; j <= n; ++j) {
        const double h = j == n ? 0.5 * dx : dx;
        kin += h * (cfg.rho * s.v_t[j] * s.v_t[j] + cfg.mag_mu * s.p_t[j] * s.p_t[j]);
    }
    double pot = 0.0;
    const double a1 = cfg.alpha1();
    for (Eigen::Index c = 1; c <= n; ++c) {
        const double dv = (s.v[c] - s.v[c - 1]) / dx;
        const double dp = (s.p[c] - s.p[c - 1]) / dx;
        const double shear = cfg.gamma * dv - dp;
        pot += dx * (a1 * dv * dv + cfg.beta * shear * shear);
    }
    double heat = 0.0;
    if (cfg.thermal) {
        heat = dx * cfg.c_heat * s.theta.squaredNorm();
    }
    return 0.5 * (kin + pot + heat) + s.damper1.stored_energy() + s.damper2.stored_energy();
}

/// sin(a pi)/pi * sum_k w_k (xi_k^2 + eta)(l1 phi1_k^2 + l2 phi2_k^2), per bank.
inline double boundary_dissipation(const BeamState& s) { return s.damper1.dissipation() + s.damper2.dissipation(); }

/// kappa * int theta_x^2 over the cell faces; the tip face sees theta(L) = 0 half a cell away.
inline double thermal_dissipation(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    if (!cfg.thermal) return 0.0;
    const auto n = static_cast<Eigen::Index>(grid.n_cells);
    const double dx = grid.dx;
    double acc = 0.0;
    for (Eigen::Index c = 1; c < n; ++c) {
        const double d = (s.theta[c] - s.theta[c - 1]) / dx;
        acc += dx * d * d;
    }
    const double tip = 2.0 * s.theta[n - 1] / dx;
    acc += 0.5 * dx * tip * tip;
    return cfg.kappa * acc;
}

inline EnergyReport energy_report(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    return {s.t, compute_energy(cfg, grid, s), boundary_dissipation(s), thermal_dissipation(cfg, grid, s), 0.0};
}

/// dx / (2 * max wave speed).
inline double default_dt(const BeamConfig& cfg, const Grid& grid) { return grid.dx / (2.0 * cfg.max_wave_speed()); }

/// Forcing callback for manufactured solutions, sampled at step midpoints.
using ForcingFn = std::function<SourceTerms(double t)>;

/// Implicit midpoint for y' = A y + F(t). The matrix is factorized once at construction.
class MidpointStepper {
public:
    MidpointStepper(const BeamConfig& cfg, const Grid& grid, const BeamState& prototype, double dt)
        : cfg_(cfg), grid_(grid), layout_(grid, prototype, cfg.thermal), dt_(dt) {
        if (!(dt > 0.0)) throw DomainError("dt must be > 0");
        cfg.validate();
        const Eigen::SparseMatrix<double> A = assemble_system(cfg, grid, prototype);
        Eigen::SparseMatrix<double> M(A.rows(), A.cols());
        M.setIdentity();
        M -= 0.5 * dt * A;
        M.makeCompressed();
        solver_.analyzePattern(M);
        solver_.factorize(M);
        if (solver_.info() != Eigen::Success) throw InvariantError("midpoint system is singular: " + solver_.lastErrorMessage());
    }

    double dt() const { return dt_; }
    const StateLayout& layout() const { return layout_; }

    /// Advances `s` by one step; returns the report at the new time.
    EnergyReport step(BeamState& s, const EnergyReport& before, const ForcingFn* forcing = nullptr) {
        const Eigen::VectorXd y = pack(layout_, s);
        Eigen::VectorXd b = y;
        if (forcing && *forcing) b += 0.5 * dt_ * pack_sources(cfg_, grid_, layout_, (*forcing)(s.t + 0.5 * dt_));
        const Eigen::VectorXd mid = solver_.solve(b);
        if (solver_.info() != Eigen::Success) throw InvariantError("midpoint solve failed");
        unpack(layout_, 2.0 * mid - y, s);
        s.t += dt_;

        EnergyReport r = energy_report(cfg_, grid_, s);
        r.identity_residual =
            std::abs((r.energy - before.energy) / dt_ + 0.5 * (before.total_dissipation() + r.total_dissipation()));
        return r;
    }

private:
    BeamConfig cfg_;
    Grid grid_;
    StateLayout layout_;
    double dt_;
    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> solver_;
};

/// One step from scratch (factorizes each call; use MidpointStepper for loops).
inline std::pair<BeamState, EnergyReport> step(const BeamConfig& cfg, const Grid& grid, BeamState state, double dt) {
    MidpointStepper stepper(cfg, grid, state, dt);
    const EnergyReport before = energy_report(cfg, grid, state);
    EnergyReport r = stepper.step(state, before);
    return {std::move(state), r};
}

struct RunOptions {
    std::optional<double> dt;     ///< default_dt if empty
    double t_end = 10.0;
    std::size_t report_cadence = 1;  ///< report every k-th step (the last step is always reported)
    std::vector<double> snapshot_times;
    ForcingFn forcing;
    /// Relative slack for the per-step monotonicity check (rounding in the energy sums).
    double monotone_tolerance = 1e-13;
};

using Observer = std::function<void(const BeamState&, const EnergyReport&)>;

struct RunResult {
    std::vector<EnergyReport> reports;
    std::vector<BeamState> snapshots;
    BeamState final_state;
    double dt = 0.0;
    std::size_t steps = 0;
    std::size_t energy_increases = 0;  ///< steps with E^{n+1} > E^n beyond rounding
    double worst_increase = 0.0;       ///< largest relative increase seen
    double max_identity_residual = 0.0;

    bool energy_monotone() const { return energy_increases == 0; }
};

/// Steps from `initial` until t reaches t_end (to within half a step). Observers see
/// every reported state. Deterministic: identical inputs give identical outputs, and a
/// restart from a snapshot reproduces the remaining reports bit for bit.
inline RunResult run(const BeamConfig& cfg, const Grid& grid, const BeamState& initial, const RunOptions& opt,
                     const std::vector<Observer>& observers = {}) {
    if (!(opt.t_end >= 0.0)) throw DomainError("t_end must be >= 0");
    if (opt.report_cadence == 0) throw DomainError("report_cadence must be >= 1");
    validate_state(cfg, grid, initial);

    RunResult out;
    out.dt = opt.dt.value_or(default_dt(cfg, grid));
    BeamState s = initial;
    EnergyReport prev = energy_report(cfg, grid, s);
    out.reports.push_back(prev);
    for (const auto& obs : observers) obs(s, prev);

    std::vector<double> pending = opt.snapshot_times;
    std::sort(pending.begin(), pending.end());
    auto take_snapshots = [&](const BeamState& st) {
        while (!pending.empty() && st.t >= pending.front() - 0.5 * out.dt) {
            out.snapshots.push_back(st);
            pending.erase(pending.begin());
        }
    };
    take_snapshots(s);

    if (s.t >= opt.t_end - 0.5 * out.dt) {
        out.final_state = std::move(s);
        return out;
    }

    MidpointStepper stepper(cfg, grid, s, out.dt);
    const ForcingFn* forcing = opt.forcing ? &opt.forcing : nullptr;
    while (s.t < opt.t_end - 0.5 * out.dt) {
        EnergyReport r = stepper.step(s, prev, forcing);
        ++out.steps;
        if (!forcing && r.energy > prev.energy * (1.0 + opt.monotone_tolerance) + std::numeric_limits<double>::min()) {
            ++out.energy_increases;
            out.worst_increase = std::max(out.worst_increase, (r.energy - prev.energy) / prev.energy);
        }
        out.max_identity_residual = std::max(out.max_identity_residual, r.identity_residual);
        const bool last = !(s.t < opt.t_end - 0.5 * out.dt);
        if (out.steps % opt.report_cadence == 0 || last) {
            out.reports.push_back(r);
            for (const auto& obs : observers) obs(s, r);
        }
        take_snapshots(s);
        prev = r;
    }
    out.final_state = std::move(s);
    return out;
}

}  // namespace piezo
