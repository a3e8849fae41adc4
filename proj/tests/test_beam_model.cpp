#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "piezo/beam_model.hpp"
#include "piezo/time_integrator.hpp"

using namespace piezo;

namespace {

constexpr double pi = std::numbers::pi;

BeamState random_state(const BeamConfig& cfg, const Grid& grid, std::size_t modes, unsigned seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    BeamState s = initial_condition("zero", cfg, grid, modes);
    auto fill = [&](auto& x) {
        for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = u(gen);
    };
    fill(s.v);
    fill(s.v_t);
    fill(s.p);
    fill(s.p_t);
    fill(s.theta);
    fill(s.damper1.modal_state);
    fill(s.damper2.modal_state);
    s.v[0] = s.v_t[0] = s.p[0] = s.p_t[0] = 0.0;
    return s;
}

Eigen::VectorXd packed_rate(const BeamConfig& cfg, const Grid& grid, const BeamState& s) {
    const StateRate r = rhs(cfg, grid, s);
    BeamState as = s;
    as.v = r.v;
    as.v_t = r.v_t;
    as.p = r.p;
    as.p_t = r.p_t;
    if (cfg.thermal) as.theta = r.theta;
    as.damper1.modal_state = r.damper1;
    as.damper2.modal_state = r.damper2;
    return pack(StateLayout(grid, s, cfg.thermal), as);
}

}  // namespace

TEST(BeamConfig, PresetsAreValid) {
    EXPECT_TRUE(BeamConfig::paper_nonthermal().violations().empty());
    EXPECT_TRUE(BeamConfig::paper_thermal().violations().empty());
    EXPECT_FALSE(BeamConfig::paper_nonthermal().thermal);
    EXPECT_DOUBLE_EQ(BeamConfig{}.alpha1(), 1.0);
}

TEST(BeamConfig, RejectsDegenerateStiffness) {
    BeamConfig c;
    c.alpha = c.gamma * c.gamma * c.beta;
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        ASSERT_EQ(e.violations().size(), 1u);
        EXPECT_EQ(e.violations().front(), "alpha - gamma^2*beta must be > 0");
    }
}

TEST(BeamConfig, ListsEveryViolation) {
    BeamConfig c;
    c.rho = -1.0;
    c.mag_mu = 0.0;
    c.frac2.a = 1.2;
    const auto v = c.violations("beam.");
    EXPECT_EQ(v.size(), 3u);
    EXPECT_NE(std::find(v.begin(), v.end(), "beam.rho must be > 0"), v.end());
    EXPECT_NE(std::find(v.begin(), v.end(), "beam.damper2.a must satisfy 0 < a < 1"), v.end());
}

TEST(BeamConfig, ThermalConstantsIgnoredWithoutHeat) {
    BeamConfig c;
    c.delta = -3.0;
    c.kappa = 0.0;
    EXPECT_TRUE(c.violations().empty());
    c.thermal = true;
    EXPECT_EQ(c.violations().size(), 2u);
}

TEST(BeamConfig, CharacteristicSpeeds) {
    const auto [slow, fast] = BeamConfig{}.characteristic_speeds();
    // eigenvalues of [[2, -1], [-1, 1]] are (3 -+ sqrt 5)/2
    EXPECT_NEAR(slow * slow, (3.0 - std::sqrt(5.0)) / 2.0, 1e-15);
    EXPECT_NEAR(fast * fast, (3.0 + std::sqrt(5.0)) / 2.0, 1e-14);
    EXPECT_DOUBLE_EQ(BeamConfig{}.max_wave_speed(), std::sqrt(2.0));
}

TEST(Grid, Geometry) {
    const Grid g(10, 2.0);
    EXPECT_DOUBLE_EQ(g.dx, 0.2);
    EXPECT_EQ(g.nodes()[0], 0.0);
    EXPECT_EQ(g.nodes()[10], 2.0);
    EXPECT_DOUBLE_EQ(g.centers()[0], 0.1);
    EXPECT_THROW(Grid(7, 1.0), ConfigError);
    EXPECT_THROW(Grid(10, 0.0), ConfigError);
}

TEST(SolveBoundaryGradients, Homogeneous) {
    auto [vx, px] = solve_boundary_gradients(BeamConfig{}, 0.0, 0.0);
    EXPECT_EQ(vx, 0.0);
    EXPECT_EQ(px, 0.0);
}

TEST(SolveBoundaryGradients, HandSolvedSystem) {
    auto [vx, px] = solve_boundary_gradients(BeamConfig{}, 1.0, 0.0);
    EXPECT_NEAR(vx, -1.0, 1e-15);
    EXPECT_NEAR(px, -1.0, 1e-15);
}

TEST(SolveBoundaryGradients, LinearAndExact) {
    BeamConfig c;
    c.alpha = 3.0;
    c.beta = 0.7;
    c.gamma = 1.3;
    c.frac1.gain = 0.4;
    c.frac2.gain = 2.5;
    for (auto [o1, o2] : {std::pair{0.3, -1.1}, std::pair{2.0, 5.0}}) {
        auto [vx, px] = solve_boundary_gradients(c, o1, o2);
        auto [vx2, px2] = solve_boundary_gradients(c, 2.0 * o1, 2.0 * o2);
        EXPECT_NEAR(vx2, 2.0 * vx, 1e-14);
        EXPECT_NEAR(px2, 2.0 * px, 1e-14);
        const double gb = c.gamma * c.beta;
        EXPECT_NEAR(c.alpha * vx - gb * px, -c.frac1.gain * o1, 1e-14);
        EXPECT_NEAR(c.beta * px - gb * vx, -c.frac2.gain * o2, 1e-14);
    }
}

TEST(Rhs, ZeroStateIsEquilibrium) {
    for (const BeamConfig& c : {BeamConfig::paper_nonthermal(), BeamConfig::paper_thermal()}) {
        const Grid g(16, 1.0);
        const StateRate r = rhs(c, g, initial_condition("zero", c, g, 16));
        EXPECT_EQ(r.v.norm() + r.v_t.norm() + r.p.norm() + r.p_t.norm() + r.theta.norm(), 0.0);
        EXPECT_EQ(r.damper1.matrix().norm() + r.damper2.matrix().norm(), 0.0);
    }
}

TEST(Rhs, ThermalNeedsFlag) {
    const BeamConfig c;
    const Grid g(16, 1.0);
    EXPECT_THROW(rhs_thermal(c, g, initial_condition("zero", c, g, 8)), ConfigError);
}

TEST(Rhs, ZeroCouplingDecouplesHeat) {
    BeamConfig th = BeamConfig::paper_thermal();
    th.delta = 0.0;
    const BeamConfig mech = BeamConfig::paper_nonthermal();
    const Grid g(20, 1.0);
    const BeamState s = random_state(th, g, 8, 3);
    const StateRate a = rhs(th, g, s), b = rhs(mech, g, s);
    EXPECT_EQ(a.v_t, b.v_t);
    EXPECT_EQ(a.p_t, b.p_t);

    BeamState cold = s;
    cold.theta.setZero();
    EXPECT_EQ(rhs(th, g, cold).theta.norm(), 0.0);

    // heat rate independent of the mechanical fields
    BeamState other = random_state(th, g, 8, 4);
    other.theta = s.theta;
    EXPECT_EQ(rhs(th, g, other).theta, a.theta);
}

TEST(Rhs, HeatModeDecayRate) {
    // cos(pi x / 2L) at the cell midpoints is an exact eigenvector of the discrete heat
    // operator; its rate approaches kappa pi^2 / (4 c L^2) at second order
    BeamConfig c = BeamConfig::paper_thermal();
    c.delta = 0.0;
    c.kappa = 0.7;
    c.c_heat = 1.3;
    const double exact = c.kappa * pi * pi / (4.0 * c.c_heat);
    double prev = 0.0;
    for (std::size_t n : {25u, 50u, 100u, 200u}) {
        const Grid g(n, 1.0);
        BeamState s = initial_condition("fundamental", c, g, 8);
        s.v.setZero();
        const Eigen::VectorXd r = rhs(c, g, s).theta;
        const Eigen::VectorXd q = r.cwiseQuotient(s.theta);
        EXPECT_LE((q.array() - q[0]).abs().maxCoeff(), 1e-9 * std::abs(q[0])) << n;
        const double err = std::abs(-q[0] - exact);
        if (prev > 0.0) { EXPECT_NEAR(std::log2(prev / err), 2.0, 0.05) << n; }
        prev = err;
    }
    EXPECT_LE(prev / exact, 1e-4);
}

TEST(InitialCondition, Library) {
    const BeamConfig c = BeamConfig::paper_thermal();
    const Grid g(32, 1.0);
    for (const auto& name : initial_condition_names()) {
        const BeamState s = initial_condition(name, c, g, 16);
        EXPECT_NO_THROW(validate_state(c, g, s)) << name;
        EXPECT_EQ(s.v[0], 0.0);
        EXPECT_EQ(s.p[0], 0.0);
        EXPECT_EQ(s.theta.size(), 32);
        EXPECT_TRUE((s.damper1.modal_state == 0.0).all());
    }
    const BeamState z = initial_condition("zero", c, g, 16);
    EXPECT_EQ(z.v.norm() + z.v_t.norm() + z.p.norm() + z.p_t.norm() + z.theta.norm(), 0.0);

    const BeamState f = initial_condition("fundamental", c, g, 16);
    EXPECT_DOUBLE_EQ(f.v[32], 1.0);
    EXPECT_EQ(f.p.norm(), 0.0);
    EXPECT_EQ(f.v_t.norm(), 0.0);
    // theta_x(0) = 0 by mirror symmetry of cos, theta(L) = 0 from cos(pi/2): the first and
    // last cells see cos(pi dx/4) and sin(pi dx/4)
    EXPECT_DOUBLE_EQ(f.theta[0], std::cos(pi / 128.0));
    EXPECT_NEAR(f.theta[31], std::sin(pi / 128.0), 1e-15);

    EXPECT_THROW(initial_condition("sawtooth", c, g, 16), ConfigError);
    EXPECT_EQ(initial_condition("fundamental", BeamConfig{}, g, 16).theta.size(), 0);
}

TEST(AssembleSystem, MatchesRhs) {
    for (const BeamConfig& c : {BeamConfig::paper_nonthermal(), BeamConfig::paper_thermal()}) {
        const Grid g(24, 1.0);
        const BeamState s = random_state(c, g, 12, 7);
        const Eigen::VectorXd y = pack(StateLayout(g, s, c.thermal), s);
        const Eigen::VectorXd ay = assemble_system(c, g, s) * y;
        const Eigen::VectorXd ry = packed_rate(c, g, s);
        EXPECT_LE((ay - ry).norm(), 1e-12 * ry.norm()) << (c.thermal ? "thermal" : "non-thermal");
    }
}

TEST(AssembleSystem, SkewInEnergyInnerProductWhenConservative) {
    BeamConfig c = BeamConfig::paper_nonthermal();
    c.frac1.gain = c.frac2.gain = 0.0;
    c.gamma = 0.8;
    c.mag_mu = 1.7;
    const Grid g(20, 1.0);
    const BeamState s = initial_condition("zero", c, g, 4);
    const StateLayout L(g, s, false);
    const Eigen::MatrixXd A(assemble_system(c, g, s));
    // W from the energy with weights (rho, mag_mu, alpha1, beta): E = y^T W y / 2
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(L.size(), L.size());
    for (Eigen::Index i = 0; i < L.size(); ++i) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(L.size());
        e[i] = 1.0;
        for (Eigen::Index j = 0; j < L.size(); ++j) {
            Eigen::VectorXd f = Eigen::VectorXd::Zero(L.size());
            f[j] = 1.0;
            BeamState a = s, b = s, ab = s;
            unpack(L, e, a);
            unpack(L, f, b);
            unpack(L, e + f, ab);
            W(i, j) = compute_energy(c, g, ab) - compute_energy(c, g, a) - compute_energy(c, g, b);
        }
    }
    const Eigen::MatrixXd M = W * A;
    EXPECT_LE((M + M.transpose()).norm(), 1e-10 * M.norm());
}

TEST(Decoupling, ZeroPiezoCouplingLeavesVAlone) {
    // with gamma = 0 and delta = 0 the V trajectory must not see P at all
    for (bool thermal : {false, true}) {
        BeamConfig c = thermal ? BeamConfig::paper_thermal() : BeamConfig::paper_nonthermal();
        c.gamma = 0.0;
        c.delta = 0.0;
        const Grid g(40, 1.0);
        BeamState a = initial_condition("coupled", c, g, 32);
        BeamState b = a;
        b.p *= -3.0;
        b.p_t.setConstant(0.25);
        b.p_t[0] = 0.0;
        RunOptions opt;
        opt.t_end = 1.0;
        const RunResult ra = run(c, g, a, opt), rb = run(c, g, b, opt);
        EXPECT_EQ(ra.final_state.v, rb.final_state.v);
        EXPECT_EQ(ra.final_state.v_t, rb.final_state.v_t);
        EXPECT_TRUE((ra.final_state.damper1.modal_state == rb.final_state.damper1.modal_state).all());
        EXPECT_NE(ra.final_state.p, rb.final_state.p);
    }
}

TEST(Decoupling, MatchesStandaloneWaveEquation) {
    // V-block of the gamma = 0 generator against a directly written damped wave operator
    BeamConfig c;
    c.gamma = 0.0;
    c.alpha = 2.5;
    c.rho = 1.5;
    const Grid g(12, 1.0);
    const BeamState s = initial_condition("zero", c, g, 6);
    const StateLayout L(g, s, false);
    const Eigen::MatrixXd A(assemble_system(c, g, s));
    const double dx = g.dx, k = c.alpha / (c.rho * dx * dx);
    const Eigen::Index n = 12;
    for (Eigen::Index j = 1; j <= n; ++j) {
        EXPECT_EQ(A(L.v(j), L.f(j)), 1.0);
        EXPECT_NEAR(A(L.f(j), L.v(j)), -2.0 * k, 1e-12 * k);
        if (j > 1) { EXPECT_NEAR(A(L.f(j), L.v(j - 1)), j == n ? 2.0 * k : k, 1e-12 * k); }
        if (j < n) { EXPECT_NEAR(A(L.f(j), L.v(j + 1)), k, 1e-12 * k); }
        for (Eigen::Index i = 1; i <= n; ++i) EXPECT_EQ(A(L.f(j), L.p(i)), 0.0);
    }
    for (Eigen::Index q = 0; q < L.modes1; ++q) {
        EXPECT_NEAR(A(L.f(n), L.phi1(q)),
                    -2.0 / (dx * c.rho) * c.frac1.gain * c.frac1.output_scale() * s.damper1.weights[q] *
                        s.damper1.kernel_values[q],
                    1e-14);
        EXPECT_EQ(A(L.phi1(q), L.f(n)), s.damper1.kernel_values[q]);
    }
}

TEST(BoundaryIdentity, HoldsAlongRun) {
    const BeamConfig c = BeamConfig::paper_thermal();
    const Grid g(40, 1.0);
    BeamState s = initial_condition("pluck", c, g, 32);
    RunOptions opt;
    opt.t_end = 0.5;
    s = run(c, g, s, opt).final_state;
    const double o1 = read_output(s.damper1), o2 = read_output(s.damper2);
    ASSERT_NE(o1, 0.0);
    auto [vx, px] = solve_boundary_gradients(c, o1, o2);
    const double gb = c.gamma * c.beta;
    EXPECT_NEAR(c.alpha * vx - gb * px, -c.frac1.gain * o1, 1e-14 * (1.0 + std::abs(o1)));
    EXPECT_NEAR(c.beta * px - gb * vx, -c.frac2.gain * o2, 1e-14 * (1.0 + std::abs(o2)));
}

TEST(Snapshot, RoundTripIsExact) {
    const BeamConfig c = BeamConfig::paper_thermal();
    const Grid g(16, 1.0);
    RunOptions opt;
    opt.t_end = 0.3;
    const BeamState s = run(c, g, initial_condition("coupled", c, g, 8), opt).final_state;
    std::stringstream ss;
    write_snapshot(ss, g, s);
    const BeamState r = read_snapshot(ss);
    EXPECT_EQ(r.t, s.t);
    EXPECT_EQ(r.v, s.v);
    EXPECT_EQ(r.v_t, s.v_t);
    EXPECT_EQ(r.p, s.p);
    EXPECT_EQ(r.p_t, s.p_t);
    EXPECT_EQ(r.theta, s.theta);
    EXPECT_TRUE((r.damper1.modal_state == s.damper1.modal_state).all());
    EXPECT_TRUE((r.damper2.nodes == s.damper2.nodes).all());
    EXPECT_TRUE((r.damper2.weights == s.damper2.weights).all());
    EXPECT_TRUE(r.damper1.params == s.damper1.params);
}

TEST(Snapshot, RejectsUnknownMajorVersion) {
    const BeamConfig c;
    const Grid g(8, 1.0);
    std::stringstream ss;
    write_snapshot(ss, g, initial_condition("fundamental", c, g, 4));
    std::string text = ss.str();
    text.replace(text.find("schema_version 1.0"), 18, "schema_version 2.0");
    std::stringstream bad(text);
    EXPECT_THROW(read_snapshot(bad), ConfigError);
}
