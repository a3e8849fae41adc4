#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "piezo/frac_diffusive.hpp"

using namespace piezo;

namespace {
constexpr double pi = std::numbers::pi;
}

TEST(EvaluateMu, QuarterPower) { EXPECT_NEAR(evaluate_mu(4.0, 0.75), std::sqrt(2.0), 1e-15); }

TEST(EvaluateMu, HalfOrderIsOne) {
    for (double xi : {1e-8, 0.3, 1.0, 7.0, 1e6}) EXPECT_EQ(evaluate_mu(xi, 0.5), 1.0);
}

TEST(EvaluateMu, ZeroNode) {
    EXPECT_EQ(evaluate_mu(0.0, 0.75), 0.0);
    EXPECT_TRUE(std::isinf(evaluate_mu(0.0, 0.25)));
}

TEST(EvaluateMu, RejectsOrderOutsideUnitInterval) {
    EXPECT_THROW(evaluate_mu(1.0, 0.0), DomainError);
    EXPECT_THROW(evaluate_mu(1.0, 1.0), DomainError);
    EXPECT_THROW(evaluate_mu(1.0, -0.2), DomainError);
    EXPECT_THROW(evaluate_mu(-1.0, 0.5), DomainError);
}

TEST(ClosedFormMoment, KnownValues) {
    EXPECT_NEAR(closed_form_moment(0.5, 1.0, 0.0), pi, 1e-15);
    EXPECT_NEAR(closed_form_moment(0.5, 4.0, 0.0), pi / 2.0, 1e-15);
    // (pi / sin(0.3 pi)) 2^{-0.7}
    EXPECT_NEAR(closed_form_moment(0.3, 1.0, 1.0), 2.3904035832156782, 1e-14);
}

TEST(ClosedFormMoment, RejectsNonPositiveShift) {
    EXPECT_THROW(closed_form_moment(0.5, 0.0, 0.0), DomainError);
    EXPECT_THROW(closed_form_moment(0.5, -1.0, 0.5), DomainError);
}

TEST(ClosedFormSecondMoments, KnownValues) {
    auto [f1, s1] = closed_form_second_moments(1.0, 0.0);
    EXPECT_NEAR(f1, std::sqrt(pi / 2.0), 1e-15);
    EXPECT_NEAR(s1, std::sqrt(pi) / 4.0, 1e-15);
    auto [f16, s16] = closed_form_second_moments(6.0, 10.0);
    EXPECT_NEAR(f16, std::sqrt(pi / 2.0) / 8.0, 1e-15);
    EXPECT_NEAR(s16, std::sqrt(pi) / 128.0, 1e-16);
    EXPECT_THROW(closed_form_second_moments(0.0, 0.0), DomainError);
}

TEST(ClosedFormSecondMoments, QuadratureAgreesWithinOnePercent) {
    for (double eta : {0.1, 1.0, 10.0}) {
        const auto op = build_quadrature({0.5, eta, 1.0}, 128);
        for (double lam : {1.0, 10.0}) {
            auto [d1, d2] = op.second_moments(lam);
            auto [e1, e2] = closed_form_second_moments(eta, lam);
            EXPECT_LE(std::abs(d1 - e1) / e1, 0.01) << "eta " << eta << " lam " << lam;
            EXPECT_LE(std::abs(d2 - e2) / e2, 0.01) << "eta " << eta << " lam " << lam;
        }
    }
}

TEST(BuildQuadrature, MomentWithinOnePercentOfPi) {
    const auto op = build_quadrature({0.5, 1.0, 1.0}, 128);
    EXPECT_LE(std::abs(op.moment(0.0) - pi) / pi, 0.01);
}

TEST(BuildQuadrature, MomentErrorHalvesPerDoubling) {
    const FracParams p{0.3, 0.1, 1.0};
    const double exact = closed_form_moment(p.a, p.eta, 1.0);
    double prev = 0.0;
    for (std::size_t n : {32u, 64u, 128u, 256u, 512u}) {
        const double err = std::abs(build_quadrature(p, n).moment(1.0) - exact) / exact;
        if (prev > 0.0) {
            EXPECT_GE(prev / err, 1.4) << n;
            EXPECT_LE(prev / err, 2.6) << n;
        }
        prev = err;
    }
}

TEST(BuildQuadrature, Structure) {
    const auto op = build_quadrature({0.7, 2.0, 1.0}, 64);
    ASSERT_EQ(op.size(), 64u);
    EXPECT_EQ(op.weights.size(), 64);
    EXPECT_EQ(op.kernel_values.size(), 64);
    EXPECT_EQ(op.modal_state.size(), 64);
    EXPECT_TRUE((op.modal_state == 0.0).all());
    EXPECT_TRUE((op.weights > 0.0).all());
    EXPECT_GT(op.nodes[0], 0.0);
    for (Eigen::Index k = 1; k < op.nodes.size(); ++k) EXPECT_GT(op.nodes[k], op.nodes[k - 1]);
    for (Eigen::Index k = 0; k < op.nodes.size(); ++k) EXPECT_DOUBLE_EQ(op.kernel_values[k], evaluate_mu(op.nodes[k], 0.7));
}

TEST(BuildQuadrature, RejectsTruncatingCutoff) {
    const FracParams p{0.5, 1.0, 1.0};
    const double need = recommended_xi_max(p, 128);
    EXPECT_NO_THROW(build_quadrature(p, 128, need));
    EXPECT_NO_THROW(build_quadrature(p, 128, 2.0 * need));
    EXPECT_THROW(build_quadrature(p, 128, 0.5 * need), DomainError);
    EXPECT_THROW(build_quadrature(p, 1), DomainError);
    EXPECT_THROW(build_quadrature({1.5, 1.0, 1.0}, 16), DomainError);
    EXPECT_THROW(build_quadrature({0.5, 0.0, 1.0}, 16), DomainError);
}

TEST(BuildQuadrature, TailBoundsRespectBudget) {
    for (double a : {0.3, 0.5, 0.7})
        for (double eta : {0.1, 1.0, 10.0}) {
            const FracParams p{a, eta, 1.0};
            const double xmax = recommended_xi_max(p, 128);
            const double tail = upper_tail_bound(a, xmax);
            EXPECT_LE(tail, 1.000001e-3 * closed_form_moment(a, eta, kMomentLambdaMax));
            const double xmin = lower_cutoff(p, 128);
            EXPECT_LE(std::pow(xmin, 2.0 * a) / (a * eta), 1.000001e-3 * closed_form_moment(a, eta, 0.0));
        }
}

TEST(StepModes, ZeroIsFixedPoint) {
    auto op = step_modes(build_quadrature({0.5, 1.0, 1.0}, 32), 0.0, 0.37);
    EXPECT_TRUE((op.modal_state == 0.0).all());
}

TEST(StepModes, ConstantInputReachesSteadyState) {
    auto op = build_quadrature({0.4, 1.0, 1.0}, 32);
    for (int i = 0; i < 200; ++i) op.advance(2.5, 1.0);
    const Eigen::ArrayXd steady = op.kernel_values * 2.5 / op.rates();
    for (Eigen::Index k = 0; k < steady.size(); ++k) EXPECT_NEAR(op.modal_state[k], steady[k], 1e-12 * steady[k]);
}

TEST(StepModes, OneStepEqualsTwoHalfSteps) {
    auto one = build_quadrature({0.6, 0.5, 1.0}, 48);
    one.modal_state = Eigen::ArrayXd::LinSpaced(48, -1.0, 2.0);
    auto two = one;
    one.advance(0.8, 0.01);
    two.advance(0.8, 0.005);
    two.advance(0.8, 0.005);
    for (Eigen::Index k = 0; k < 48; ++k)
        EXPECT_NEAR(one.modal_state[k], two.modal_state[k], 1e-14 * (1.0 + std::abs(one.modal_state[k])));
}

TEST(StepModes, PassiveWithoutInput) {
    auto op = build_quadrature({0.5, 1.0, 1.0}, 64);
    op.modal_state = Eigen::ArrayXd::Ones(64);
    double prev = (op.weights * op.modal_state.square()).sum();
    for (double dt : {1e-4, 1e-2, 1.0, 1e3}) {
        op.advance(0.0, dt);
        const double now = (op.weights * op.modal_state.square()).sum();
        EXPECT_LE(now, prev);
        EXPECT_TRUE(op.modal_state.allFinite());
        prev = now;
    }
    EXPECT_THROW(op.advance(1.0, 0.0), DomainError);
}

TEST(ReadOutput, ZeroState) { EXPECT_EQ(read_output(build_quadrature({0.5, 1.0, 1.0}, 16)), 0.0); }

TEST(ReadOutput, SingleUnitMode) {
    DiffusiveOperator op;
    op.params = {0.5, 1.0, 1.0};
    op.nodes = Eigen::ArrayXd::Constant(1, 1.0);
    op.weights = Eigen::ArrayXd::Constant(1, 1.0);
    op.kernel_values = Eigen::ArrayXd::Constant(1, 1.0);
    op.modal_state = Eigen::ArrayXd::Constant(1, 1.0);
    EXPECT_NEAR(read_output(op), 1.0 / pi, 1e-16);
}

TEST(ReferenceCaputo, ConstantGivesZero) {
    const std::vector<double> f(100, 3.0);
    for (double v : reference_caputo(f, 0.01, 0.4, 1.0)) EXPECT_EQ(v, 0.0);
}

TEST(ReferenceCaputo, RampWithoutWeight) {
    const std::size_t n = 64;
    std::vector<double> f(n + 1);
    for (std::size_t i = 0; i <= n; ++i) f[i] = static_cast<double>(i) / n;
    EXPECT_NEAR(reference_caputo(f, 1.0 / n, 0.5, 0.0).back(), 2.0 / std::sqrt(pi), 1e-13);
}

TEST(ReferenceCaputo, RampWithUnitWeightIsErfOne) {
    const std::size_t n = 64;
    std::vector<double> f(n + 1);
    for (std::size_t i = 0; i <= n; ++i) f[i] = static_cast<double>(i) / n;
    EXPECT_NEAR(reference_caputo(f, 1.0 / n, 0.5, 1.0).back(), 0.84270079294971487, 1e-12);
}

TEST(ReferenceCaputo, SineAgainstQuadratureOracle) {
    // (1/Gamma(0.7)) int_0^5 exp(-0.5 s) s^{-0.3} cos(5 - s) ds, evaluated to 20 digits offline
    const std::size_t n = 2048;
    const double dt = 5.0 / n;
    std::vector<double> f(n + 1);
    for (std::size_t i = 0; i <= n; ++i) f[i] = std::sin(static_cast<double>(i) * dt);
    EXPECT_NEAR(reference_caputo(f, dt, 0.3, 0.5).back(), -0.44952063825232433, 1e-5);
}

TEST(ReferenceCaputo, RejectsShortSeries) {
    const std::vector<double> f{0.0, 1.0};
    EXPECT_THROW(reference_caputo(f, 0.1, 0.5, 1.0), DomainError);
}

TEST(RealizeDerivative, RampMatchesErfOne) {
    const std::size_t n = 2048;
    const auto out = realize_derivative(build_quadrature({0.5, 1.0, 1.0}, 128), [](double) { return 1.0; },
                                        1.0 / n, n);
    EXPECT_NEAR(out.back(), 0.84270079294971487, 0.01 * 0.8427);
}

TEST(RealizeDerivative, VanishingWeightGivesTwoOverRootPi) {
    const std::size_t n = 2048;
    const auto out = realize_derivative(build_quadrature({0.5, 1e-8, 1.0}, 128), [](double) { return 1.0; },
                                        1.0 / n, n);
    const double exact = 2.0 / std::sqrt(pi);
    EXPECT_LE(std::abs(out.back() - exact) / exact, 0.01);
}

TEST(ValidateKernel, SuitePassesOnSupportedGrid) {
    for (double a : {0.3, 0.5, 0.7})
        for (double eta : {0.5, 1.0}) {
            const auto v = validate_kernel({a, eta, 1.0});
            EXPECT_TRUE(v.passed()) << "a " << a << " eta " << eta;
            ASSERT_EQ(v.caputo.size(), 2u);
            for (const auto& c : v.caputo) EXPECT_LE(c.rel_l2, 0.02) << c.signal;
        }
}

TEST(FracParams, Violations) {
    EXPECT_TRUE(FracParams{}.violations().empty());
    EXPECT_EQ(FracParams({0.0, 1.0, 1.0}).violations("damper1.").front(), "damper1.a must satisfy 0 < a < 1");
    EXPECT_EQ(FracParams({0.5, 0.0, 1.0}).violations().size(), 1u);
    EXPECT_EQ(FracParams({0.5, 1.0, -1.0}).violations().size(), 1u);
    EXPECT_TRUE(FracParams({0.5, 1.0, 0.0}).violations().empty());
}
