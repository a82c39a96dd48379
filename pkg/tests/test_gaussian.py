"""Gaussian special functions against high-precision and quadrature oracles.

Frozen constants were produced with mpmath at 60 significant digits:
tail probabilities via erfc(x/sqrt(2))/2, the inverse Mills ratio as
phi(x)/tail(x), and its derivatives by high-order numerical differentiation
of that expression.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from percamp.gaussian import (
    QuadratureRule,
    gardner_rs,
    gauss_hermite,
    log_gauss_tail,
    mills,
    mills_deriv,
    rs_capacity,
    rs_objective,
)

# mpmath, 60 digits
LOG_TAIL_10 = -53.23128515051247057834703
LOG_TAIL_1 = -1.841021645009263505770783
MILLS_5 = 5.186503967125842115616509
MILLS_D2_AT_2 = 0.05935586129156581283358226
ALPHA_RS_M1 = 13.27319983702451196183805
# dense 1e-4 grid + adaptive quadrature + golden section (see module docstring)
GARDNER_1_M05_VALUE = -0.38947725051568597136
GARDNER_1_M05_Q = 0.2595239694355665


class TestQuadrature:
    def test_normalized_and_symmetric(self):
        rule = gauss_hermite(120)
        assert abs(rule.weights.sum() - 1.0) <= 1e-12
        assert np.max(np.abs(rule.nodes + rule.nodes[::-1])) <= 1e-12

    def test_moments(self):
        rule = gauss_hermite(120)
        assert abs(rule.expect(lambda z: z)) < 1e-13
        assert abs(rule.expect(lambda z: z**2) - 1.0) < 1e-12
        assert abs(rule.expect(lambda z: z**4) - 3.0) < 1e-11

    def test_invalid_rule_rejected(self):
        with pytest.raises(ValueError):
            QuadratureRule(nodes=np.array([0.0, 1.0]), weights=np.array([0.5, 0.5]))


class TestLogGaussTail:
    def test_median(self):
        assert log_gauss_tail(0.0) == pytest.approx(math.log(0.5), abs=1e-15)

    def test_deep_left_tail_is_certainty(self):
        # tail probability -> 1, so the log is within 1e-300 of 0 in value space
        assert math.exp(log_gauss_tail(-38.0)) == pytest.approx(1.0, abs=1e-300)

    def test_high_precision_point(self):
        assert log_gauss_tail(10.0) == pytest.approx(LOG_TAIL_10, rel=1e-14)

    def test_value_relative_error_against_oracle(self):
        # relative error of the value (not the log) <= 1e-12 on |x| <= 40:
        # |delta log| = |delta value| / value
        for x in np.linspace(-40, 40, 401):
            lt = log_gauss_tail(float(x))
            hi = math.log(0.5 * math.erfc(x / math.sqrt(2))) if x < 30 else None
            if hi is not None and np.isfinite(hi):
                assert abs(lt - hi) <= 1e-12 + 1e-13 * abs(hi)

    def test_complement_identity(self):
        x = np.linspace(-40.0, 40.0, 801)
        total = np.exp(log_gauss_tail(x)) + np.exp(log_gauss_tail(-x))
        assert np.max(np.abs(total - 1.0)) <= 1e-12

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            log_gauss_tail(float("nan"))


class TestMills:
    def test_at_zero(self):
        assert mills(0.0) == pytest.approx(math.sqrt(2.0 / math.pi), rel=1e-15)

    def test_high_precision_point(self):
        assert mills(5.0) == pytest.approx(MILLS_5, rel=1e-14)

    def test_lower_bound_and_product_bound(self):
        # A(x) >= x, x A(x) <= 1 + x^2 on a dense grid
        x = np.linspace(-40.0, 40.0, 10_001)
        a = mills(x)
        assert np.all(a >= x - 1e-12)
        assert np.all(x * a <= 1.0 + x * x + 1e-12)

    def test_monotone_nondecreasing(self):
        x = np.linspace(-40.0, 40.0, 10_001)
        a = mills(x)
        assert np.all(np.diff(a) >= -1e-12)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            mills(float("nan"))


class TestMillsDeriv:
    def test_first_derivative_at_zero(self):
        assert mills_deriv(0.0, 1) == pytest.approx(2.0 / math.pi, rel=1e-13)

    def test_first_derivative_in_unit_interval(self):
        x = np.linspace(-40.0, 40.0, 10_001)
        d = mills_deriv(x, 1)
        assert np.all(d >= -1e-12)
        assert np.all(d <= 1.0 + 1e-12)

    def test_against_finite_difference(self):
        h = 1e-5
        for x in np.linspace(-10.0, 10.0, 81):
            fd = (mills(x + h) - mills(x - h)) / (2.0 * h)
            assert mills_deriv(float(x), 1) == pytest.approx(fd, abs=1e-7)

    def test_second_derivative_high_precision(self):
        assert mills_deriv(2.0, 2) == pytest.approx(MILLS_D2_AT_2, rel=1e-12)

    def test_second_derivative_finite_difference(self):
        h = 1e-5
        fd = (mills_deriv(2.0 + h, 1) - mills_deriv(2.0 - h, 1)) / (2.0 * h)
        assert mills_deriv(2.0, 2) == pytest.approx(fd, abs=1e-8)

    def test_bad_order_rejected(self):
        for k in (0, 4, -1):
            with pytest.raises(ValueError):
                mills_deriv(1.0, k)


class TestRsCapacity:
    def test_kappa_zero(self):
        assert rs_capacity(0.0) == pytest.approx(2.0, abs=1e-12)

    def test_high_precision_point(self):
        assert rs_capacity(-1.0) == pytest.approx(ALPHA_RS_M1, rel=1e-12)

    def test_against_quadrature(self):
        phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        for kappa in (-2.0, -1.0, 0.0, 1.0):
            val, _ = quad(lambda z: (kappa - z) ** 2 * phi(z), -40.0, kappa,
                          epsabs=1e-13, epsrel=1e-13)
            assert rs_capacity(kappa) == pytest.approx(1.0 / val, rel=1e-9)

    @given(st.floats(-3.0, 3.0), st.floats(1e-3, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_strictly_decreasing(self, kappa, gap):
        assert rs_capacity(kappa) > rs_capacity(kappa + gap)


class TestGardnerRs:
    def test_small_alpha_limit(self):
        value, q = gardner_rs(1e-9, 0.0)
        assert abs(value) < 1e-8
        assert q < 1e-3

    def test_above_capacity_flag(self):
        value, q = gardner_rs(2.5, 0.0)  # alpha_RS(0) = 2
        assert value == -math.inf
        assert math.isnan(q)

    def test_oracle_point(self):
        value, q = gardner_rs(1.0, -0.5)
        assert value == pytest.approx(GARDNER_1_M05_VALUE, abs=1e-8)
        assert q == pytest.approx(GARDNER_1_M05_Q, abs=1e-6)

    def test_minimizer_is_stationary(self):
        value, q = gardner_rs(1.0, -0.5)
        h = 1e-4
        assert rs_objective(q + h, 1.0, -0.5) >= value - 1e-12
        assert rs_objective(q - h, 1.0, -0.5) >= value - 1e-12
