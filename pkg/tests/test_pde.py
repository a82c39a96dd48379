"""Cole-Hopf PDE solver: terminal data, closed tail forms, replica-symmetric
cross-validation, rigorous bounds, interpolation consistency, and the
continuity of the solution in the order parameter."""

import math

import numpy as np
import pytest

from percamp.fop import Fop, l1_distance, lambda_of, step_fop
from percamp.gaussian import _default_rule, log_gauss_tail, mills, mills_deriv
from percamp.pde import (
    PdeBoundError,
    PdeGridSpec,
    eval_closed_tail,
    grid_for,
    residual_grid,
    solve,
    terminal_condition,
)

KAPPA = -0.5
LOG_TAIL_1 = -1.841021645009263505770783  # mpmath, 60 digits

STAIR = Fop((0.25, 0.32, 0.39, 0.46, 0.53, 0.6, 1.0),
            (0.0, 0.15, 0.3, 0.5, 0.7, 0.85, 1.0))


@pytest.fixture(scope="module")
def stair_sol():
    spec = grid_for(STAIR, KAPPA, nx=513, dt_max=2e-3)
    return solve(STAIR, KAPPA, spec)


@pytest.fixture(scope="module")
def step_sol():
    g = step_fop(0.4)
    spec = grid_for(g, KAPPA, nx=513, dt_max=2e-3)
    return solve(g, KAPPA, spec)


class TestTerminalCondition:
    def test_at_kappa(self):
        assert terminal_condition(KAPPA, 0.5, KAPPA) == pytest.approx(math.log(0.5), abs=1e-15)

    def test_far_right_is_certain(self):
        v = terminal_condition(KAPPA, 0.5, KAPPA + 40.0)
        assert -1e-300 < v <= 0.0

    def test_one_sigma_point(self):
        qb = 0.64
        x = KAPPA - math.sqrt(1.0 - qb)
        assert terminal_condition(KAPPA, qb, x) == pytest.approx(LOG_TAIL_1, rel=1e-13)

    def test_qbar_one_rejected(self):
        with pytest.raises(ValueError):
            terminal_condition(KAPPA, 1.0, 0.0)


class TestClosedTail:
    def test_gradient_at_kappa(self):
        for t in (0.5, 0.9):
            expect = mills(0.0) / math.sqrt(1.0 - t)
            assert eval_closed_tail(KAPPA, t, KAPPA, 1) == pytest.approx(expect, rel=1e-14)

    def test_gradient_lower_bound(self):
        t = 0.7
        x = np.linspace(KAPPA - 8.0, KAPPA - 0.01, 200)
        d1 = eval_closed_tail(KAPPA, t, x, 1)
        assert np.all(d1 >= (KAPPA - x) / (1.0 - t) - 1e-12)

    def test_second_derivative_range(self):
        t = 0.7
        x = np.linspace(KAPPA - 10.0, KAPPA + 10.0, 400)
        d2 = eval_closed_tail(KAPPA, t, x, 2)
        assert np.all(d2 <= 1e-12)
        assert np.all(d2 >= -1.0 / (1.0 - t) - 1e-12)

    def test_t_one_rejected(self):
        with pytest.raises(ValueError):
            eval_closed_tail(KAPPA, 1.0, 0.0, 0)

    def test_consistency_with_mills_chain(self):
        t, x = 0.8, -1.3
        u = (KAPPA - x) / math.sqrt(1.0 - t)
        assert eval_closed_tail(KAPPA, t, x, 0) == pytest.approx(log_gauss_tail(u))
        assert eval_closed_tail(KAPPA, t, x, 2) == pytest.approx(-mills_deriv(u, 1) / (1 - t))


class TestGridSpec:
    def test_breakpoints_present(self):
        spec = grid_for(STAIR, KAPPA, nx=64, dt_max=5e-3)
        t = np.asarray(spec.t_nodes)
        for b in STAIR.breakpoints[:-1]:
            assert np.any(t == b)
        assert t[-1] == 0.6
        assert np.max(np.diff(t)) <= 5e-3 + 1e-12

    def test_truncation_validated(self):
        spec = PdeGridSpec(KAPPA - 1.0, KAPPA + 30.0, 64,
                           grid_for(STAIR, KAPPA, nx=64, dt_max=5e-3).t_nodes)
        with pytest.raises(ValueError):
            spec.validate_for(STAIR, KAPPA)

    def test_missing_breakpoint_rejected(self):
        good = grid_for(STAIR, KAPPA, nx=64, dt_max=5e-3)
        nodes = tuple(t for t in good.t_nodes if t != 0.32)
        with pytest.raises(ValueError):
            PdeGridSpec(good.x_min, good.x_max, 64, nodes).validate_for(STAIR, KAPPA)


class TestRsCrossValidation:
    @pytest.mark.parametrize("q", [0.15, 0.45, 0.75])
    def test_phi00_matches_quadrature(self, q):
        g = step_fop(q)
        sol = solve(g, KAPPA, grid_for(g, KAPPA, nx=513, dt_max=2e-3))
        rule = _default_rule()
        oracle = float(np.dot(
            log_gauss_tail((KAPPA - math.sqrt(q) * rule.nodes) / math.sqrt(1 - q)),
            rule.weights))
        assert sol.eval(0, 0.0, 0.0) == pytest.approx(oracle, abs=1e-6)


class TestSolutionProperties:
    def test_terminal_row_is_boundary_data(self, stair_sol):
        x = stair_sol.grid.x
        expect = terminal_condition(KAPPA, 0.6, x)
        assert np.max(np.abs(stair_sol.phi[-1] - expect)) < 1e-12

    def test_gradient_positive_everywhere(self, stair_sol):
        assert np.all(stair_sol.dphi >= 0.0)

    def test_bounds_hold(self, stair_sol, step_sol):
        stair_sol.check_bounds(tol=1e-6)
        step_sol.check_bounds(tol=1e-6)

    def test_bound_error_carries_worst_point(self, stair_sol):
        import copy

        bad = copy.copy(stair_sol)
        bad.phi = stair_sol.phi.copy()
        bad.phi[3, 7] = 0.5
        with pytest.raises(PdeBoundError) as err:
            bad.check_bounds(tol=1e-6)
        assert err.value.value == pytest.approx(0.5)
        assert err.value.t == pytest.approx(stair_sol.grid.t_nodes[3])
        assert err.value.x == pytest.approx(stair_sol.grid.x[7])

    def test_pde_residual(self, stair_sol, step_sol):
        assert residual_grid(stair_sol) <= 1e-4
        assert residual_grid(step_sol) <= 1e-4


class TestEval:
    def test_median_at_qbar(self, stair_sol):
        # cubic interpolation of the terminal row between grid nodes
        assert stair_sol.eval(0, 0.6, KAPPA) == pytest.approx(math.log(0.5), abs=1e-7)

    def test_reproduces_grid_nodes_exactly(self, stair_sol):
        j, k = 17, 101
        t = stair_sol.grid.t_nodes[j]
        x = float(stair_sol.grid.x[k])
        assert stair_sol.eval(0, t, x) == stair_sol.phi[j, k]
        assert stair_sol.eval(2, t, x) == stair_sol.d2phi[j, k]

    def test_gradient_matches_finite_difference(self, stair_sol):
        h = 1e-4
        for (t, x) in [(0.1, 0.3), (0.3, -1.2), (0.55, 1.0)]:
            fd = (stair_sol.eval(0, t, x + h) - stair_sol.eval(0, t, x - h)) / (2 * h)
            assert stair_sol.eval(1, t, x) == pytest.approx(fd, abs=1e-5)

    def test_beyond_qbar_rejected(self, stair_sol):
        with pytest.raises(ValueError):
            stair_sol.eval(0, 0.7, 0.0)

    def test_asymptotic_continuation_consistent(self, stair_sol):
        # continuation beyond the grid should join the interior smoothly:
        # compare against a wider-grid solve at points outside the narrow grid
        wide = solve(STAIR, KAPPA, grid_for(STAIR, KAPPA, nx=1025, dt_max=2e-3,
                                            x_min=KAPPA - 18.0, x_max=KAPPA + 24.0))
        for x in (KAPPA - 13.5, KAPPA + 19.0):
            a = stair_sol.eval(1, 0.3, x)
            b = wide.eval(1, 0.3, x)
            assert a == pytest.approx(b, rel=2e-3, abs=1e-8)


class TestContinuityInGamma:
    def test_refinement_controls_error(self):
        # two staircase approximants of the same continuous profile
        def staircase(n):
            qs = np.linspace(0.25, 0.6, n + 1)
            target = lambda t: (t - 0.25) / 0.35
            levels = [0.0] + [target(0.5 * (a + b)) for a, b in zip(qs, qs[1:])][:-1] + [1.0]
            return Fop(tuple(qs[1:]) + (1.0,), tuple(levels))

        g_coarse, g_fine = staircase(3), staircase(6)
        d = l1_distance(g_coarse, g_fine)
        spec = grid_for(g_coarse, KAPPA, nx=513, dt_max=2e-3)
        s1 = solve(g_coarse, KAPPA, spec)
        s2 = solve(g_fine, KAPPA, grid_for(g_fine, KAPPA, nx=513, dt_max=2e-3))
        xs = np.linspace(KAPPA - 3.0, KAPPA + 3.0, 41)
        sup = max(
            float(np.max(np.abs(s1.eval(0, t, xs) - s2.eval(0, t, xs))))
            for t in np.linspace(0.0, 0.6, 13)
        )
        c_fit = sup / d
        # halve the distance again: the fitted constant should be stable
        g_finer = staircase(12)
        d2 = l1_distance(g_fine, g_finer)
        s3 = solve(g_finer, KAPPA, grid_for(g_finer, KAPPA, nx=513, dt_max=2e-3))
        sup2 = max(
            float(np.max(np.abs(s2.eval(0, t, xs) - s3.eval(0, t, xs))))
            for t in np.linspace(0.0, 0.6, 13)
        )
        c_fit2 = sup2 / d2
        assert sup2 < sup
        assert c_fit2 < 4.0 * c_fit + 1e-9
