"""Diffusion simulation, schedule constants, and the optimality identities."""

import math

import numpy as np
import pytest

from percamp.fop import lambda_of, q_bar, q_under, step_fop
from percamp.gaussian import _default_rule, gardner_rs, mills
from percamp.pde import grid_for, solve
from percamp.state_evolution import (
    build_schedule,
    conditional_mean_margin,
    discrete_continuum_gap,
    fixed_point_check,
    mc_mean_sigma,
    psi_map,
    simulate_sde,
    stationarity_residuals,
)

KAPPA = -0.5


@pytest.fixture(scope="module")
def rs_point():
    """Replica-symmetric optimum at a strictly stable point."""
    alpha = 1.5
    value, q = gardner_rs(alpha, KAPPA)
    g = step_fop(q)
    sol = solve(g, KAPPA, grid_for(g, KAPPA, nx=513, dt_max=2e-3))
    return g, sol, alpha, q


class TestSimulate:
    def test_brownian_start_and_variance(self, rs_point):
        g, sol, alpha, q = rs_point
        paths = simulate_sde(g, sol, n_paths=40_000, dt=1e-3, seed=3,
                             retain_increments=True)
        qu = q_under(g)
        assert paths.times[0] == 0.0 and paths.times[1] == pytest.approx(qu)
        # X at q_under equals the accumulated Brownian increment exactly
        assert np.array_equal(paths.x[:, 1], paths.b[:, 0])
        m, s = mc_mean_sigma(paths.x[:, 1] ** 2, paths.antithetic)
        assert abs(m - qu) <= 3 * s + 1e-12

    def test_increment_moments_and_independence(self, operating_point, star_solution):
        g, alpha, kappa = operating_point
        qu, qb = q_under(g), q_bar(g)
        ts = np.linspace(qu, qb, 9)
        paths = simulate_sde(g, star_solution, n_paths=30_000, dt=1e-3, seed=5,
                             store_times=ts, retain_increments=True)
        dt = ts[1] - ts[0]
        for j in range(1, paths.b.shape[1]):
            v = float(np.var(paths.b[:, j]))
            assert v == pytest.approx(dt, rel=0.05)
        # lag-1 correlation of per-path increments vanishes
        c = np.mean(paths.b[:, 1] * paths.b[:, 2]) / dt
        assert abs(c) < 0.05

    def test_determinism(self, rs_point):
        g, sol, alpha, q = rs_point
        a = simulate_sde(g, sol, n_paths=2_000, dt=2e-3, seed=9)
        b = simulate_sde(g, sol, n_paths=2_000, dt=2e-3, seed=9)
        assert np.array_equal(a.x, b.x)

    def test_martingale_property(self, operating_point, star_solution, star_paths):
        g, alpha, kappa = operating_point
        vals = []
        for j, t in enumerate(star_paths.times[1:], start=1):
            m, s = mc_mean_sigma(star_solution.eval(1, float(t), star_paths.x[:, j]),
                                 star_paths.antithetic)
            vals.append((m, s))
        base, s0 = vals[0]
        for m, s in vals[1:]:
            assert abs(m - base) <= 3.0 * math.hypot(s, s0) + 2e-3

    def test_quadratic_modulus(self, operating_point, star_solution):
        # E[(X_t - X_s)^2] <= C |t-s| with the fitted C stable in dt
        g, alpha, kappa = operating_point
        qu, qb = q_under(g), q_bar(g)
        cs = []
        for dt in (2e-3, 1e-3):
            p = simulate_sde(g, star_solution, n_paths=20_000, dt=dt, seed=7, store_n=9)
            gaps = [float(np.mean((p.x[:, j + 1] - p.x[:, j]) ** 2))
                    / (p.times[j + 1] - p.times[j]) for j in range(1, len(p.times) - 1)]
            cs.append(max(gaps))
        assert cs[0] < 4.0 and cs[1] < 4.0
        assert abs(cs[0] - cs[1]) < 0.5


class TestPsiAndFixedPoint:
    def test_fixed_point_at_rs_optimum(self, rs_point):
        g, sol, alpha, q = rs_point
        assert abs(fixed_point_check(g, sol, alpha)) < 1e-6

    def test_perturbed_step_increases_residual(self, rs_point):
        g, sol, alpha, q = rs_point
        g2 = step_fop(q + 0.05)
        sol2 = solve(g2, KAPPA, grid_for(g2, KAPPA, nx=513, dt_max=2e-3))
        assert abs(fixed_point_check(g2, sol2, alpha)) > 10 * abs(
            fixed_point_check(g, sol, alpha))

    def test_partition_refinement_invariance(self, rs_point):
        from percamp.fop import Fop

        g, sol, alpha, q = rs_point
        refined = Fop((q, 0.6 * q + 0.4, 1.0), (0.0, 1.0, 1.0))  # same function
        sol2 = solve(refined, KAPPA, grid_for(refined, KAPPA, nx=513, dt_max=2e-3))
        assert fixed_point_check(refined, sol2, alpha) == pytest.approx(
            fixed_point_check(g, sol, alpha), abs=1e-4)

    def test_psi_monotone_convex_and_above_diagonal(self, rs_point):
        g, sol, alpha, q = rs_point
        qu = q_under(g)
        ts = np.linspace(0.0, qu, 50)
        vals = np.array([psi_map(float(t), g, sol, alpha) for t in ts])
        d1 = np.diff(vals)
        assert np.all(d1 > 0)           # strictly increasing
        assert np.all(np.diff(d1) > -1e-9)  # convex
        assert np.all(vals[:-1] > ts[:-1])  # psi(t) > t below the fixed point
        assert vals[-1] == pytest.approx(qu, abs=1e-6)

    def test_psi_zero_factorizes(self, rs_point):
        # psi(0) = alpha (E f)^2: conditional independence given Z at t=0,
        # oracle = plain 2-sample Monte Carlo of the defining expectation
        g, sol, alpha, q = rs_point
        qu = q_under(g)
        lam = lambda_of(g, qu)
        rng = np.random.default_rng(123)
        n = 2_000_000
        z1 = rng.standard_normal(n)
        z2 = rng.standard_normal(n)
        f1 = lam * sol.eval(1, qu, math.sqrt(qu) * z1)
        f2 = lam * sol.eval(1, qu, math.sqrt(qu) * z2)
        prod = f1 * f2
        mc = alpha * float(np.mean(prod))
        sig = alpha * float(np.std(prod) / math.sqrt(n))
        assert psi_map(0.0, g, sol, alpha) == pytest.approx(mc, abs=3 * sig)


class TestConditionalMeanMargin:
    def test_at_kappa(self):
        for q in (0.7, 0.9, 0.99):
            out = conditional_mean_margin(KAPPA, q, KAPPA)
            assert out == pytest.approx(KAPPA + math.sqrt(1 - q) * mills(0.0), rel=1e-12)
            assert out > KAPPA

    def test_far_above_kappa(self):
        assert conditional_mean_margin(KAPPA, 0.8, 30.0) == pytest.approx(30.0, abs=1e-12)

    def test_dominates_kappa_and_x(self):
        rng = np.random.default_rng(7)
        q = rng.uniform(0.5, 0.999, 10_000)
        x = rng.uniform(-8.0, 8.0, 10_000)
        for qi, xi in zip(q, x):
            assert conditional_mean_margin(KAPPA, float(qi), float(xi)) >= max(KAPPA, xi) - 1e-10

    def test_q_one_rejected(self):
        with pytest.raises(ValueError):
            conditional_mean_margin(KAPPA, 1.0, 0.0)


class TestScheduleAndResiduals:
    def test_schedule_invariants(self, operating_point, star_solution):
        g, alpha, kappa = operating_point
        sched = build_schedule(g, star_solution, alpha, ell_under=12,
                               n_paths=20_000, dt=2e-3, seed=5)
        assert sched.a_seq[0] == 0.0
        assert np.all(np.diff(sched.a_seq) > 0)
        assert sched.a_seq[-1] < sched.q_under
        assert sched.delta > 0 and sched.eps0 > 0
        assert sched.eps0**2 <= sched.delta / sched.q_under + 1e-12
        assert np.all(np.abs(alpha * sched.normalizers - 1.0) < 0.2)

    def test_delta_shrinks_with_ell(self, operating_point, star_solution):
        g, alpha, kappa = operating_point
        prev = None
        for ell in (5, 10, 20, 40):
            s = build_schedule(g, star_solution, alpha, ell_under=ell,
                               n_paths=4_000, dt=4e-3, seed=5)
            if prev is not None:
                assert s.delta < prev
            prev = s.delta

    def test_rs_point_residual_curve_empty(self, rs_point):
        g, sol, alpha, q = rs_point
        paths = simulate_sde(g, sol, n_paths=4_000, dt=2e-3, seed=1)
        rr = stationarity_residuals(g, sol, alpha, paths)
        assert len(rr.t) == 0
        assert abs(rr.q0_residual) < 1e-6

    def test_residuals_small_at_star(self, operating_point, star_solution, star_paths):
        g, alpha, kappa = operating_point
        rr = stationarity_residuals(g, star_solution, alpha, star_paths)
        r1, r2 = rr.max_abs()
        assert abs(rr.q0_residual) < 1e-3
        assert r1 <= 0.02 and r2 <= 0.02

    def test_residuals_grow_under_perturbation(self, operating_point, star_solution):
        from percamp.fop import Fop

        g, alpha, kappa = operating_point
        base = None
        for bump in (0.0, 0.04, 0.08):
            levels = list(g.levels)
            mid = len(levels) // 2
            levels[mid] = min(levels[mid] + bump, levels[mid + 1])
            g2 = Fop(g.breakpoints, tuple(levels))
            sol2 = solve(g2, kappa, grid_for(g2, kappa, nx=513, dt_max=2.5e-3))
            paths2 = simulate_sde(g2, sol2, n_paths=10_000, dt=2e-3, seed=13, store_n=17)
            rr = stationarity_residuals(g2, sol2, alpha, paths2)
            score = max(rr.max_abs())
            if base is not None:
                assert score > base
            base = score

    def test_submartingale_margin(self, operating_point, star_solution, star_paths):
        # kappa_t = kappa - (int_t^qbar gamma) dPhi(t, X_t) has nondecreasing mean
        g, alpha, kappa = operating_point
        qb = q_bar(g)
        means = []
        for j, t in enumerate(star_paths.times[1:], start=1):
            w = lambda_of(g, float(t)) - (1.0 - qb)
            vals = kappa - w * star_solution.eval(1, float(t), star_paths.x[:, j])
            m, s = mc_mean_sigma(vals, star_paths.antithetic)
            means.append((m, s))
        for (m0, s0), (m1, s1) in zip(means, means[1:]):
            assert m1 >= m0 - 3.0 * math.hypot(s0, s1) - 2e-3

    def test_discrete_continuum_gap_order_delta(self, operating_point, star_solution):
        g, alpha, kappa = operating_point
        ratios = []
        for ell in (8, 16):
            sched = build_schedule(g, star_solution, alpha, ell_under=ell,
                                   n_paths=20_000, dt=2e-3, seed=21)
            paths = simulate_sde(g, star_solution, n_paths=20_000, dt=1e-3, seed=21,
                                 store_times=sched.q_levels,
                                 t_end=float(sched.q_levels[-1]),
                                 with_m=True, retain_increments=True)
            gx, gm = discrete_continuum_gap(g, star_solution, alpha, sched, paths)
            ratios.append((gx / sched.delta, gm / sched.delta))
        # the fitted constant stays bounded as delta shrinks
        for i in (0, 1):
            assert ratios[1][i] < 4.0 * ratios[0][i] + 0.5
