"""Shared fixtures: the committed FRSB operating point and its artifacts.

tests/data/gamma_star.json holds the minimizer the package's own optimizer
produced at the operating point (see tests/data/README.md for the exact
invocation); session-scoped fixtures solve the PDE and simulate diffusion
paths once for all consumers.
"""

import json
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


def load_operating_point():
    payload = json.loads((DATA / "gamma_star.json").read_text())
    from percamp.fop import Fop

    return Fop.from_json_dict(payload["gamma"]), payload["alpha"], payload["kappa"]


@pytest.fixture(scope="session")
def operating_point():
    return load_operating_point()


@pytest.fixture(scope="session")
def star_solution(operating_point):
    from percamp.pde import grid_for, solve

    gamma, alpha, kappa = operating_point
    spec = grid_for(gamma, kappa, nx=1025, dt_max=2e-3)
    return solve(gamma, kappa, spec)


@pytest.fixture(scope="session")
def star_paths(operating_point, star_solution):
    from percamp.state_evolution import simulate_sde

    gamma, alpha, kappa = operating_point
    return simulate_sde(gamma, star_solution, n_paths=100_000, dt=1e-3,
                        seed=11, store_n=41)
