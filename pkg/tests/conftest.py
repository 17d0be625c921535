"""Shared fixtures: small scene templates and solvers reused across modules."""

import numpy as np
import pytest

from rislab.scene import default_template
from rislab.simulate import EnclosureSolver


@pytest.fixture(scope="session")
def small_tpl():
    """Default geometry on a short 8-point grid: fast but fully featured."""
    return default_template(n_points=8)


@pytest.fixture(scope="session")
def small_solver(small_tpl):
    return EnclosureSolver(small_tpl, workers=2)


@pytest.fixture(scope="session")
def full_tpl():
    """The exact template scene-init writes (64-point grid)."""
    return default_template()


def random_positions(rng, n, lo=0.0, hi=10.0, min_sep=0.05):
    """n points with pairwise separation >= min_sep (rejection sampling)."""
    pts = []
    while len(pts) < n:
        cand = rng.uniform(lo, hi, size=2)
        if all(np.hypot(*(cand - p)) >= min_sep for p in pts):
            pts.append(cand)
    return np.array(pts)
