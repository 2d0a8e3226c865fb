from __future__ import annotations

import numpy as np
import pytest

from lqstackelberg.model import TimeGrid, builtin_example, validate_spec
from lqstackelberg.riccati import solve_game
from lqstackelberg.synthesis import synthesize


def solved(name: str, steps: int = 256, **params):
    spec = validate_spec(builtin_example(name, **params))
    fs, ls = solve_game(spec, TimeGrid(steps, spec.horizon))
    return spec, fs, ls, synthesize(spec, fs, ls)


@pytest.fixture(scope="session")
def paper():
    return solved("paper_example")


@pytest.fixture(scope="session")
def classic():
    return solved("single_regime_classic")


@pytest.fixture(scope="session")
def pension():
    return solved("pension_reduced")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
