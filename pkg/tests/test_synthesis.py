from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqstackelberg.riccati import derived_on_grid
from lqstackelberg.synthesis import (
    corrupt_leader_weight,
    follower_condition_residual,
    game_value_leader,
    gains_from_derived,
    initial_phi,
    leader_condition_residual,
    leader_gains,
    leader_value,
    reconstruct_adjoint,
    write_gains_csv,
)
from tests.conftest import solved

# Leader values 1/2 <P2t^(11)(0, i0) x0, x0> at N_t = 256.
FROZEN_VALUES = {
    "paper": 0.03527127029839867,
    "classic": 0.24636248769121485,
    "pension": 0.104894114183136,
}


@pytest.mark.parametrize("name", sorted(FROZEN_VALUES))
def test_frozen_leader_values(name, request):
    spec, _, ls, _ = request.getfixturevalue(name)
    assert leader_value(spec, ls) == pytest.approx(FROZEN_VALUES[name], rel=1e-12)


def test_game_value_is_half_the_quadratic_form():
    P = np.array([[2.0, 1.0], [1.0, 5.0]])
    assert game_value_leader(P, np.array([3.0])) == 9.0


def test_terminal_gains_closed_form(paper):
    # At T: K1 = -N1^{-1} B1 G1 on x, K2 = -N2^{-1} B2 (G2 + B1 (...)); with
    # the paper data these reduce to the numbers below.
    _, _, _, gains = paper
    np.testing.assert_allclose(gains.K1[-1, 0], [[-2.0, 0.0]], atol=1e-14)
    np.testing.assert_allclose(gains.K1[-1, 1], [[-1.0, 0.0]], atol=1e-14)
    np.testing.assert_allclose(gains.K2[-1, 0], [[-1.0, -1.0]], atol=1e-14)
    np.testing.assert_allclose(gains.K1_hat[-1, 0], [[-1.0, 0.0]], atol=1e-14)
    np.testing.assert_allclose(gains.K2_hat[-1, 0], [[-0.5, -0.5]], atol=1e-14)


def test_no_mean_field_data_means_no_mean_field_gains(classic):
    _, _, _, gains = classic
    assert not np.any(gains.K1_hat) and not np.any(gains.K2_hat)


def test_gain_shapes_and_read_only(paper):
    spec, _, _, gains = paper
    assert gains.K1.shape == (257, 2, spec.m1, 2 * spec.state_dim)
    with pytest.raises(ValueError):
        gains.K2[0, 0, 0, 0] = 1.0
    s = gains.scaled(2.0, 3.0)
    np.testing.assert_array_equal(s.K1, 2 * gains.K1)
    np.testing.assert_array_equal(s.K2_hat, 3 * gains.K2_hat)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["paper", "classic", "pension"]), st.integers(0, 256),
       st.integers(0, 2**31))
def test_optimality_residuals_vanish(name, k, seed):
    spec, fs, ls, gains = _solved_once(name)
    fd, _, ld = _derived(name, spec, fs, ls)
    rng = np.random.default_rng(seed)
    i = int(rng.integers(spec.regimes))
    d = 2 * spec.state_dim
    X, Xh = rng.normal(size=(5, d)), rng.normal(size=(5, d))
    fdi, ldi = fd.select((k, i)), ld.select((k, i))
    K1, K1h, K2, K2h = gains.at(k, i)
    u2 = X @ K2.T + Xh @ K2h.T
    u1 = X @ K1.T + Xh @ K1h.T
    scale = 1 + np.linalg.norm(X, axis=1) + np.linalg.norm(Xh, axis=1)
    r2 = leader_condition_residual(spec, fdi, ldi, u2, X, Xh, regime=i)
    r1 = follower_condition_residual(spec, fdi, ldi, u1, u2, X, Xh, K2, K2h, regime=i)
    assert np.all(np.linalg.norm(r2, axis=1) <= 1e-10 * scale)
    assert np.all(np.linalg.norm(r1, axis=1) <= 1e-10 * scale)


_CACHE: dict = {}


def _solved_once(name):
    key = ("solved", name)
    if key not in _CACHE:
        example = {"paper": "paper_example", "classic": "single_regime_classic",
                   "pension": "pension_reduced"}[name]
        _CACHE[key] = solved(example)
    return _CACHE[key]


def _derived(name, spec, fs, ls):
    key = ("derived", name)
    if key not in _CACHE:
        _CACHE[key] = derived_on_grid(spec, fs, ls)
    return _CACHE[key]


def test_corrupted_weight_breaks_leader_condition(paper, rng):
    spec, fs, ls, gains = paper
    fd, _, ld = derived_on_grid(spec, fs, ls)
    bad = gains_from_derived(spec, fs.P1.grid, fd, corrupt_leader_weight(ld, 2.0))
    k, i = 100, 0
    X, Xh = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    _, _, K2, K2h = bad.at(k, i)
    u2 = X @ K2.T + Xh @ K2h.T
    r = leader_condition_residual(spec, fd.select((k, i)), ld.select((k, i)), u2, X, Xh, regime=i)
    assert np.min(np.abs(r)) > 1e-4


def test_gains_from_derived_reproduces_synthesis(paper):
    spec, fs, ls, gains = paper
    fd, _, ld = derived_on_grid(spec, fs, ls)
    again = gains_from_derived(spec, fs.P1.grid, fd, ld)
    for a, b in zip((gains.K1, gains.K1_hat, gains.K2, gains.K2_hat),
                    (again.K1, again.K1_hat, again.K2, again.K2_hat)):
        np.testing.assert_array_equal(a, b)
    K2, _ = leader_gains(ld)
    np.testing.assert_array_equal(K2, gains.K2)


def test_adjoint_at_time_zero(paper):
    spec, fs, ls, gains = paper
    fd, _, ld = derived_on_grid(spec, fs, ls)
    X0 = np.array([spec.x0[0], 0.0])
    _, _, K2, K2h = gains.at(0, 0)
    adj = reconstruct_adjoint(spec, fd.select((0, 0)), ld.select((0, 0)), K2, K2h, X0, X0, regime=0)
    # Y = P2t X0 when X = X_hat.
    np.testing.assert_allclose(adj.Y, ls.P2_tilde.at(0, 0) @ X0, atol=1e-14)
    np.testing.assert_allclose(adj.phi, initial_phi(spec, ls), atol=1e-14)
    assert adj.y.shape == adj.z.shape == adj.theta.shape == (1,)


def test_gains_csv(tmp_path, paper):
    _, _, _, gains = paper
    write_gains_csv(gains, tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["t", "regime", "player", "row", "col", "value", "hatted"]
    # 257 nodes x 2 regimes x 4 blocks x 1 row x 2 cols
    assert len(rows) == 1 + 257 * 2 * 4 * 2
    last = [r for r in rows if r[0] == "1" and r[1] == "1" and r[2] == "follower" and r[6] == "0"]
    assert [float(r[5]) for r in last] == [-2.0, 0.0]
