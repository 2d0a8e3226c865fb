from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from lqstackelberg.errors import GainSingular, MatrixSingular
from lqstackelberg.model import TimeGrid, builtin_example, spec_from_regimes, validate_spec
from lqstackelberg.riccati import (
    KINDS,
    ode_rhs,
    resolvent,
    solve_follower,
    solve_game,
    solve_leader,
    spd_inverse,
    write_trajectory_csv,
)

# Frozen at N_t = 256 (agree with N_t = 2048 to 1e-10).
P1_0 = (0.3084148019007766, 0.47135892873305335)
P1_TILDE_0 = (0.3352149379141822, 0.5323910857178833)


def scalar_spec(a=0.0, b=1.0, c=0.0, d=0.0, q=1.0, n=1.0, g=0.0, T=1.0):
    reg = dict(A=a, B1=b, B2=1.0, C=c, D1=d, D2=0.0, Q1=q, N1=n, G1=g,
               Q2=1.0, N2=1.0, G2=0.0)
    return validate_spec(spec_from_regimes(horizon=T, generator=[[0.0]], x0=[1.0], regimes=[reg]))


def scalar_follower_oracle(a, b, c, d, q, n, g, T, ts):
    """Scalar follower Riccati equation written out by hand, solved by scipy."""
    def f(t, p):
        s = b * p + d * p * c
        return -(2 * a * p + c * c * p + q - s * s / (n + d * d * p))

    sol = solve_ivp(f, (T, 0.0), [g], t_eval=ts[::-1], rtol=1e-12, atol=1e-14)
    return sol.y[0][::-1]


def test_tanh_oracle():
    spec = scalar_spec()
    grid = TimeGrid(1000, 1.0)
    P1 = solve_follower(spec, grid).P1.values[:, 0, 0, 0]
    assert np.max(np.abs(P1 - np.tanh(1 - grid.nodes))) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(
    st.floats(-1, 1), st.floats(0.1, 2), st.floats(-1, 1), st.floats(-1, 1),
    st.floats(0, 2), st.floats(0.2, 3), st.floats(0, 2),
)
def test_scalar_follower_matches_hand_written_equation(a, b, c, d, q, n, g):
    spec = scalar_spec(a, b, c, d, q, n, g)
    grid = TimeGrid(400, 1.0)
    P1 = solve_follower(spec, grid).P1.values[:, 0, 0, 0]
    ref = scalar_follower_oracle(a, b, c, d, q, n, g, 1.0, grid.nodes)
    assert np.max(np.abs(P1 - ref)) <= 1e-7 * (1 + np.max(np.abs(ref)))


def test_paper_example_follower_against_scipy():
    spec = validate_spec(builtin_example("paper_example"))
    b = spec.B1[:, 0, 0]
    c = spec.C[0, 0, 0]

    def f(t, p):
        return -(c * c * p - (b * p) ** 2 + np.array([p[1] - p[0], p[0] - p[1]]))

    grid = TimeGrid(512, 1.0)
    ref = solve_ivp(f, (1.0, 0.0), [1.0, 1.0], t_eval=grid.nodes[::-1], rtol=1e-12, atol=1e-14)
    P1 = solve_follower(spec, grid).P1.values[:, :, 0, 0]
    assert np.max(np.abs(P1 - ref.y.T[::-1])) <= 1e-9


def test_frozen_initial_values(paper):
    _, fs, _, _ = paper
    np.testing.assert_allclose(fs.P1.values[0, :, 0, 0], P1_0, rtol=1e-12)
    np.testing.assert_allclose(fs.P1_tilde.values[0, :, 0, 0], P1_TILDE_0, rtol=1e-12)


def test_terminal_values_are_assigned(paper):
    spec, fs, ls, _ = paper
    n = spec.state_dim
    np.testing.assert_array_equal(fs.P1.values[-1], spec.G1)
    np.testing.assert_array_equal(fs.P1_tilde.values[-1], spec.G1 + spec.G1_hat)
    np.testing.assert_array_equal(fs.P1_hat.values[-1], spec.G1_hat)
    np.testing.assert_array_equal(ls.P2.values[-1, :, :n, :n], spec.G2)
    np.testing.assert_array_equal(ls.P2.values[-1, :, n:, :], 0.0)
    np.testing.assert_array_equal(ls.P2_tilde.values[-1, :, :n, :n], spec.G2 + spec.G2_hat)
    np.testing.assert_array_equal(ls.P2_tilde.values[-1, :, :, n:], 0.0)


@pytest.mark.parametrize("name", ["paper_example", "pension_reduced", "single_regime_classic"])
def test_difference_systems_are_consistent(name):
    spec = validate_spec(builtin_example(name))
    fs, ls = solve_game(spec, TimeGrid(256, spec.horizon))
    np.testing.assert_allclose(fs.P1_tilde.values - fs.P1.values, fs.P1_hat.values, atol=1e-12)
    np.testing.assert_allclose(ls.P2_tilde.values - ls.P2.values, ls.P2_hat.values, atol=1e-12)


def test_solutions_symmetric_and_follower_psd(paper):
    _, fs, ls, _ = paper
    for traj in (*fs, *ls):
        v = traj.values
        np.testing.assert_array_equal(v, np.swapaxes(v, -1, -2))
    for traj in (fs.P1, fs.P1_tilde):
        assert np.linalg.eigvalsh(traj.values).min() >= -1e-8


def test_solve_leader_reuses_follower(paper):
    spec, fs, ls, _ = paper
    ls2 = solve_leader(spec, fs)
    for a, b in zip(ls, ls2):
        np.testing.assert_array_equal(a.values, b.values)


def test_rhs_vanishes_at_terminal_for_zero_data():
    spec = validate_spec(builtin_example("all_zero_costs"))
    zero = np.zeros((2, 1, 1))
    assert not np.any(ode_rhs("follower_P1", spec, None, 1.0, zero))


def test_rhs_matches_scalar_formula():
    spec = scalar_spec(a=0.3, b=1.2, c=0.4, d=0.5, q=0.7, n=1.5)
    p = 0.8
    s = 1.2 * p + 0.5 * p * 0.4
    want = -(2 * 0.3 * p + 0.16 * p + 0.7 - s * s / (1.5 + 0.25 * p))
    got = ode_rhs("follower_P1", spec, None, 0.5, np.full((1, 1, 1), p))
    assert got[0, 0, 0] == pytest.approx(want, rel=1e-13)
    assert set(KINDS) == {"follower_P1", "follower_Ptilde1", "leader_P2", "leader_Ptilde2"}


def test_unknown_kind():
    spec = scalar_spec()
    with pytest.raises(ValueError):
        ode_rhs("nope", spec, None, 0.0, np.zeros((1, 1, 1)))


def test_spd_inverse():
    M = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(spd_inverse(M, "N") @ M, np.eye(2), atol=1e-14)
    assert spd_inverse(np.array([[4.0]]), "N")[0, 0] == 0.25
    with pytest.raises(GainSingular):
        spd_inverse(np.array([[1.0, 1.0], [1.0, 1.0]]), "N1_tilde")
    with pytest.raises(GainSingular):
        spd_inverse(np.array([[0.0]]), "N1_tilde")


def test_resolvent_guard():
    P2 = np.eye(2)
    np.testing.assert_array_equal(resolvent(P2, np.zeros((2, 2))), P2)
    with pytest.raises(MatrixSingular) as info:
        resolvent(P2[None], np.eye(2)[None], times=np.array([0.25]))
    assert info.value.t == 0.25 and info.value.regime == 1


def test_zero_generator_decouples_regimes():
    paper = builtin_example("paper_example")
    frozen = validate_spec(paper.replace(generator=np.zeros((2, 2))))
    grid = TimeGrid(128, 1.0)
    fs, ls = solve_game(frozen, grid)
    for i in range(2):
        single = validate_spec(paper.replace(
            generator=np.zeros((1, 1)), initial_regime=1,
            **{name: getattr(paper, name)[i:i + 1] for name, *_ in _coefficient_names()},
        ))
        fs1, ls1 = solve_game(single, grid)
        for a, b in zip((*fs, *ls), (*fs1, *ls1)):
            np.testing.assert_allclose(a.values[:, i], b.values[:, 0], atol=1e-14)


def _coefficient_names():
    from lqstackelberg.model import COEFFICIENTS
    return COEFFICIENTS


def test_follower_weight_scaling():
    spec = validate_spec(builtin_example("single_regime_classic"))
    scaled = validate_spec(spec.replace(**{k: 3 * getattr(spec, k)
                                           for k in ("Q1", "Q1_hat", "G1", "G1_hat", "N1")}))
    grid = TimeGrid(128, 1.0)
    a, b = solve_follower(spec, grid), solve_follower(scaled, grid)
    np.testing.assert_allclose(b.P1.values, 3 * a.P1.values, rtol=1e-12)


def test_trajectory_csv(tmp_path, paper):
    _, fs, _, _ = paper
    write_trajectory_csv(fs.P1, tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["t", "regime", "row", "col", "value"]
    assert len(rows) == 1 + 257 * 2
    assert float(rows[-1][-1]) == 1.0 and rows[-1][0] == "1"
    assert float(rows[1][-1]) == fs.P1.values[0, 0, 0, 0]
