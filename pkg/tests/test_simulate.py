from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import expm

from lqstackelberg.chain import ChainPath
from lqstackelberg.errors import ConfigInvalid, EmptyEnsemble
from lqstackelberg.model import TimeGrid, builtin_example, spec_from_regimes, validate_spec
from lqstackelberg.riccati import solve_game
from lqstackelberg.simulate import (
    Perturbation,
    SimConfig,
    build_tables,
    chain_step_matrix,
    clustered_mean_se,
    direction_values,
    estimate_costs,
    follower_response_adjoint,
    perturbed_costs,
    record_steps,
    simulate_closed_loop,
    simulate_conditional_mean,
    simulate_perturbed,
    write_cost_csv,
    write_trajectory_csv,
)
from lqstackelberg.synthesis import synthesize
from tests.conftest import solved

SMALL = SimConfig(chain_paths=4, brownian_paths=8, record_points=8)


def run(spec, fs, ls, gains, config=SMALL):
    return simulate_closed_loop(spec, gains, fs, ls, config)


@pytest.fixture(scope="module")
def paper64():
    return solved("paper_example", 64)


def test_determinism_and_batch_invariance(paper64):
    spec, fs, ls, gains = paper64
    a = run(spec, fs, ls, gains)
    b = run(spec, fs, ls, gains)
    c = run(spec, fs, ls, gains, replace(SMALL, batch_paths=8, block_steps=7, threads=2))
    for key in ("X", "X_hat", "u1", "u2", "J1", "J2", "stoch_integral", "formula_integral"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))
        np.testing.assert_array_equal(getattr(a, key), getattr(c, key))


def test_conditional_mean_shared_across_inner_paths(paper64):
    spec, fs, ls, gains = paper64
    ens = run(spec, fs, ls, gains)
    tables = build_tables(spec, fs, ls, gains, SMALL.dt_divisor)
    X0 = np.array([spec.x0[0], 0.0])
    for c, path in enumerate(ens.chain_paths):
        full = simulate_conditional_mean(tables, path, X0)
        np.testing.assert_array_equal(full[ens.record_steps], ens.X_hat[c])


def test_zero_initial_state_stays_zero(paper64):
    spec, fs, ls, gains = paper64
    zero = validate_spec(spec.replace(x0=np.zeros(1)))
    ens = run(zero, fs, ls, gains)
    assert not np.any(ens.X) and not np.any(ens.J1) and not np.any(ens.J2)


def test_zero_weights_give_zero_cost():
    spec, fs, ls, gains = solved("all_zero_costs", 32)
    ens = run(spec, fs, ls, gains)
    assert not np.any(gains.K1) and not np.any(gains.K2)
    assert not np.any(ens.J1) and not np.any(ens.J2)


def test_zero_noise_paths_follow_the_mean():
    base = builtin_example("paper_example")
    spec = validate_spec(base.replace(C=np.zeros_like(base.C)))
    fs, ls = solve_game(spec, TimeGrid(64, 1.0))
    ens = run(spec, fs, ls, synthesize(spec, fs, ls))
    for b in range(ens.n_bm):
        np.testing.assert_array_equal(ens.X[:, b], ens.X[:, 0])
    np.testing.assert_allclose(ens.X[:, 0], ens.X_euler_mean, atol=1e-14)
    assert np.max(np.abs(ens.X[:, 0] - ens.X_hat)) <= 0.05
    assert not np.any(ens.stoch_integral)


def test_costs_are_nonnegative(paper64):
    spec, fs, ls, gains = paper64
    ens = run(spec, fs, ls, gains)
    assert ens.J1.min() >= 0 and ens.J2.min() >= 0


def test_conditional_mean_matches_matrix_exponential():
    reg = dict(A=0.7, A_hat=-0.2, B1=1.0, B2=1.0, C=0.3, D1=0.0, D2=0.0,
               Q1=0.0, N1=1.0, G1=0.0, Q2=0.0, N2=1.0, G2=0.0)
    spec = validate_spec(spec_from_regimes(horizon=1.0, generator=[[0.0]], x0=[2.0], regimes=[reg]))
    fs, ls = solve_game(spec, TimeGrid(100, 1.0))
    gains = synthesize(spec, fs, ls)
    tables = build_tables(spec, fs, ls, gains, 2)
    Xh = simulate_conditional_mean(tables, ChainPath(1, (), (), 1.0), np.array([2.0, 0.0]))
    t = tables.sim_grid.nodes
    assert np.max(np.abs(Xh[:, 0] - 2.0 * np.exp(0.5 * t))) <= 1e-8


def test_inner_average_matches_conditional_mean():
    spec, fs, ls, gains = solved("paper_example", 1024)
    ens = run(spec, fs, ls, gains, SimConfig(chain_paths=1, brownian_paths=10_000, record_points=4))
    for j, t in enumerate(ens.record_times):
        if t == 0:
            continue
        x = ens.X[0, :, j, 0]
        se = x.std(ddof=1) / np.sqrt(x.size)
        assert abs(x.mean() - ens.X_hat[0, j, 0]) <= 3 * se
        assert abs(x.mean() - ens.X_euler_mean[0, j, 0]) <= 3 * se


def test_record_steps_include_checkpoints():
    g = TimeGrid(100, 1.0)
    steps = record_steps(g, 3, (0.25, 0.5, 0.33))
    assert {0, 25, 33, 50, 100} <= set(steps.tolist())


def test_chain_step_matrix():
    gen = np.array([[-1.0, 1.0], [2.0, -2.0]])
    P = chain_step_matrix(gen, 0.01)
    np.testing.assert_allclose(P, expm(0.01 * gen), rtol=1e-14)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)


def test_clustered_standard_error():
    s = np.array([[1.0, 3.0], [5.0, 7.0], [0.0, 2.0]])
    mean, se = clustered_mean_se(s)
    means = np.array([2.0, 6.0, 1.0])
    assert mean == pytest.approx(3.0)
    assert se == pytest.approx(means.std(ddof=1) / np.sqrt(3))
    with pytest.raises(EmptyEnsemble):
        clustered_mean_se(np.zeros((0, 3)))


def test_zero_perturbation_is_exact(paper64):
    spec, fs, ls, gains = paper64
    sg = SMALL.sim_grid(fs.P1.grid)
    perts = (Perturbation("follower", direction_values("sine", sg, 1), epsilon=0.0),
             Perturbation("leader", direction_values("zero", sg, 1)))
    cfg = replace(SMALL, perturbations=perts)
    ens = run(spec, fs, ls, gains, cfg)
    base = estimate_costs(spec, ens)
    assert perturbed_costs(ens, 0) == base
    assert not np.any(ens.perturbations[1].delta("leader", 0.3))
    assert not np.any(ens.perturbations[1].delta("follower", 0.3))
    assert simulate_perturbed(spec, gains, fs, ls, cfg) == base
    plain = run(spec, fs, ls, gains)
    np.testing.assert_array_equal(plain.J1, ens.J1)


def test_perturbation_is_exactly_quadratic_in_eps(paper64):
    spec, fs, ls, gains = paper64
    sg = SMALL.sim_grid(fs.P1.grid)
    pert = Perturbation("leader", direction_values("constant", sg, 1))
    ens = run(spec, fs, ls, gains, replace(SMALL, perturbations=(pert,)))
    ps = ens.perturbations[0]
    d1, d2, d3 = (ps.delta("leader", e) for e in (0.1, 0.2, 0.3))
    # Third finite difference of a quadratic vanishes.
    np.testing.assert_allclose(d3 - 3 * d2 + 3 * d1, 0.0, atol=1e-12)


def test_control_energy_under_zero_weights():
    spec, fs, ls, gains = solved("all_zero_costs", 64)
    sg = SMALL.sim_grid(fs.P1.grid)
    perts = tuple(Perturbation("follower", direction_values(k, sg, 1)) for k in ("constant", "sine"))
    ens = run(spec, fs, ls, gains, replace(SMALL, perturbations=perts))
    const, sine = ens.perturbations
    assert not np.any(const.L1)
    np.testing.assert_allclose(const.Q1, 0.5, rtol=1e-13)
    np.testing.assert_allclose(sine.Q1, 0.25, atol=1e-9)


def test_control_variate_has_mean_zero(paper64):
    spec, fs, ls, gains = paper64
    sg = SMALL.sim_grid(fs.P1.grid)
    pert = Perturbation("follower", direction_values("constant", sg, 1))
    cfg = SimConfig(chain_paths=100, brownian_paths=50, record_points=2, perturbations=(pert,))
    ps = run(spec, fs, ls, gains, cfg).perturbations[0]
    m, se = clustered_mean_se(ps.M1)
    assert abs(m) <= 3 * se
    # It removes most of the chain-driven noise.
    assert clustered_mean_se(ps.L1 - ps.M1)[1] < 0.5 * clustered_mean_se(ps.L1)[1]


def test_follower_response_adjoint(paper64):
    spec, fs, ls, gains = paper64
    tables = build_tables(spec, fs, ls, gains, 2)
    sg = tables.sim_grid
    zero = follower_response_adjoint(tables, direction_values("zero", sg, 1))
    assert not np.any(zero)
    v = direction_values("sine", sg, 1)
    g1 = follower_response_adjoint(tables, v)
    g2 = follower_response_adjoint(tables, 2 * v)
    np.testing.assert_allclose(g2, 2 * g1, atol=1e-15)
    assert not np.any(g1[-1])


def test_direction_values():
    sg = TimeGrid(8, 2.0)
    np.testing.assert_array_equal(direction_values("constant", sg, 2), np.ones((9, 2)))
    s = direction_values("sine", sg, 1)[:, 0]
    assert s[2] == pytest.approx(1.0) and s[0] == 0.0
    r1 = direction_values("random", sg, 1, 5, 0)
    np.testing.assert_array_equal(r1, direction_values("random", sg, 1, 5, 0))
    assert not np.array_equal(r1, direction_values("random", sg, 1, 5, 1))
    with pytest.raises(ConfigInvalid):
        direction_values("square", sg, 1)


def test_config_validation(paper64):
    spec, fs, ls, gains = paper64
    with pytest.raises(ConfigInvalid):
        SimConfig(chain_paths=0)
    with pytest.raises(ConfigInvalid):
        Perturbation("referee", np.zeros(3))
    bad = Perturbation("follower", np.zeros(5))
    with pytest.raises(ConfigInvalid):
        run(spec, fs, ls, gains, replace(SMALL, perturbations=(bad,)))
    with pytest.raises(ConfigInvalid):
        simulate_perturbed(spec, gains, fs, ls, SMALL)


def test_csv_outputs(tmp_path, paper64):
    spec, fs, ls, gains = paper64
    ens = run(spec, fs, ls, gains)
    write_trajectory_csv(ens, tmp_path / "t.csv", max_chains=2, max_bm=1)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["chain_id", "bm_id", "t", "regime", "component", "value"]
    comps = {r[4] for r in rows[1:]}
    assert comps == {"X1", "X2", "Xhat1", "Xhat2", "u1_1", "u2_1"}
    assert {r[1] for r in rows[1:] if r[4].startswith("Xhat")} == {"-1"}
    write_cost_csv(estimate_costs(spec, ens), tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["quantity", "mean", "se", "n_chain", "n_bm"]
    assert [r[0] for r in rows[1:]] == ["J1", "J2"]
