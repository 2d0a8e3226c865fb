"""Executable checks of the equilibrium and a structured report of the results.

Every stochastic check states its acceptance band from the standard errors of
the run it inspects. Standard errors are clustered by chain path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ProblemSpec
from .riccati import FollowerSolution, LeaderSolution, derived_on_grid
from .simulate import (
    ClosedLoopEnsemble,
    Perturbation,
    SimConfig,
    build_tables,
    clustered_mean_se,
    direction_values,
    estimate_costs,
    simulate_closed_loop,
)
from .synthesis import (
    GainSchedule,
    corrupt_leader_weight,
    gains_from_derived,
    initial_phi,
    leader_condition_residual,
    leader_value,
)

STATUSES = ("pass", "fail", "skipped")
DEFAULT_DIRECTIONS = ("constant", "sine", "random")
FOLLOWER_EPSILONS = (0.05, 0.1)
R2_MIN = 0.99
CHECK_NAMES = (
    "value_consistency",
    "follower_optimality",
    "leader_stationarity",
    "follower_cost_formula",
    "filtering_identities",
)
RESIDUAL_TOL = 1e-8

Solutions = tuple[FollowerSolution, LeaderSolution]


@dataclass(frozen=True)
class ReportEntry:
    check: str
    status: str
    value: float
    tolerance: float
    se: float = float("nan")
    notes: str = ""

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")

    @property
    def passed(self) -> bool:
        return self.status != "fail"


def _entry(check, ok, value, tol, se=float("nan"), notes="") -> ReportEntry:
    return ReportEntry(check, "pass" if ok else "fail", float(value), float(tol), float(se), notes)


@dataclass
class VerificationReport:
    """Ordered collection of check results; each check name appears once."""

    entries: list[ReportEntry] = field(default_factory=list)

    def add(self, entry: ReportEntry) -> ReportEntry:
        if any(e.check == entry.check for e in self.entries):
            raise ValueError(f"check {entry.check!r} already reported")
        self.entries.append(entry)
        return entry

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failures(self) -> list[ReportEntry]:
        return [e for e in self.entries if e.status == "fail"]

    def __getitem__(self, check: str) -> ReportEntry:
        for e in self.entries:
            if e.check == check:
                return e
        raise KeyError(check)

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            se = "" if math.isnan(e.se) else f" se={e.se:.6g}"
            lines.append(
                f"[{e.status.upper():7s}] {e.check}: value={e.value:.6g} tol={e.tolerance:.6g}{se}"
            )
            if e.notes:
                lines.append(f"          {e.notes}")
        verdict = "all checks passed" if self.passed else f"{len(self.failures)} check(s) failed"
        lines.append(verdict)
        return "\n".join(lines) + "\n"

    def write_text(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def write_csv(self, path: str | Path) -> None:
        """CSV ``check, status, value, tolerance, se, notes``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "status", "value", "tolerance", "se", "notes"])
            for e in self.entries:
                w.writerow([
                    e.check, e.status, "%.17g" % e.value, "%.17g" % e.tolerance,
                    "%.17g" % e.se, e.notes,
                ])


# ---------------------------------------------------------------------------
# discretization allowance


@dataclass(frozen=True, eq=False)
class DiscretizationPair:
    """Coupled runs at ``dt`` and ``dt / 2`` sharing chain and Brownian paths.

    The coarse run sums pairs of the fine run's normal draws, so per-sample
    differences isolate the discretization effect.
    """

    coarse: ClosedLoopEnsemble
    fine: ClosedLoopEnsemble
    dt: float

    def allowance(self, statistic) -> float:
        """``C_disc * dt`` for a per-sample statistic, by first-order extrapolation.

        ``J(dt) - J(0) ~ 2 (J(dt) - J(dt/2))`` for a first-order weak scheme.
        """
        diff = np.asarray(statistic(self.coarse)) - np.asarray(statistic(self.fine))
        return 2.0 * abs(float(diff.mean()))


def discretization_pair(
    spec: ProblemSpec,
    solutions: Solutions,
    gains: GainSchedule,
    config: SimConfig,
    chain_paths: int | None = 50,
) -> DiscretizationPair:
    """Run the coupled pair at ``config``'s step and half of it.

    ``chain_paths`` caps the outer sample size; the difference of coupled
    runs has a much smaller variance than either run.
    """
    fs, ls = solutions
    base = replace(config, perturbations=(), record_points=1, checkpoints=())
    if chain_paths is not None:
        base = replace(base, chain_paths=min(chain_paths, config.chain_paths))
    coarse_cfg = replace(base, bm_substeps=2 * config.bm_substeps)
    fine_cfg = replace(
        base, dt_divisor=2 * config.dt_divisor, block_steps=2 * config.block_steps
    )
    coarse = simulate_closed_loop(spec, gains, fs, ls, coarse_cfg)
    fine = simulate_closed_loop(spec, gains, fs, ls, fine_cfg)
    return DiscretizationPair(coarse, fine, coarse.sim_grid.h)


# ---------------------------------------------------------------------------
# helpers


def default_perturbations(
    spec: ProblemSpec,
    solutions: Solutions,
    config: SimConfig,
    player: str,
    directions: Sequence | None = None,
) -> tuple[Perturbation, ...]:
    """Perturbations for ``player`` from direction kinds or node arrays.

    Random directions draw from streams keyed by the master seed, so reports
    are reproducible.
    """
    sg = config.sim_grid(solutions[0].P1.grid)
    m = spec.m1 if player == "follower" else spec.m2
    out = []
    offset = 0 if player == "follower" else 1000
    for j, d in enumerate(DEFAULT_DIRECTIONS if directions is None else directions):
        if isinstance(d, str):
            v = direction_values(d, sg, m, config.master_seed, offset + j)
            label = d
        else:
            v = np.asarray(d, dtype=float)
            label = f"direction{j + 1}"
        out.append(Perturbation(player, v, label=label))
    return tuple(out)


def _ensemble_with(
    spec, solutions, gains, config, perturbations, ensemble
) -> ClosedLoopEnsemble:
    if ensemble is not None:
        return ensemble
    fs, ls = solutions
    cfg = replace(config, perturbations=tuple(config.perturbations) + tuple(perturbations))
    return simulate_closed_loop(spec, gains, fs, ls, cfg)


def _player_samples(ensemble: ClosedLoopEnsemble, player: str):
    return [ps for ps in ensemble.perturbations if ps.perturbation.player == player]


def uncentered_r2(eps: np.ndarray, dj: np.ndarray) -> tuple[float, float]:
    """Least-squares ``a`` for ``dj ~ a eps^2`` and its uncentered ``R^2``.

    The model has no intercept, so the total sum of squares is taken about
    zero. An identically zero response is a perfect fit.
    """
    eps = np.asarray(eps, dtype=float)
    dj = np.asarray(dj, dtype=float)
    a = float(np.sum(eps**2 * dj) / np.sum(eps**4))
    tot = float(np.sum(dj**2))
    if tot == 0.0:
        return a, 1.0
    res = dj - a * eps**2
    return a, 1.0 - float(np.sum(res**2)) / tot


# ---------------------------------------------------------------------------
# checks


def check_value_consistency(
    spec: ProblemSpec,
    solutions: Solutions,
    gains: GainSchedule,
    config: SimConfig,
    *,
    ensemble: ClosedLoopEnsemble | None = None,
    pair: DiscretizationPair | None = None,
) -> ReportEntry:
    """Monte-Carlo leader cost against the Riccati value ``1/2 <P2t^(11) x0, x0>``."""
    fs, ls = solutions
    ens = _ensemble_with(spec, solutions, gains, config, (), ensemble)
    est = estimate_costs(spec, ens)
    value = leader_value(spec, ls)
    if pair is None:
        pair = discretization_pair(spec, solutions, gains, config)
    allow = pair.allowance(lambda e: e.J2)
    gap = abs(est.J2_mean - value)
    tol = 3 * est.J2_se + allow
    notes = (
        f"J2_mc={est.J2_mean:.10g} value={value:.10g} 3se={3 * est.J2_se:.6g} "
        f"allowance={allow:.6g}"
    )
    return _entry("value_consistency", gap <= tol, gap, tol, est.J2_se, notes)


def check_follower_optimality(
    spec: ProblemSpec,
    solutions: Solutions,
    gains: GainSchedule,
    config: SimConfig,
    directions: Sequence | None = None,
    *,
    ensemble: ClosedLoopEnsemble | None = None,
    epsilons: Iterable[float] = FOLLOWER_EPSILONS,
    control_variate: bool = True,
) -> ReportEntry:
    """Local optimality of the follower's law along open-loop deviations.

    For each direction and ``eps`` in ``+-epsilons``, ``dJ1 >= -3 SE`` must
    hold and the fit ``dJ1 ~ a eps^2`` must have ``a >= 0`` and ``R^2 >= 0.99``.
    The leader's control process is held fixed along the deviation.
    """
    if ensemble is None:
        perts = default_perturbations(spec, solutions, config, "follower", directions)
        ensemble = _ensemble_with(spec, solutions, gains, config, perts, None)
    samples = _player_samples(ensemble, "follower")
    if not samples:
        return ReportEntry("follower_optimality", "skipped", float("nan"), R2_MIN,
                           notes="no follower perturbations")
    eps = np.array(sorted({s * e for e in epsilons for s in (-1.0, 1.0)}))
    ok = True
    worst_r2 = 1.0
    worst_se = float("nan")
    parts = []
    for ps in samples:
        stats = [clustered_mean_se(ps.delta("follower", e, control_variate)) for e in eps]
        dj = np.array([m for m, _ in stats])
        se = np.array([s for _, s in stats])
        a, r2 = uncentered_r2(eps, dj)
        _, raw_r2 = uncentered_r2(eps, [clustered_mean_se(ps.delta("follower", e))[0] for e in eps])
        lower_ok = bool(np.all(dj >= -3 * np.nan_to_num(se)))
        this_ok = lower_ok and a >= 0 and r2 >= R2_MIN
        ok &= this_ok
        if r2 <= worst_r2:
            worst_r2, worst_se = r2, float(np.nanmax(se)) if se.size else float("nan")
        parts.append(
            f"{ps.perturbation.label or 'v'}: a={a:.6g} R2={r2:.6f} (raw {raw_r2:.6f}) "
            f"min(dJ+3se)={float(np.min(dj + 3 * np.nan_to_num(se))):.3g}"
            + ("" if this_ok else " FAIL")
        )
    return _entry("follower_optimality", ok, worst_r2, R2_MIN, worst_se, "; ".join(parts))


def algebraic_leader_residual(
    spec: ProblemSpec, solutions: Solutions, ensemble: ClosedLoopEnsemble
) -> float:
    """Largest ``|N2 u2 + B2^T Y + D2^T Z + F2 X + F2h Xh| / (1 + |X| + |Xh|)``.

    Evaluated at the recorded nodes with the Riccati-derived quantities,
    whatever gains produced the recorded controls.
    """
    fs, ls = solutions
    fd, _, ld = derived_on_grid(spec, fs, ls)
    divisor = ensemble.config.dt_divisor
    worst = 0.0
    for j, step in enumerate(ensemble.record_steps):
        k = int(step) // divisor
        reg = ensemble.regimes[:, j].astype(int)[:, None]
        X = ensemble.X[:, :, j]
        Xh = ensemble.X_hat[:, j][:, None, :]
        res = leader_condition_residual(
            spec, fd.select((k, reg)), ld.select((k, reg)),
            ensemble.u2[:, :, j], X, Xh, regime=reg,
        )
        scale = 1 + np.linalg.norm(X, axis=-1) + np.linalg.norm(Xh, axis=-1)
        worst = max(worst, float(np.max(np.linalg.norm(res, axis=-1) / scale)))
    return worst


def check_leader_stationarity(
    spec: ProblemSpec,
    solutions: Solutions,
    gains: GainSchedule,
    config: SimConfig,
    directions: Sequence | None = None,
    *,
    ensemble: ClosedLoopEnsemble | None = None,
    epsilon: float = 0.05,
    residual_tol: float = RESIDUAL_TOL,
) -> ReportEntry:
    """Central differences of the leader cost and the pointwise optimality residual.

    Along a leader deviation the follower plays its exact best response.
    """
    if ensemble is None:
        perts = default_perturbations(spec, solutions, config, "leader", directions)
        ensemble = _ensemble_with(spec, solutions, gains, config, perts, None)
    ok = True
    parts = []
    worst_ratio, worst_se, worst_val = -1.0, float("nan"), 0.0
    for ps in _player_samples(ensemble, "leader"):
        cd = (ps.delta("leader", epsilon) - ps.delta("leader", -epsilon)) / (2 * epsilon)
        m, se = clustered_mean_se(cd)
        this_ok = abs(m) <= 3 * np.nan_to_num(se)
        ok &= bool(this_ok)
        ratio = abs(m) / se if se > 0 else (0.0 if m == 0 else math.inf)
        if ratio > worst_ratio:
            worst_ratio, worst_se, worst_val = ratio, se, abs(m)
        parts.append(
            f"{ps.perturbation.label or 'v'}: d={m:.6g} se={se:.3g}" + ("" if this_ok else " FAIL")
        )
    resid = algebraic_leader_residual(spec, solutions, ensemble)
    resid_ok = resid <= residual_tol
    ok &= resid_ok
    parts.append(f"residual={resid:.3g} tol={residual_tol:g}" + ("" if resid_ok else " FAIL"))
    tol = 3 * worst_se if worst_ratio >= 0 else 0.0
    return _entry("leader_stationarity", ok, worst_val, tol, worst_se, "; ".join(parts))


def follower_formula_samples(
    spec: ProblemSpec, solutions: Solutions, ensemble: ClosedLoopEnsemble
) -> np.ndarray:
    """Per-sample follower cost from the completion-of-squares representation."""
    fs, ls = solutions
    x0 = spec.x0
    const = 0.5 * float(x0 @ fs.P1_tilde.at(0, spec.i0) @ x0) + float(initial_phi(spec, ls) @ x0)
    return const + 0.5 * ensemble.formula_integral


def check_follower_cost_formula(
    spec: ProblemSpec,
    solutions: Solutions,
    gains: GainSchedule,
    config: SimConfig,
    *,
    ensemble: ClosedLoopEnsemble | None = None,
    pair: DiscretizationPair | None = None,
) -> ReportEntry:
    """Direct follower cost against its completion-of-squares formula, same samples."""
    ens = _ensemble_with(spec, solutions, gains, config, (), ensemble)
    if pair is None:
        pair = discretization_pair(spec, solutions, gains, config)

    def gap_samples(e):
        return e.J1 - follower_formula_samples(spec, solutions, e)

    m, se = clustered_mean_se(gap_samples(ens))
    allow = pair.allowance(gap_samples)
    tol = 3 * np.nan_to_num(se) + allow
    direct = clustered_mean_se(ens.J1)[0]
    notes = f"direct={direct:.10g} formula={direct - m:.10g} allowance={allow:.6g}"
    return _entry("follower_cost_formula", abs(m) <= tol, abs(m), tol, se, notes)


def check_filtering_identities(
    spec: ProblemSpec, ensemble: ClosedLoopEnsemble, min_rate: float = 0.95
) -> ReportEntry:
    """Per chain path: the stochastic integral has mean zero and ``E[x] = x_hat``.

    Each chain path is tested at ``3 SE`` of its inner sample; the bound for
    ``E[x]`` also carries the exact gap between the Euler scheme's own
    conditional mean and the ODE value of ``x_hat``. Requires at least two
    inner paths.
    """
    B = ensemble.n_bm
    if B < 2:
        return ReportEntry("filtering_identities", "skipped", float("nan"), min_rate,
                           notes=f"{B} Brownian path(s) per chain path, need at least 2")
    n = spec.state_dim
    sg = ensemble.sim_grid
    rates = {}

    def within(values, target, slack):
        mean = values.mean(axis=1)
        se = values.std(axis=1, ddof=1) / math.sqrt(B)
        return np.all(np.abs(mean - target) <= 3 * se + slack, axis=-1)

    rates["stochastic_integral"] = float(
        within(ensemble.stoch_integral, 0.0, 0.0).mean()
    )
    cps = ensemble.config.checkpoints
    for cp in cps:
        step = int(round(cp * sg.step_count))
        hits = np.nonzero(ensemble.record_steps == step)[0]
        if hits.size == 0:
            continue
        j = int(hits[0])
        x = ensemble.X[:, :, j, :n]
        xh = ensemble.X_hat[:, j, :n]
        slack = np.abs(ensemble.X_euler_mean[:, j, :n] - xh) + 1e-12 * (1 + np.abs(xh))
        rates[f"t={sg.node(step):.6g}"] = float(within(x, xh, slack).mean())
    worst = min(rates.values())
    notes = " ".join(f"{k}:{v:.4f}" for k, v in rates.items())
    return _entry("filtering_identities", worst >= min_rate, worst, min_rate, notes=notes)


# ---------------------------------------------------------------------------
# negative controls


def corrupted_gain_schedule(gains: GainSchedule, factor: float = 1.5) -> GainSchedule:
    """Both players' gains scaled by ``factor``."""
    return gains.scaled(factor, factor)


def corrupted_weight_gains(
    spec: ProblemSpec, solutions: Solutions, factor: float = 2.0
) -> GainSchedule:
    """Gains synthesized with the leader's effective weight ``N2_tilde`` scaled."""
    fs, ls = solutions
    fd, _, ld = derived_on_grid(spec, fs, ls)
    return gains_from_derived(spec, fs.P1.grid, fd, corrupt_leader_weight(ld, factor))


# ---------------------------------------------------------------------------
# suite


def run_checks(
    spec: ProblemSpec,
    solutions: Solutions,
    gains: GainSchedule,
    config: SimConfig,
    *,
    directions: Sequence | None = None,
    allowance_chains: int | None = 50,
) -> tuple[VerificationReport, ClosedLoopEnsemble]:
    """Run every check from one shared ensemble plus a coupled allowance pair."""
    fs, ls = solutions
    perts = default_perturbations(spec, solutions, config, "follower", directions)
    perts += default_perturbations(spec, solutions, config, "leader", directions)
    cfg = replace(config, perturbations=tuple(config.perturbations) + perts)
    tables = build_tables(spec, fs, ls, gains, cfg.dt_divisor)
    ens = simulate_closed_loop(spec, gains, fs, ls, cfg, tables=tables)
    pair = discretization_pair(spec, solutions, gains, config, allowance_chains)
    report = VerificationReport()
    report.add(check_value_consistency(spec, solutions, gains, config, ensemble=ens, pair=pair))
    report.add(check_follower_optimality(spec, solutions, gains, config, ensemble=ens))
    report.add(check_leader_stationarity(spec, solutions, gains, config, ensemble=ens))
    report.add(check_follower_cost_formula(spec, solutions, gains, config, ensemble=ens, pair=pair))
    report.add(check_filtering_identities(spec, ens))
    return report, ens
