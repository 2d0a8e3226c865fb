"""Regime-coupled matrix Riccati equations and the coefficients built from them.

All derived-quantity functions are vectorized: ``P`` arguments may carry any
number of leading axes as long as the last three are ``(K, d, d)``, with the
regime axis aligned to the spec's stacked coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, NamedTuple

import numpy as np

from .errors import GainSingular, MatrixSingular, StepUnstable
from .model import ProblemSpec, TimeGrid

GAIN_EIG_TOL = 1e-10
RCOND_TOL = 1e-12

KINDS = ("follower_P1", "follower_Ptilde1", "leader_P2", "leader_Ptilde2")
HAT_KINDS = ("follower_P1hat", "leader_P2hat")


def _t(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + _t(M))


def _locate(bad: np.ndarray, times) -> tuple[float, int]:
    """Time and 1-based regime of the first flagged entry of a ``(..., K)`` mask."""
    bad = np.asarray(bad)
    if bad.ndim == 0:
        return float("nan") if times is None else float(np.asarray(times).ravel()[0]), 1
    idx = np.argwhere(bad)[0]
    regime = int(idx[-1]) + 1
    if times is None:
        return float("nan"), regime
    t = np.broadcast_to(np.asarray(times, dtype=float), bad.shape)
    return float(t[tuple(idx)]), regime


def spd_inverse(M: np.ndarray, name: str, times=None) -> np.ndarray:
    """Inverse of a stack of symmetric positive definite matrices via Cholesky."""
    if M.shape[-1] == 1:
        bad = ~(M[..., 0, 0] >= GAIN_EIG_TOL)
        if np.any(bad):
            t, regime = _locate(bad, times)
            raise GainSingular(
                f"{name} not positive definite at t={t:.6g}, regime {regime} "
                f"(value {M[..., 0, 0][bad][0]:.3e})"
            )
        return 1.0 / M
    lam = np.linalg.eigvalsh(M)
    bad = ~(lam[..., 0] >= GAIN_EIG_TOL)
    if np.any(bad):
        t, regime = _locate(bad, times)
        raise GainSingular(
            f"{name} not positive definite at t={t:.6g}, regime {regime} "
            f"(min eig {lam[bad][0, 0]:.3e})"
        )
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    return _t(Linv) @ Linv


def _coupling(gen: np.ndarray, P: np.ndarray) -> np.ndarray:
    # sum_j lambda_ij (P_j - P_i)
    rowsum = gen.sum(axis=1)
    return np.einsum("ij,...jab->...iab", gen, P) - rowsum[:, None, None] * P


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class RegimeTrajectory:
    """Per-node, per-regime matrices; ``values`` has shape ``(N_t + 1, K, d, d)``."""

    grid: TimeGrid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, k: int, regime: int | None = None) -> np.ndarray:
        """Node ``k``; ``regime`` is 0-based when given."""
        return self.values[k] if regime is None else self.values[k, regime]

    def block(self, rows: slice, cols: slice) -> "RegimeTrajectory":
        return RegimeTrajectory(self.grid, self.values[..., rows, cols], self.name)

    def __sub__(self, other: "RegimeTrajectory") -> "RegimeTrajectory":
        return RegimeTrajectory(self.grid, self.values - other.values)


class FollowerSolution(NamedTuple):
    P1: RegimeTrajectory
    P1_tilde: RegimeTrajectory
    P1_hat: RegimeTrajectory


class LeaderSolution(NamedTuple):
    P2: RegimeTrajectory
    P2_tilde: RegimeTrajectory
    P2_hat: RegimeTrajectory


# ---------------------------------------------------------------------------
# derived quantities


@dataclass(frozen=True, eq=False)
class FollowerDerived:
    """Follower coefficient combinations; double-struck letters are spelled ``*_bb``."""

    P1: np.ndarray
    P1_hat: np.ndarray
    N1_tilde: np.ndarray
    N1_tilde_inv: np.ndarray
    S1: np.ndarray
    S1_hat: np.ndarray
    S1_tilde: np.ndarray
    A_bb: np.ndarray
    A_bb_hat: np.ndarray
    C_bb: np.ndarray
    C_bb_hat: np.ndarray
    S2: np.ndarray
    S2_hat: np.ndarray
    F2_bb: np.ndarray
    F2_bb_hat: np.ndarray
    B1_bb: np.ndarray
    B2_bb: np.ndarray
    D1_bb: np.ndarray
    D2_bb: np.ndarray
    F1_bb: np.ndarray

    def select(self, index) -> "FollowerDerived":
        return FollowerDerived(**{f.name: getattr(self, f.name)[index] for f in fields(self)})


@dataclass(frozen=True, eq=False)
class AugmentedCoefficients:
    """2n-dimensional block coefficients for the state ``X = (x, psi)``."""

    A: np.ndarray
    A_hat: np.ndarray
    C: np.ndarray
    C_hat: np.ndarray
    B1: np.ndarray
    D1: np.ndarray
    F1: np.ndarray
    B2: np.ndarray
    D2: np.ndarray
    F2: np.ndarray
    F2_hat: np.ndarray
    Q2: np.ndarray
    Q2_hat: np.ndarray
    G2: np.ndarray
    G2_hat: np.ndarray

    def select(self, index) -> "AugmentedCoefficients":
        return AugmentedCoefficients(
            **{f.name: getattr(self, f.name)[index] for f in fields(self)}
        )


@dataclass(frozen=True, eq=False)
class LeaderDerived:
    P2: np.ndarray
    P2_hat: np.ndarray
    J2: np.ndarray
    J2_hat: np.ndarray
    J2_tilde: np.ndarray
    R: np.ndarray
    N2_tilde: np.ndarray
    N2_tilde_inv: np.ndarray
    S2: np.ndarray
    S2_hat: np.ndarray
    S2_tilde: np.ndarray

    def select(self, index) -> "LeaderDerived":
        return LeaderDerived(**{f.name: getattr(self, f.name)[index] for f in fields(self)})


def _regime_coefs(spec: ProblemSpec, regime: int | None) -> dict[str, np.ndarray]:
    coefs = spec.coefficients()
    if regime is None:
        return coefs
    return {k: v[regime] for k, v in coefs.items()}


def follower_derived(
    spec: ProblemSpec, P1: np.ndarray, P1_hat: np.ndarray, *, regime: int | None = None,
    times=None,
) -> FollowerDerived:
    """Follower quantities for stacked ``P1``/``P1_hat``.

    With ``regime=None`` the last three axes of the inputs are ``(K, n, n)``;
    otherwise they are single ``(n, n)`` matrices for that 0-based regime.
    """
    c = _regime_coefs(spec, regime)
    A, A_hat, B1, B2 = c["A"], c["A_hat"], c["B1"], c["B2"]
    C, C_hat, D1, D2 = c["C"], c["C_hat"], c["D1"], c["D2"]
    B1t, D1t, B2t, D2t = _t(B1), _t(D1), _t(B2), _t(D2)

    N1t = _sym(c["N1"] + D1t @ P1 @ D1)
    N1i = spd_inverse(N1t, "N1_tilde", times)
    S1 = B1t @ P1 + D1t @ P1 @ C
    S1h = B1t @ P1_hat + D1t @ P1 @ C_hat
    NS1, NS1h = N1i @ S1, N1i @ S1h
    S2 = B2t @ P1 + D2t @ P1 @ C
    S2h = B2t @ P1_hat + D2t @ P1 @ C_hat
    D2P1D1 = D2t @ P1 @ D1
    N1iD1t = N1i @ D1t
    return FollowerDerived(
        P1=P1,
        P1_hat=P1_hat,
        N1_tilde=N1t,
        N1_tilde_inv=N1i,
        S1=S1,
        S1_hat=S1h,
        S1_tilde=S1 + S1h,
        A_bb=A - B1 @ NS1,
        A_bb_hat=A_hat - B1 @ NS1h,
        C_bb=C - D1 @ NS1,
        C_bb_hat=C_hat - D1 @ NS1h,
        S2=S2,
        S2_hat=S2h,
        F2_bb=S2 - D2P1D1 @ NS1,
        F2_bb_hat=S2h - D2P1D1 @ NS1h,
        B1_bb=-B1 @ N1iD1t,
        B2_bb=B2 - B1 @ N1iD1t @ P1 @ D2,
        D1_bb=_sym(-D1 @ N1iD1t),
        D2_bb=D2 - D1 @ N1iD1t @ P1 @ D2,
        F1_bb=_sym(-B1 @ N1i @ B1t),
    )


def follower_derived_at(
    spec: ProblemSpec, P1: RegimeTrajectory, P1_hat: RegimeTrajectory, k: int, i: int
) -> FollowerDerived:
    """Follower quantities at grid node ``k`` and 0-based regime ``i``."""
    return follower_derived(
        spec, P1.at(k, i), P1_hat.at(k, i), regime=i, times=P1.grid.node(k)
    )


def _blockdiag(a, b):
    n = a.shape[-1]
    out = np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (2 * n, 2 * n))
    out[..., :n, :n] = a
    out[..., n:, n:] = b
    return out


def _antidiag(a):
    n = a.shape[-1]
    out = np.zeros(a.shape[:-2] + (2 * n, 2 * n))
    out[..., :n, n:] = a
    out[..., n:, :n] = a
    return out


def _col(a):
    n, m = a.shape[-2:]
    out = np.zeros(a.shape[:-2] + (2 * n, m))
    out[..., :n, :] = a
    return out


def _row(b):
    m, n = b.shape[-2:]
    out = np.zeros(b.shape[:-2] + (m, 2 * n))
    out[..., n:] = b
    return out


def build_augmented(
    spec: ProblemSpec, fd: FollowerDerived, *, regime: int | None = None
) -> AugmentedCoefficients:
    """Assemble the 2n block matrices from follower quantities."""
    c = _regime_coefs(spec, regime)
    lead = fd.A_bb.shape[:-2]

    def weight(W):
        n = W.shape[-1]
        out = np.zeros(lead + (2 * n, 2 * n))
        out[..., :n, :n] = W
        return out

    return AugmentedCoefficients(
        A=_blockdiag(fd.A_bb, fd.A_bb),
        A_hat=_blockdiag(fd.A_bb_hat, fd.A_bb_hat),
        C=_blockdiag(fd.C_bb, fd.C_bb),
        C_hat=_blockdiag(fd.C_bb_hat, fd.C_bb_hat),
        B1=_antidiag(fd.B1_bb),
        D1=_antidiag(fd.D1_bb),
        F1=_antidiag(fd.F1_bb),
        B2=_col(fd.B2_bb),
        D2=_col(fd.D2_bb),
        F2=_row(fd.F2_bb),
        F2_hat=_row(fd.F2_bb_hat),
        Q2=weight(c["Q2"]),
        Q2_hat=weight(c["Q2_hat"]),
        G2=weight(c["G2"]),
        G2_hat=weight(c["G2_hat"]),
    )


def resolvent(P2: np.ndarray, D1: np.ndarray, times=None) -> np.ndarray:
    """``R = (I - P2 D1)^{-1} P2``, symmetrized, with a conditioning guard."""
    if not np.any(D1):
        return P2
    M = np.eye(P2.shape[-1]) - P2 @ D1
    norm = np.abs(M).sum(axis=-2).max(axis=-1)
    try:
        Minv = np.linalg.inv(M)
        rcond = 1.0 / (norm * np.abs(Minv).sum(axis=-2).max(axis=-1))
    except np.linalg.LinAlgError:
        Minv = None
        rcond = np.array(
            [0.0 if np.linalg.matrix_rank(m) < m.shape[0] else 1.0
             for m in M.reshape(-1, *M.shape[-2:])]
        ).reshape(M.shape[:-2])
    bad = ~(rcond >= RCOND_TOL)
    if np.any(bad):
        t, regime = _locate(bad, times)
        raise MatrixSingular(t, regime, float(np.asarray(rcond)[bad][0]))
    return _sym(Minv @ P2)


def leader_derived(
    spec: ProblemSpec,
    fd: FollowerDerived,
    P2: np.ndarray,
    P2_hat: np.ndarray,
    *,
    aug: AugmentedCoefficients | None = None,
    regime: int | None = None,
    times=None,
) -> LeaderDerived:
    """Leader quantities for stacked ``P2``/``P2_hat`` (see :func:`follower_derived`)."""
    c = _regime_coefs(spec, regime)
    if aug is None:
        aug = build_augmented(spec, fd, regime=regime)
    B1t, D2t = _t(aug.B1), _t(aug.D2)
    R = resolvent(P2, aug.D1, times)
    J2 = B1t @ P2 + aug.C
    J2h = B1t @ P2_hat + aug.C_hat
    D2tR = D2t @ R
    N2t = _sym(c["N2"] + D2tR @ aug.D2)
    N2i = spd_inverse(N2t, "N2_tilde", times)
    B2t = _t(aug.B2)
    S2 = D2tR @ J2 + B2t @ P2 + aug.F2
    S2h = D2tR @ J2h + B2t @ P2_hat + aug.F2_hat
    return LeaderDerived(
        P2=P2, P2_hat=P2_hat, J2=J2, J2_hat=J2h, J2_tilde=J2 + J2h, R=R,
        N2_tilde=N2t, N2_tilde_inv=N2i, S2=S2, S2_hat=S2h, S2_tilde=S2 + S2h,
    )


def leader_derived_at(
    spec: ProblemSpec,
    fd: FollowerDerived,
    P2: RegimeTrajectory,
    P2_hat: RegimeTrajectory,
    k: int,
    i: int,
) -> LeaderDerived:
    """Leader quantities at node ``k``, 0-based regime ``i``; ``fd`` from :func:`follower_derived_at`."""
    return leader_derived(
        spec, fd, P2.at(k, i), P2_hat.at(k, i), regime=i, times=P2.grid.node(k)
    )


# ---------------------------------------------------------------------------
# right-hand sides


def _rhs_P1(spec, P1, fd):
    c = spec
    CtP = _t(c.C) @ P1
    return -(
        P1 @ c.A + _t(c.A) @ P1 + CtP @ c.C + c.Q1
        - _t(fd.S1) @ fd.N1_tilde_inv @ fd.S1
        + _coupling(c.generator, P1)
    )


def _rhs_P1_tilde(spec, P1t, P1, fd):
    c = spec
    At = c.A + c.A_hat
    Ct = c.C + c.C_hat
    return -(
        P1t @ At + _t(At) @ P1t + _t(Ct) @ P1 @ Ct + c.Q1 + c.Q1_hat
        - _t(fd.S1_tilde) @ fd.N1_tilde_inv @ fd.S1_tilde
        + _coupling(c.generator, P1t)
    )


def _rhs_P1_hat(spec, P1h, P1, fd):
    c = spec
    At = c.A + c.A_hat
    Ni = fd.N1_tilde_inv
    S, Sh = fd.S1, fd.S1_hat
    return -(
        P1h @ At + _t(At) @ P1h + P1 @ c.A_hat + _t(c.A_hat) @ P1
        + _t(c.C) @ P1 @ c.C_hat + _t(c.C_hat) @ P1 @ c.C + _t(c.C_hat) @ P1 @ c.C_hat
        + c.Q1_hat
        - _t(S) @ Ni @ Sh - _t(Sh) @ Ni @ S - _t(Sh) @ Ni @ Sh
        + _coupling(c.generator, P1h)
    )


def _rhs_P2(spec, P2, aug, ld):
    return -(
        P2 @ aug.A + _t(aug.A) @ P2 + P2 @ aug.F1 @ P2 + aug.Q2
        + _t(ld.J2) @ ld.R @ ld.J2
        - _t(ld.S2) @ ld.N2_tilde_inv @ ld.S2
        + _coupling(spec.generator, P2)
    )


def _rhs_P2_tilde(spec, P2t, aug, ld):
    At = aug.A + aug.A_hat
    return -(
        P2t @ At + _t(At) @ P2t + P2t @ aug.F1 @ P2t + aug.Q2 + aug.Q2_hat
        + _t(ld.J2_tilde) @ ld.R @ ld.J2_tilde
        - _t(ld.S2_tilde) @ ld.N2_tilde_inv @ ld.S2_tilde
        + _coupling(spec.generator, P2t)
    )


def _rhs_P2_hat(spec, P2h, aug, ld):
    P2 = ld.P2
    At = aug.A + aug.A_hat
    Ah = aug.A_hat
    F1 = aug.F1
    R, Ni = ld.R, ld.N2_tilde_inv
    J, Jh = ld.J2, ld.J2_hat
    S, Sh = ld.S2, ld.S2_hat
    return -(
        P2h @ At + _t(At) @ P2h + P2 @ Ah + _t(Ah) @ P2
        + P2 @ F1 @ P2h + P2h @ F1 @ P2 + P2h @ F1 @ P2h + aug.Q2_hat
        + _t(J) @ R @ Jh + _t(Jh) @ R @ J + _t(Jh) @ R @ Jh
        - _t(S) @ Ni @ Sh - _t(Sh) @ Ni @ S - _t(Sh) @ Ni @ Sh
        + _coupling(spec.generator, P2h)
    )


def ode_rhs(kind: str, spec: ProblemSpec, inputs, t: float, value: np.ndarray) -> np.ndarray:
    """Time derivative of one stacked Riccati system.

    Parameters
    ----------
    kind : str
        One of ``follower_P1``, ``follower_Ptilde1``, ``leader_P2``,
        ``leader_Ptilde2``, or the difference forms ``follower_P1hat`` and
        ``leader_P2hat``.
    inputs
        The other solutions the system depends on, evaluated at ``t``:
        nothing for ``follower_P1``; ``P1`` for the follower difference
        systems; ``(P1, P1_hat)`` for ``leader_P2``; ``(P1, P1_hat, P2)`` for
        the other leader systems.
    value : (K, d, d) array
        The unknown at ``t``.
    """
    if kind == "follower_P1":
        zero = np.zeros_like(value)
        return _rhs_P1(spec, value, follower_derived(spec, value, zero, times=t))
    if kind == "follower_Ptilde1":
        P1 = np.asarray(inputs)
        fd = follower_derived(spec, P1, value - P1, times=t)
        return _rhs_P1_tilde(spec, value, P1, fd)
    if kind == "follower_P1hat":
        P1 = np.asarray(inputs)
        fd = follower_derived(spec, P1, value, times=t)
        return _rhs_P1_hat(spec, value, P1, fd)
    if kind == "leader_P2":
        P1, P1h = inputs
        fd = follower_derived(spec, P1, P1h, times=t)
        aug = build_augmented(spec, fd)
        zero = np.zeros_like(value)
        ld = leader_derived(spec, fd, value, zero, aug=aug, times=t)
        return _rhs_P2(spec, value, aug, ld)
    if kind in ("leader_Ptilde2", "leader_P2hat"):
        P1, P1h, P2 = inputs
        fd = follower_derived(spec, P1, P1h, times=t)
        aug = build_augmented(spec, fd)
        P2h = value - P2 if kind == "leader_Ptilde2" else value
        ld = leader_derived(spec, fd, P2, P2h, aug=aug, times=t)
        if kind == "leader_Ptilde2":
            return _rhs_P2_tilde(spec, value, aug, ld)
        return _rhs_P2_hat(spec, value, aug, ld)
    raise ValueError(f"unknown Riccati system {kind!r}")


# ---------------------------------------------------------------------------
# integration


def _joint_rhs(spec: ProblemSpec, leader: bool) -> Callable:
    def rhs(t, state):
        P1, P1t = state[0], state[1]
        P1h = P1t - P1
        fd = follower_derived(spec, P1, P1h, times=t)
        out = [_rhs_P1(spec, P1, fd), _rhs_P1_tilde(spec, P1t, P1, fd)]
        if leader:
            P2, P2t = state[2], state[3]
            aug = build_augmented(spec, fd)
            ld = leader_derived(spec, fd, P2, P2t - P2, aug=aug, times=t)
            out.append(_rhs_P2(spec, P2, aug, ld))
            out.append(_rhs_P2_tilde(spec, P2t, aug, ld))
        return out

    return rhs


def _integrate_backward(rhs, terminal: list[np.ndarray], grid: TimeGrid) -> list[np.ndarray]:
    """Classical RK4 from ``T`` down to 0 on the grid; symmetrize every step."""
    N, h = grid.step_count, grid.h
    out = [np.empty((N + 1,) + y.shape) for y in terminal]
    y = [np.array(v, dtype=float) for v in terminal]
    for o, v in zip(out, y):
        o[N] = v
    for k in range(N, 0, -1):
        t = grid.node(k)
        k1 = rhs(t, y)
        k2 = rhs(t - h / 2, [a - h / 2 * b for a, b in zip(y, k1)])
        k3 = rhs(t - h / 2, [a - h / 2 * b for a, b in zip(y, k2)])
        k4 = rhs(t - h, [a - h * b for a, b in zip(y, k3)])
        y = [
            _sym(a - h / 6 * (b1 + 2 * b2 + 2 * b3 + b4))
            for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
        ]
        if not all(np.all(np.isfinite(a)) for a in y):
            raise StepUnstable(f"non-finite Riccati values at t={grid.node(k - 1):.6g}")
        for o, v in zip(out, y):
            o[k - 1] = v
    return out


def _aug_terminal(spec: ProblemSpec, G: np.ndarray) -> np.ndarray:
    return _blockdiag(G, np.zeros(G.shape))


def solve_follower(spec: ProblemSpec, grid: TimeGrid) -> FollowerSolution:
    """Integrate the follower's two Riccati systems backward on ``grid``."""
    G1t = spec.G1 + spec.G1_hat
    P1, P1t = _integrate_backward(_joint_rhs(spec, False), [spec.G1, G1t], grid)
    # Terminal values are assigned, not integrated.
    P1[-1], P1t[-1] = spec.G1, G1t
    return FollowerSolution(
        RegimeTrajectory(grid, P1, "P1"),
        RegimeTrajectory(grid, P1t, "P1_tilde"),
        RegimeTrajectory(grid, P1t - P1, "P1_hat"),
    )


def _solve_joint(spec: ProblemSpec, grid: TimeGrid) -> tuple[FollowerSolution, LeaderSolution]:
    G1t = spec.G1 + spec.G1_hat
    G2 = _aug_terminal(spec, spec.G2)
    G2t = _aug_terminal(spec, spec.G2 + spec.G2_hat)
    P1, P1t, P2, P2t = _integrate_backward(
        _joint_rhs(spec, True), [spec.G1, G1t, G2, G2t], grid
    )
    P1[-1], P1t[-1], P2[-1], P2t[-1] = spec.G1, G1t, G2, G2t
    follower = FollowerSolution(
        RegimeTrajectory(grid, P1, "P1"),
        RegimeTrajectory(grid, P1t, "P1_tilde"),
        RegimeTrajectory(grid, P1t - P1, "P1_hat"),
    )
    leader = LeaderSolution(
        RegimeTrajectory(grid, P2, "P2"),
        RegimeTrajectory(grid, P2t, "P2_tilde"),
        RegimeTrajectory(grid, P2t - P2, "P2_hat"),
    )
    return follower, leader


def solve_leader(
    spec: ProblemSpec, follower: FollowerSolution, grid: TimeGrid | None = None
) -> LeaderSolution:
    """Integrate the leader's two Riccati systems backward.

    RK4 stages need the follower solution between grid nodes, so the follower
    systems are re-integrated jointly; the node values must match ``follower``.
    """
    grid = grid or follower.P1.grid
    if follower.P1.grid != grid:
        raise ValueError("follower solution lives on a different grid")
    fs, leader = _solve_joint(spec, grid)
    if not (
        np.allclose(fs.P1.values, follower.P1.values, rtol=1e-10, atol=1e-12)
        and np.allclose(fs.P1_tilde.values, follower.P1_tilde.values, rtol=1e-10, atol=1e-12)
    ):
        raise ValueError("follower solution does not belong to this spec")
    return leader


def solve_game(spec: ProblemSpec, grid: TimeGrid) -> tuple[FollowerSolution, LeaderSolution]:
    """Both players' Riccati solutions from a single joint backward pass."""
    return _solve_joint(spec, grid)


def derived_on_grid(
    spec: ProblemSpec, follower: FollowerSolution, leader: LeaderSolution
) -> tuple[FollowerDerived, AugmentedCoefficients, LeaderDerived]:
    """All derived quantities at every node, shaped ``(N_t + 1, K, ...)``."""
    times = follower.P1.grid.nodes[:, None]
    fd = follower_derived(spec, follower.P1.values, follower.P1_hat.values, times=times)
    aug = build_augmented(spec, fd)
    ld = leader_derived(
        spec, fd, leader.P2.values, leader.P2_hat.values, aug=aug, times=times
    )
    return fd, aug, ld


def write_trajectory_csv(traj: RegimeTrajectory, path) -> None:
    """CSV with columns ``t, regime, row, col, value`` (1-based indices)."""
    nodes = traj.grid.nodes
    v = traj.values
    lines = ["t,regime,row,col,value"]
    for k, t in enumerate(nodes):
        ts = "%.17g" % t
        for i in range(v.shape[1]):
            for r in range(v.shape[2]):
                for c in range(v.shape[3]):
                    lines.append(f"{ts},{i + 1},{r + 1},{c + 1},{v[k, i, r, c]:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
