"""Feedback gains, game value and adjoint reconstruction at the equilibrium.

Controls are linear in the augmented state ``X = (x, psi)`` and its
conditional mean: ``u2 = K2 X + K2_hat X_hat`` and ``u1 = K1 X + K1_hat X_hat``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec, TimeGrid
from .riccati import (
    FollowerDerived,
    FollowerSolution,
    LeaderDerived,
    LeaderSolution,
    _regime_coefs,
    _t,
    build_augmented,
    derived_on_grid,
)


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (M @ v[..., None])[..., 0]


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Gains at every grid node; arrays have shape ``(N_t + 1, K, m, 2n)``."""

    grid: TimeGrid
    K1: np.ndarray
    K1_hat: np.ndarray
    K2: np.ndarray
    K2_hat: np.ndarray

    def __post_init__(self):
        for name in ("K1", "K1_hat", "K2", "K2_hat"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def at(self, k: int, i: int) -> tuple[np.ndarray, ...]:
        return self.K1[k, i], self.K1_hat[k, i], self.K2[k, i], self.K2_hat[k, i]

    def scaled(self, follower: float = 1.0, leader: float = 1.0) -> "GainSchedule":
        """Copy with each player's gains multiplied by a factor."""
        return GainSchedule(
            self.grid,
            follower * self.K1, follower * self.K1_hat,
            leader * self.K2, leader * self.K2_hat,
        )


@dataclass(frozen=True, eq=False)
class AdjointReconstruction:
    """Adjoint values ``Y = (y, phi)``, ``Z = (z, theta)`` and the follower's ``Phi``."""

    Y: np.ndarray
    Z: np.ndarray
    Phi: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.Y[..., : self.Y.shape[-1] // 2]

    @property
    def phi(self) -> np.ndarray:
        return self.Y[..., self.Y.shape[-1] // 2 :]

    @property
    def z(self) -> np.ndarray:
        return self.Z[..., : self.Z.shape[-1] // 2]

    @property
    def theta(self) -> np.ndarray:
        return self.Z[..., self.Z.shape[-1] // 2 :]


def leader_gains(ld: LeaderDerived) -> tuple[np.ndarray, np.ndarray]:
    """``K2 = -N2t^{-1} S2`` and ``K2_hat = -N2t^{-1} S2_hat``."""
    return -ld.N2_tilde_inv @ ld.S2, -ld.N2_tilde_inv @ ld.S2_hat


def _upper_zero(M: np.ndarray) -> np.ndarray:
    """``(M 0)``: pad an ``m x n`` block with zeros on the right."""
    return np.concatenate([M, np.zeros_like(M)], axis=-1)


def _lower(M: np.ndarray) -> np.ndarray:
    """Rows ``n:`` of a ``2n x k`` matrix, i.e. ``(0 I) M``."""
    return M[..., M.shape[-2] // 2 :, :]


def follower_gains(
    spec: ProblemSpec,
    fd: FollowerDerived,
    ld: LeaderDerived,
    K2: np.ndarray,
    K2_hat: np.ndarray,
    *,
    regime: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Non-anticipating follower gains.

    Uses ``-N2t^{-1} S2 = K2`` so that the follower's law responds to the
    leader gains actually passed in.
    """
    c = _regime_coefs(spec, regime)
    B1t, D1t = _t(c["B1"]), _t(c["D1"])
    aug = build_augmented(spec, fd, regime=regime)
    R = ld.R
    # (0 D1^T) R D2_bold + D1^T P1 D2
    coupling = D1t @ _lower(R @ aug.D2) + D1t @ fd.P1 @ c["D2"]

    def assemble(S1, P2, J2, K):
        inner = _upper_zero(S1) + B1t @ _lower(P2) + D1t @ _lower(R @ J2) + coupling @ K
        return -fd.N1_tilde_inv @ inner

    return (
        assemble(fd.S1, ld.P2, ld.J2, K2),
        assemble(fd.S1_hat, ld.P2_hat, ld.J2_hat, K2_hat),
    )


def synthesize(
    spec: ProblemSpec, follower: FollowerSolution, leader: LeaderSolution
) -> GainSchedule:
    """Gains for both players at every node of the Riccati grid."""
    fd, _, ld = derived_on_grid(spec, follower, leader)
    K2, K2h = leader_gains(ld)
    K1, K1h = follower_gains(spec, fd, ld, K2, K2h)
    return GainSchedule(follower.P1.grid, K1, K1h, K2, K2h)


def gains_from_derived(
    spec: ProblemSpec, grid: TimeGrid, fd: FollowerDerived, ld: LeaderDerived
) -> GainSchedule:
    """Gains from (possibly modified) derived quantities on the whole grid."""
    K2, K2h = leader_gains(ld)
    K1, K1h = follower_gains(spec, fd, ld, K2, K2h)
    return GainSchedule(grid, K1, K1h, K2, K2h)


def game_value_leader(P2_tilde_0: np.ndarray, x0: np.ndarray) -> float:
    """Leader's equilibrium cost ``1/2 <P2t^(11)(0, i0) x0, x0>``.

    ``P2_tilde_0`` is the 2n x 2n matrix at time 0 in the initial regime.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    return 0.5 * float(x0 @ P2_tilde_0[:n, :n] @ x0)


def leader_value(spec: ProblemSpec, leader: LeaderSolution) -> float:
    return game_value_leader(leader.P2_tilde.at(0, spec.i0), spec.x0)


def initial_phi(spec: ProblemSpec, leader: LeaderSolution) -> np.ndarray:
    """Lower block of ``Y(0) = P2t(0, i0) X0`` with ``X0 = (x0, 0)``."""
    n = spec.state_dim
    return leader.P2_tilde.at(0, spec.i0)[n:, :n] @ spec.x0


def reconstruct_adjoint(
    spec: ProblemSpec,
    fd: FollowerDerived,
    ld: LeaderDerived,
    K2: np.ndarray,
    K2_hat: np.ndarray,
    X: np.ndarray,
    X_hat: np.ndarray,
    *,
    regime: int | None = None,
) -> AdjointReconstruction:
    """Evaluate ``Y``, ``Z`` and ``Phi`` from the state and its conditional mean.

    Matrices may carry leading axes that broadcast against those of ``X``.
    """
    c = _regime_coefs(spec, regime)
    aug = build_augmented(spec, fd, regime=regime)
    u2 = _mv(K2, X) + _mv(K2_hat, X_hat)
    Y = _mv(ld.P2, X) + _mv(ld.P2_hat, X_hat)
    Z = _mv(ld.R, _mv(ld.J2, X) + _mv(ld.J2_hat, X_hat) + _mv(aug.D2, u2))
    n = X.shape[-1] // 2
    phi, theta = Y[..., n:], Z[..., n:]
    Phi = (
        _mv(_t(c["B1"]), phi)
        + _mv(_t(c["D1"]), theta)
        + _mv(_t(c["D1"]) @ fd.P1 @ c["D2"], u2)
    )
    return AdjointReconstruction(Y, Z, Phi)


def leader_condition_residual(
    spec: ProblemSpec,
    fd: FollowerDerived,
    ld: LeaderDerived,
    u2: np.ndarray,
    X: np.ndarray,
    X_hat: np.ndarray,
    *,
    regime: int | None = None,
) -> np.ndarray:
    """``N2 u2 + B2^T Y + D2^T Z + F2 X + F2_hat X_hat`` for an applied ``u2``."""
    c = _regime_coefs(spec, regime)
    aug = build_augmented(spec, fd, regime=regime)
    Y = _mv(ld.P2, X) + _mv(ld.P2_hat, X_hat)
    Z = _mv(ld.R, _mv(ld.J2, X) + _mv(ld.J2_hat, X_hat) + _mv(aug.D2, u2))
    return (
        _mv(c["N2"], u2)
        + _mv(_t(aug.B2), Y)
        + _mv(_t(aug.D2), Z)
        + _mv(aug.F2, X)
        + _mv(aug.F2_hat, X_hat)
    )


def follower_condition_residual(
    spec: ProblemSpec,
    fd: FollowerDerived,
    ld: LeaderDerived,
    u1: np.ndarray,
    u2: np.ndarray,
    X: np.ndarray,
    X_hat: np.ndarray,
    K2: np.ndarray,
    K2_hat: np.ndarray,
    *,
    regime: int | None = None,
) -> np.ndarray:
    """``N1 u1 + B1^T p + D1^T q`` with ``p``, ``q`` from the follower's ansatz."""
    c = _regime_coefs(spec, regime)
    adj = reconstruct_adjoint(spec, fd, ld, K2, K2_hat, X, X_hat, regime=regime)
    n = X.shape[-1] // 2
    x, xh = X[..., :n], X_hat[..., :n]
    p = _mv(fd.P1, x) + _mv(fd.P1_hat, xh) + adj.phi
    q = _mv(
        fd.P1,
        _mv(c["C"], x) + _mv(c["C_hat"], xh) + _mv(c["D1"], u1) + _mv(c["D2"], u2),
    ) + adj.theta
    return _mv(c["N1"], u1) + _mv(_t(c["B1"]), p) + _mv(_t(c["D1"]), q)


def corrupt_leader_weight(ld: LeaderDerived, factor: float) -> LeaderDerived:
    """Copy of ``ld`` with ``N2_tilde`` scaled; used as a negative control."""
    return dataclasses.replace(
        ld, N2_tilde=factor * ld.N2_tilde, N2_tilde_inv=ld.N2_tilde_inv / factor
    )


def write_gains_csv(gains: GainSchedule, path) -> None:
    """CSV with columns ``t, regime, player, row, col, value, hatted``."""
    lines = ["t,regime,player,row,col,value,hatted"]
    nodes = gains.grid.nodes
    blocks = (
        ("follower", gains.K1, 0), ("follower", gains.K1_hat, 1),
        ("leader", gains.K2, 0), ("leader", gains.K2_hat, 1),
    )
    K = gains.K1.shape[1]
    for k, t in enumerate(nodes):
        ts = "%.17g" % t
        for i in range(K):
            for player, arr, hatted in blocks:
                M = arr[k, i]
                for r in range(M.shape[0]):
                    for col in range(M.shape[1]):
                        lines.append(
                            f"{ts},{i + 1},{player},{r + 1},{col + 1},{M[r, col]:.17g},{hatted}"
                        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
