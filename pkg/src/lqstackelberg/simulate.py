"""Monte-Carlo simulation of the closed-loop game with the chain as common noise.

Outer samples are chain paths; for each one the conditional mean ``X_hat`` is
the solution of a linear ODE, and inner samples are Euler-Maruyama Brownian
paths. Perturbed runs are evaluated exactly through the linear deviation
``delta`` of the state, so that ``J(eps) = J* + eps L + eps^2 Q`` per sample.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import sqrt
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .chain import ChainPath, regimes_on_grid, sample_paths
from .errors import ConfigInvalid, EmptyEnsemble, StepUnstable
from .model import ProblemSpec, TimeGrid
from .riccati import FollowerSolution, LeaderSolution, _t, derived_on_grid
from .rng import stream
from .synthesis import GainSchedule

PLAYERS = ("follower", "leader")


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def _qf(M, a, b):
    """Batched ``a^T M b`` over matching leading axes."""
    return np.sum(_mv(M, b) * a, axis=-1)


def _bmv(M, V):
    """Per-chain matrices ``(C, m, d)`` times per-path vectors ``(C, B, d)``."""
    return np.matmul(V, np.swapaxes(M, -1, -2))


def _bqf(M, a, b):
    return np.sum(_bmv(M, b) * a, axis=-1)


def chain_step_matrix(generator: np.ndarray, h: float) -> np.ndarray:
    """Transition matrix ``exp(h Lambda)`` of the chain observed every ``h``."""
    return expm(h * np.asarray(generator, dtype=float))


def _rk4_propagators(M: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step for ``y' = M y + b`` with ``M``, ``b`` frozen.

    Returns ``(P, Q)`` with ``y_next = P y + Q b``.
    """
    I = np.broadcast_to(np.eye(M.shape[-1]), M.shape)
    hM = h * M
    hM2 = hM @ hM
    hM3 = hM2 @ hM
    P = I + hM + hM2 / 2 + hM3 / 6 + hM3 @ hM / 24
    Q = h * (I + hM / 2 + hM2 / 6 + hM3 / 24)
    return P, Q


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Open-loop deviation ``u_player -> u_player* + eps v``.

    ``direction`` holds ``v`` at the simulation nodes, shape ``(N_sim + 1, m)``;
    it is applied piecewise-constant from the left.
    """

    player: str
    direction: np.ndarray
    epsilon: float = 0.05
    label: str = ""

    def __post_init__(self):
        if self.player not in PLAYERS:
            raise ConfigInvalid(f"perturbation player must be one of {PLAYERS}")
        v = np.array(self.direction, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        v.setflags(write=False)
        object.__setattr__(self, "direction", v)


@dataclass(frozen=True)
class SimConfig:
    """Monte-Carlo settings.

    The simulation step is ``T / (dt_divisor * N_t)``. ``bm_substeps`` sums
    that many unit normals per step, which lets a coarse run share its
    Brownian path with a run of ``bm_substeps`` times as many steps.
    """

    chain_paths: int = 200
    brownian_paths: int = 200
    dt_divisor: int = 2
    master_seed: int = 42
    perturbations: tuple[Perturbation, ...] = ()
    bm_substeps: int = 1
    record_points: int = 64
    checkpoints: tuple[float, ...] = (0.25, 0.5, 1.0)
    block_steps: int = 256
    batch_paths: int = 20000
    threads: int = 1

    def __post_init__(self):
        for name in ("chain_paths", "brownian_paths", "dt_divisor", "bm_substeps",
                     "record_points", "block_steps", "batch_paths", "threads"):
            if int(getattr(self, name)) < 1:
                raise ConfigInvalid(f"{name} must be a positive integer")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigInvalid("master_seed must fit in 64 bits")
        object.__setattr__(self, "perturbations", tuple(self.perturbations))

    def sim_grid(self, grid: TimeGrid) -> TimeGrid:
        return TimeGrid(grid.step_count * self.dt_divisor, grid.horizon)


# ---------------------------------------------------------------------------
# coefficient tables


@dataclass(frozen=True, eq=False)
class ClosedLoopTables:
    """Per-(Riccati node, regime) matrices driving the simulation.

    The state ``X = (x, psi)`` evolves as
    ``dX = (Mx X + Mh X_hat) dt + (Sx X + Sh X_hat) dW``. The ``x`` rows are
    the original dynamics under the applied controls; the ``psi`` rows come
    from the augmented system.
    """

    spec: ProblemSpec
    grid: TimeGrid
    sim_grid: TimeGrid
    divisor: int
    Mx: np.ndarray
    Mh: np.ndarray
    Sx: np.ndarray
    Sh: np.ndarray
    K1: np.ndarray
    K1_hat: np.ndarray
    K2: np.ndarray
    K2_hat: np.ndarray
    mean_prop: np.ndarray
    phi_x: np.ndarray
    phi_h: np.ndarray
    theta_x: np.ndarray
    theta_h: np.ndarray
    Phi_x: np.ndarray
    Phi_h: np.ndarray
    N1_tilde_inv: np.ndarray
    D2P1D2: np.ndarray
    resp_x: np.ndarray
    resp_h: np.ndarray
    A_resp: np.ndarray
    F2_resp: np.ndarray
    resp_v: np.ndarray
    resp_g: np.ndarray
    P1: np.ndarray
    P1_hat: np.ndarray
    chain_step: np.ndarray


def build_tables(
    spec: ProblemSpec,
    follower: FollowerSolution,
    leader: LeaderSolution,
    gains: GainSchedule,
    dt_divisor: int,
) -> ClosedLoopTables:
    grid = follower.P1.grid
    sim_grid = TimeGrid(grid.step_count * dt_divisor, grid.horizon)
    n = spec.state_dim
    fd, aug, ld = derived_on_grid(spec, follower, leader)
    K1, K1h, K2, K2h = gains.K1, gains.K1_hat, gains.K2, gains.K2_hat

    def pad(M):
        return np.concatenate([M, np.zeros_like(M)], axis=-1)

    # x rows: original coordinates with the applied controls.
    Mx_up = pad(np.broadcast_to(spec.A, K1.shape[:2] + (n, n))) + spec.B1 @ K1 + spec.B2 @ K2
    Mh_up = pad(np.broadcast_to(spec.A_hat, K1.shape[:2] + (n, n))) + spec.B1 @ K1h + spec.B2 @ K2h
    Sx_up = pad(np.broadcast_to(spec.C, K1.shape[:2] + (n, n))) + spec.D1 @ K1 + spec.D2 @ K2
    Sh_up = pad(np.broadcast_to(spec.C_hat, K1.shape[:2] + (n, n))) + spec.D1 @ K1h + spec.D2 @ K2h

    # psi rows: lower block of the augmented system with
    # Y = P2 X + P2h Xh and Z = R[(J2 + D2 K2) X + (J2h + D2 K2h) Xh].
    Zx = ld.R @ (ld.J2 + aug.D2 @ K2)
    Zh = ld.R @ (ld.J2_hat + aug.D2 @ K2h)
    y_x, y_h = ld.P2[..., :n, :], ld.P2_hat[..., :n, :]
    z_x, z_h = Zx[..., :n, :], Zh[..., :n, :]

    def lower_pad(M):
        return np.concatenate([np.zeros_like(M), M], axis=-1)

    Mx_lo = lower_pad(fd.A_bb) + fd.F1_bb @ y_x + fd.B1_bb @ z_x
    Mh_lo = lower_pad(fd.A_bb_hat) + fd.F1_bb @ y_h + fd.B1_bb @ z_h
    Sx_lo = lower_pad(fd.C_bb) + _t(fd.B1_bb) @ y_x + fd.D1_bb @ z_x
    Sh_lo = lower_pad(fd.C_bb_hat) + _t(fd.B1_bb) @ y_h + fd.D1_bb @ z_h

    Mx = np.concatenate([Mx_up, Mx_lo], axis=-2)
    Mh = np.concatenate([Mh_up, Mh_lo], axis=-2)
    Sx = np.concatenate([Sx_up, Sx_lo], axis=-2)
    Sh = np.concatenate([Sh_up, Sh_lo], axis=-2)
    mean_prop, _ = _rk4_propagators(Mx + Mh, sim_grid.h)

    phi_x, phi_h = ld.P2[..., n:, :], ld.P2_hat[..., n:, :]
    theta_x, theta_h = Zx[..., n:, :], Zh[..., n:, :]
    D1P1D2 = _t(spec.D1) @ fd.P1 @ spec.D2
    Phi_x = _t(spec.B1) @ phi_x + _t(spec.D1) @ theta_x + D1P1D2 @ K2
    Phi_h = _t(spec.B1) @ phi_h + _t(spec.D1) @ theta_h + D1P1D2 @ K2h

    return ClosedLoopTables(
        spec=spec, grid=grid, sim_grid=sim_grid, divisor=dt_divisor,
        Mx=Mx, Mh=Mh, Sx=Sx, Sh=Sh, K1=K1, K1_hat=K1h, K2=K2, K2_hat=K2h,
        mean_prop=mean_prop,
        phi_x=phi_x, phi_h=phi_h, theta_x=theta_x, theta_h=theta_h,
        Phi_x=Phi_x, Phi_h=Phi_h,
        N1_tilde_inv=fd.N1_tilde_inv,
        D2P1D2=_t(spec.D2) @ fd.P1 @ spec.D2,
        resp_x=-fd.N1_tilde_inv @ fd.S1,
        resp_h=-fd.N1_tilde_inv @ fd.S1_hat,
        A_resp=fd.A_bb + fd.A_bb_hat,
        F2_resp=fd.F2_bb + fd.F2_bb_hat,
        resp_v=-fd.N1_tilde_inv @ D1P1D2,
        resp_g=-fd.N1_tilde_inv @ _t(spec.B1),
        P1=fd.P1,
        P1_hat=fd.P1_hat,
        chain_step=chain_step_matrix(spec.generator, sim_grid.h),
    )


def follower_response_adjoint(tables: ClosedLoopTables, v: np.ndarray) -> np.ndarray:
    """Deterministic follower adjoint ``g(t, i)`` driven by a leader deviation ``v``.

    For deterministic ``v`` the follower's auxiliary backward equation has a
    chain-measurable solution ``phi = g(t, alpha(t))`` with zero ``theta``,
    where ``g' = -[(A_bb + A_bb_hat)^T g + (F2_bb + F2_bb_hat)^T v + coupling]``
    and ``g(T) = 0``. Returned on the simulation grid, shape ``(N_sim + 1, K, n)``.
    """
    spec = tables.spec
    sg, k = tables.sim_grid, tables.divisor
    h = sg.h
    K, n = spec.regimes, spec.state_dim
    g = np.zeros((sg.step_count + 1, K, n))
    gen = spec.generator
    rowsum = gen.sum(axis=1)

    def rhs(y, At, Ft, vs):
        return -(_mv(At, y) + Ft @ vs + gen @ y - rowsum[:, None] * y)

    y = np.zeros((K, n))
    for s in range(sg.step_count - 1, -1, -1):
        r = s // k
        At = _t(tables.A_resp[r])
        Ft = _t(tables.F2_resp[r])
        vs = v[s]
        k1 = rhs(y, At, Ft, vs)
        k2 = rhs(y - h / 2 * k1, At, Ft, vs)
        k3 = rhs(y - h / 2 * k2, At, Ft, vs)
        k4 = rhs(y - h * k3, At, Ft, vs)
        y = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        g[s] = y
    return g


@dataclass(frozen=True, eq=False)
class _DeviationTables:
    """Linear deviation dynamics for one perturbation (unit ``eps``)."""

    perturbation: Perturbation
    du1_x: np.ndarray  # (N_t+1, K, m1, n)
    du1_h: np.ndarray
    du1_c: np.ndarray  # (N_sim+1, K, m1)
    du2_c: np.ndarray  # (N_sim+1, m2)
    prop: np.ndarray   # (N_t+1, K, n, n)
    prop_b: np.ndarray


def _deviation_tables(tables: ClosedLoopTables, pert: Perturbation) -> _DeviationTables:
    spec = tables.spec
    sg, k = tables.sim_grid, tables.divisor
    v = pert.direction
    m = spec.m1 if pert.player == "follower" else spec.m2
    if v.shape != (sg.step_count + 1, m):
        raise ConfigInvalid(
            f"{pert.player} direction has shape {v.shape}, expected {(sg.step_count + 1, m)}"
        )
    K, n, m1, m2 = spec.regimes, spec.state_dim, spec.m1, spec.m2
    shape = tables.K1.shape[:2]
    if pert.player == "follower":
        du1_x = np.zeros(shape + (m1, n))
        du1_h = np.zeros(shape + (m1, n))
        du1_c = np.broadcast_to(v[:, None, :], (sg.step_count + 1, K, m1))
        du2_c = np.zeros((sg.step_count + 1, m2))
    else:
        g = follower_response_adjoint(tables, v)
        ridx = np.arange(sg.step_count + 1) // k
        du1_x, du1_h = tables.resp_x, tables.resp_h
        du1_c = _mv(tables.resp_g[ridx], g) + _mv(tables.resp_v[ridx], v[:, None, :])
        du2_c = v
    M = spec.A + spec.A_hat + spec.B1 @ (du1_x + du1_h)
    prop, prop_b = _rk4_propagators(M, sg.h)
    return _DeviationTables(pert, du1_x, du1_h, np.ascontiguousarray(du1_c), du2_c, prop, prop_b)


# ---------------------------------------------------------------------------
# results


def clustered_mean_se(samples: np.ndarray) -> tuple[float, float]:
    """Mean and standard error of ``(chains, bm)`` samples clustered by chain."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise EmptyEnsemble("no samples")
    C = samples.shape[0]
    chain_means = samples.reshape(C, -1).mean(axis=1)
    mean = float(chain_means.mean())
    if C > 1:
        se = float(chain_means.std(ddof=1) / sqrt(C))
    elif samples.size > 1:
        flat = samples.ravel()
        se = float(flat.std(ddof=1) / sqrt(flat.size))
    else:
        se = float("nan")
    return mean, se


@dataclass(frozen=True)
class CostEstimate:
    J1_mean: float
    J1_se: float
    J2_mean: float
    J2_se: float
    n_chain: int
    n_bm: int


@dataclass(frozen=True, eq=False)
class PerturbationSamples:
    """Per-sample linear and quadratic cost coefficients of one perturbation.

    ``M1`` is a discrete martingale increment sum driven by the chain alone;
    it has mean zero exactly and tracks the chain-induced noise in ``L1``.
    """

    perturbation: Perturbation
    L1: np.ndarray
    Q1: np.ndarray
    L2: np.ndarray
    Q2: np.ndarray
    M1: np.ndarray | None = None

    def delta(self, player: str, eps: float, control_variate: bool = False) -> np.ndarray:
        """Per-sample ``J_player(eps) - J_player(0)``.

        With ``control_variate`` the follower's linear term uses ``L1 - M1``,
        which has the same mean and a smaller variance.
        """
        if player == "follower":
            L = self.L1
            if control_variate and self.M1 is not None:
                L = self.L1 - self.M1
            return eps * L + eps * eps * self.Q1
        return eps * self.L2 + eps * eps * self.Q2


@dataclass(frozen=True, eq=False)
class ClosedLoopEnsemble:
    """Simulated paths grouped by chain path.

    Recorded arrays are indexed ``[chain, bm, record, ...]``; the conditional
    mean has no ``bm`` axis. ``X_euler_mean`` is the exact conditional mean of
    the Euler recursion, which differs from ``X_hat`` by discretization error
    only. Cost samples are indexed ``[chain, bm]``.
    """

    config: SimConfig
    sim_grid: TimeGrid
    chain_paths: list[ChainPath]
    record_steps: np.ndarray
    record_times: np.ndarray
    regimes: np.ndarray
    X: np.ndarray
    X_hat: np.ndarray
    X_euler_mean: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    J1: np.ndarray
    J2: np.ndarray
    stoch_integral: np.ndarray
    formula_integral: np.ndarray
    perturbations: list[PerturbationSamples] = field(default_factory=list)

    @property
    def n_chain(self) -> int:
        return self.J1.shape[0]

    @property
    def n_bm(self) -> int:
        return self.J1.shape[1]


# ---------------------------------------------------------------------------
# simulation


def record_steps(sim_grid: TimeGrid, points: int, checkpoints=()) -> np.ndarray:
    """Recorded node indices: about ``points`` evenly spaced plus checkpoints."""
    N = sim_grid.step_count
    even = np.rint(np.linspace(0, N, min(points, N) + 1)).astype(int)
    cps = np.rint(np.asarray(checkpoints, dtype=float) * N).astype(int)
    return np.unique(np.concatenate([even, cps, [0, N]]))


def simulate_conditional_mean(
    tables: ClosedLoopTables, path: ChainPath, X0: np.ndarray
) -> np.ndarray:
    """``X_hat`` on every simulation node for one chain path, shape ``(N_sim + 1, 2n)``."""
    sg, k = tables.sim_grid, tables.divisor
    regs = regimes_on_grid(path, sg.nodes)
    out = np.empty((sg.step_count + 1, X0.shape[0]))
    out[0] = X0
    y = np.array(X0, dtype=float)
    for s in range(sg.step_count):
        y = tables.mean_prop[s // k, regs[s]] @ y
        out[s + 1] = y
    if not np.all(np.isfinite(out)):
        raise StepUnstable("non-finite conditional mean")
    return out


def _trap_weights(sg: TimeGrid) -> np.ndarray:
    w = np.full(sg.step_count + 1, sg.h)
    w[0] = w[-1] = sg.h / 2
    return w


def _simulate_batch(
    tables: ClosedLoopTables,
    devs: list[_DeviationTables],
    chain_ids: np.ndarray,
    regs: np.ndarray,
    config: SimConfig,
    rec: np.ndarray,
) -> dict:
    spec = tables.spec
    sg, kdiv = tables.sim_grid, tables.divisor
    N, h = sg.step_count, sg.h
    n, m1, m2 = spec.state_dim, spec.m1, spec.m2
    C, B = len(chain_ids), config.brownian_paths
    d = 2 * n
    r_sub = config.bm_substeps
    sq = sqrt(h / r_sub)
    w = _trap_weights(sg)
    rec_slot = {int(s): j for j, s in enumerate(rec)}

    gens = [
        [stream(config.master_seed, "bm", int(c), b) for b in range(B)] for c in chain_ids
    ]

    X = np.zeros((C, B, d))
    X[:, :, :n] = spec.x0
    Xh = np.zeros((C, d))
    Xh[:, :n] = spec.x0
    # Exact conditional mean of the Euler scheme itself, for bias bounds.
    Xm = Xh.copy()

    J1 = np.zeros((C, B))
    J2 = np.zeros((C, B))
    I_sto = np.zeros((C, B, n))
    F_int = np.zeros((C, B))
    X_rec = np.empty((C, B, len(rec), d))
    Xh_rec = np.empty((C, len(rec), d))
    Xm_rec = np.empty((C, len(rec), d))
    u1_rec = np.empty((C, B, len(rec), m1))
    u2_rec = np.empty((C, B, len(rec), m2))

    D = [np.zeros((C, B, n)) for _ in devs]
    Dh = [np.zeros((C, n)) for _ in devs]
    # L1, Q1, L2, Q2 and the chain-martingale control variate for L1.
    acc = [np.zeros((5, C, B)) for _ in devs]
    Pi = tables.chain_step

    Q1, Q1h, N1 = spec.Q1, spec.Q1_hat, spec.N1
    Q2, Q2h, N2 = spec.Q2, spec.Q2_hat, spec.N2
    B1, B2, Cm, Ch = spec.B1, spec.B2, spec.C, spec.C_hat
    A, Ah, D1, D2 = spec.A, spec.A_hat, spec.D1, spec.D2
    B2t, D2t = _t(B2), _t(D2)

    z = None
    for s in range(N + 1):
        if s < N and s % config.block_steps == 0:
            L = min(config.block_steps, N - s) * r_sub
            z = np.empty((C, B, L))
            for ci in range(C):
                for b in range(B):
                    z[ci, b] = gens[ci][b].standard_normal(L)
            if r_sub > 1:
                z = z.reshape(C, B, -1, r_sub).sum(axis=-1)
        ridx = s // kdiv
        reg = regs[:, s]
        x, xh = X[..., :n], Xh[:, :n]

        u1 = _bmv(tables.K1[ridx, reg], X) + _mv(tables.K1_hat[ridx, reg], Xh)[:, None]
        u2 = _bmv(tables.K2[ridx, reg], X) + _mv(tables.K2_hat[ridx, reg], Xh)[:, None]

        Q1c, Q1hc, N1c = Q1[reg], Q1h[reg], N1[reg]
        Q2c, Q2hc, N2c = Q2[reg], Q2h[reg], N2[reg]
        xhQ1 = _qf(Q1hc, xh, xh)[:, None]
        xhQ2 = _qf(Q2hc, xh, xh)[:, None]
        J1 += w[s] * (_bqf(Q1c, x, x) + xhQ1 + _bqf(N1c, u1, u1))
        J2 += w[s] * (_bqf(Q2c, x, x) + xhQ2 + _bqf(N2c, u2, u2))

        # Follower cost-formula integrand.
        phi = _bmv(tables.phi_x[ridx, reg], X) + _mv(tables.phi_h[ridx, reg], Xh)[:, None]
        theta = _bmv(tables.theta_x[ridx, reg], X) + _mv(tables.theta_h[ridx, reg], Xh)[:, None]
        Phi = _bmv(tables.Phi_x[ridx, reg], X) + _mv(tables.Phi_h[ridx, reg], Xh)[:, None]
        lin = _bmv(B2t[reg], phi) + _bmv(D2t[reg], theta)
        F_int += w[s] * (
            -_bqf(tables.N1_tilde_inv[ridx, reg], Phi, Phi)
            + _bqf(tables.D2P1D2[ridx, reg], u2, u2)
            + 2 * np.sum(lin * u2, axis=-1)
        )

        caches = []
        for dv, Dp, Dhp, ac in zip(devs, D, Dh, acc):
            vs2 = dv.du2_c[s]
            du1 = (
                _bmv(dv.du1_x[ridx, reg], Dp)
                + _mv(dv.du1_h[ridx, reg], Dhp)[:, None]
                + dv.du1_c[s, reg][:, None]
            )
            du2 = np.broadcast_to(vs2, (C, B, m2))
            ac[0] += w[s] * (
                _bqf(Q1c, x, Dp) + _qf(Q1hc, xh, Dhp)[:, None] + _bqf(N1c, u1, du1)
            )
            ac[1] += w[s] * 0.5 * (
                _bqf(Q1c, Dp, Dp) + _qf(Q1hc, Dhp, Dhp)[:, None] + _bqf(N1c, du1, du1)
            )
            ac[2] += w[s] * (
                _bqf(Q2c, x, Dp) + _qf(Q2hc, xh, Dhp)[:, None] + _bqf(N2c, u2, du2)
            )
            ac[3] += w[s] * 0.5 * (
                _bqf(Q2c, Dp, Dp) + _qf(Q2hc, Dhp, Dhp)[:, None] + _bqf(N2c, du2, du2)
            )
            caches.append((du1, du2))

        if s in rec_slot:
            j = rec_slot[s]
            X_rec[:, :, j] = X
            Xh_rec[:, j] = Xh
            Xm_rec[:, j] = Xm
            u1_rec[:, :, j] = u1
            u2_rec[:, :, j] = u2

        if s == N:
            break

        dW = sq * z[:, :, (s % config.block_steps)]
        drift = _bmv(tables.Mx[ridx, reg], X) + _mv(tables.Mh[ridx, reg], Xh)[:, None]
        diff = _bmv(tables.Sx[ridx, reg], X) + _mv(tables.Sh[ridx, reg], Xh)[:, None]
        I_sto += diff[..., :n] * dW[..., None]

        Dp_prev = list(D)
        for i, dv in enumerate(devs):
            du1, du2 = caches[i]
            Dp, Dhp = D[i], Dh[i]
            ddrift = (
                _bmv(A[reg], Dp) + _mv(Ah[reg], Dhp)[:, None]
                + _bmv(B1[reg], du1) + _bmv(B2[reg], du2)
            )
            ddiff = (
                _bmv(Cm[reg], Dp) + _mv(Ch[reg], Dhp)[:, None]
                + _bmv(D1[reg], du1) + _bmv(D2[reg], du2)
            )
            D[i] = Dp + ddrift * h + ddiff * dW[..., None]
            bvec = _mv(B1[reg], dv.du1_c[s, reg]) + _mv(B2[reg], np.broadcast_to(dv.du2_c[s], (C, m2)))
            Dh[i] = _mv(dv.prop[ridx, reg], Dhp) + _mv(dv.prop_b[ridx, reg], bvec)

        if devs:
            # Follower adjoint p = P1 x + P1h xh + phi evaluated in every regime.
            nxt = regs[:, s + 1]
            p_all = (
                np.einsum("cbj,kij->cbki", x, tables.P1[ridx])
                + np.einsum("cj,kij->cki", xh, tables.P1_hat[ridx])[:, None]
                + np.einsum("cbj,kij->cbki", X, tables.phi_x[ridx])
                + np.einsum("cj,kij->cki", Xh, tables.phi_h[ridx])[:, None]
            )
            trans = Pi[reg]
            cidx = np.arange(C)
            for i in range(len(devs)):
                f = np.einsum("cbki,cbi->cbk", p_all, Dp_prev[i])
                acc[i][4] += f[cidx, :, nxt] - np.einsum("cbk,ck->cb", f, trans)

        X = X + drift * h + diff * dW[..., None]
        Xm = Xm + (_mv(tables.Mx[ridx, reg], Xm) + _mv(tables.Mh[ridx, reg], Xh)) * h
        Xh = _mv(tables.mean_prop[ridx, reg], Xh)
        if not (np.all(np.isfinite(X[:, 0])) and np.all(np.isfinite(Xh))):
            raise StepUnstable(f"non-finite state at t={sg.node(s + 1):.6g}")

    # Terminal costs.
    reg = regs[:, N]
    x, xh = X[..., :n], Xh[:, :n]
    G1c, G1hc = spec.G1[reg], spec.G1_hat[reg]
    G2c, G2hc = spec.G2[reg], spec.G2_hat[reg]
    J1 += _bqf(G1c, x, x) + _qf(G1hc, xh, xh)[:, None]
    J2 += _bqf(G2c, x, x) + _qf(G2hc, xh, xh)[:, None]
    for Dp, Dhp, ac in zip(D, Dh, acc):
        ac[0] += _bqf(G1c, x, Dp) + _qf(G1hc, xh, Dhp)[:, None]
        ac[1] += 0.5 * (_bqf(G1c, Dp, Dp) + _qf(G1hc, Dhp, Dhp)[:, None])
        ac[2] += _bqf(G2c, x, Dp) + _qf(G2hc, xh, Dhp)[:, None]
        ac[3] += 0.5 * (_bqf(G2c, Dp, Dp) + _qf(G2hc, Dhp, Dhp)[:, None])

    return dict(
        J1=0.5 * J1, J2=0.5 * J2, I_sto=I_sto, F_int=F_int,
        X_rec=X_rec, Xh_rec=Xh_rec, Xm_rec=Xm_rec, u1_rec=u1_rec, u2_rec=u2_rec, acc=acc,
        regs_rec=regs[:, rec],
    )


def simulate_closed_loop(
    spec: ProblemSpec,
    gains: GainSchedule,
    follower: FollowerSolution,
    leader: LeaderSolution,
    config: SimConfig,
    *,
    tables: ClosedLoopTables | None = None,
) -> ClosedLoopEnsemble:
    """Simulate the game under the feedback laws in ``gains``.

    Chain path ``c`` uses the stream ``(seed, "chain", c)`` and Brownian path
    ``(c, b)`` the stream ``(seed, "bm", c, b)``, so results do not depend on
    batching or threading.
    """
    if gains.grid != follower.P1.grid:
        raise ConfigInvalid("gains and Riccati solutions use different grids")
    if tables is None:
        tables = build_tables(spec, follower, leader, gains, config.dt_divisor)
    elif tables.divisor != config.dt_divisor:
        raise ConfigInvalid("tables were built for a different dt_divisor")
    sg = tables.sim_grid
    devs = [_deviation_tables(tables, p) for p in config.perturbations]
    paths = sample_paths(
        spec.generator, spec.initial_regime, spec.horizon, config.chain_paths,
        config.master_seed, "chain",
    )
    regs = np.stack([regimes_on_grid(p, sg.nodes) for p in paths])
    rec = record_steps(sg, config.record_points, config.checkpoints)

    per_batch = max(1, config.batch_paths // config.brownian_paths)
    starts = list(range(0, config.chain_paths, per_batch))

    def job(start):
        ids = np.arange(start, min(start + per_batch, config.chain_paths))
        return _simulate_batch(tables, devs, ids, regs[ids], config, rec)

    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(s) for s in starts]

    def cat(key, axis=0):
        return np.concatenate([p[key] for p in parts], axis=axis)

    pert_samples = []
    for i, dv in enumerate(devs):
        acc = np.concatenate([p["acc"][i] for p in parts], axis=1)
        pert_samples.append(PerturbationSamples(dv.perturbation, acc[0], acc[1], acc[2], acc[3], acc[4]))

    return ClosedLoopEnsemble(
        config=config,
        sim_grid=sg,
        chain_paths=paths,
        record_steps=rec,
        record_times=sg.nodes[rec],
        regimes=cat("regs_rec"),
        X=cat("X_rec"),
        X_hat=cat("Xh_rec"),
        X_euler_mean=cat("Xm_rec"),
        u1=cat("u1_rec"),
        u2=cat("u2_rec"),
        J1=cat("J1"),
        J2=cat("J2"),
        stoch_integral=cat("I_sto"),
        formula_integral=cat("F_int"),
        perturbations=pert_samples,
    )


def estimate_costs(spec: ProblemSpec, ensemble: ClosedLoopEnsemble) -> CostEstimate:
    """Both players' costs with standard errors clustered by chain path."""
    if ensemble.J1.size == 0:
        raise EmptyEnsemble("ensemble has no samples")
    m1, s1 = clustered_mean_se(ensemble.J1)
    m2, s2 = clustered_mean_se(ensemble.J2)
    return CostEstimate(m1, s1, m2, s2, ensemble.n_chain, ensemble.n_bm)


def perturbed_costs(
    ensemble: ClosedLoopEnsemble, index: int = 0, eps: float | None = None
) -> CostEstimate:
    """Cost estimate of a perturbed run recorded in ``ensemble``."""
    ps = ensemble.perturbations[index]
    eps = ps.perturbation.epsilon if eps is None else eps
    J1 = ensemble.J1 + ps.delta("follower", eps)
    J2 = ensemble.J2 + ps.delta("leader", eps)
    m1, s1 = clustered_mean_se(J1)
    m2, s2 = clustered_mean_se(J2)
    return CostEstimate(m1, s1, m2, s2, ensemble.n_chain, ensemble.n_bm)


def simulate_perturbed(
    spec: ProblemSpec,
    gains: GainSchedule,
    follower: FollowerSolution,
    leader: LeaderSolution,
    config: SimConfig,
) -> CostEstimate:
    """Costs when ``config.perturbations[0]`` is applied with its ``epsilon``.

    The perturbing player's control becomes ``u* + eps v``. For a follower
    deviation the leader's control process is held fixed; for a leader
    deviation the follower plays its exact best response. Common random
    numbers with the unperturbed run are implied by equal seeds.
    """
    if not config.perturbations:
        raise ConfigInvalid("simulate_perturbed needs a perturbation")
    ens = simulate_closed_loop(spec, gains, follower, leader, config)
    return perturbed_costs(ens, 0)


def direction_values(
    kind: str, sim_grid: TimeGrid, dim: int, master_seed: int = 0, index: int = 0
) -> np.ndarray:
    """Perturbation direction at the simulation nodes, shape ``(N_sim + 1, dim)``.

    ``kind`` is ``constant``, ``sine`` (``sin(2 pi t / T)``), ``random``
    (i.i.d. standard normals from the stream ``(seed, "direction", index)``)
    or ``zero``.
    """
    t = sim_grid.nodes
    if kind == "constant":
        return np.ones((t.size, dim))
    if kind == "sine":
        return np.repeat(np.sin(2 * np.pi * t / sim_grid.horizon)[:, None], dim, axis=1)
    if kind == "random":
        return stream(master_seed, "direction", index).standard_normal((t.size, dim))
    if kind == "zero":
        return np.zeros((t.size, dim))
    raise ConfigInvalid(f"unknown direction kind {kind!r}")


# ---------------------------------------------------------------------------
# output


def write_trajectory_csv(
    ensemble: ClosedLoopEnsemble, path: str | Path, max_chains: int = 5, max_bm: int = 5
) -> None:
    """CSV ``chain_id, bm_id, t, regime, component, value`` for a subset of paths.

    Components are ``X1..X2n``, ``u1_1..``, ``u2_1..``; conditional-mean rows
    use ``bm_id = -1`` and components ``Xhat1..``.
    """
    C = min(max_chains, ensemble.n_chain)
    B = min(max_bm, ensemble.n_bm)
    lines = ["chain_id,bm_id,t,regime,component,value"]
    for c in range(C):
        for j, t in enumerate(ensemble.record_times):
            ts = "%.17g" % t
            reg = int(ensemble.regimes[c, j]) + 1
            for i, v in enumerate(ensemble.X_hat[c, j]):
                lines.append(f"{c},-1,{ts},{reg},Xhat{i + 1},{v:.17g}")
            for b in range(B):
                for i, v in enumerate(ensemble.X[c, b, j]):
                    lines.append(f"{c},{b},{ts},{reg},X{i + 1},{v:.17g}")
                for i, v in enumerate(ensemble.u1[c, b, j]):
                    lines.append(f"{c},{b},{ts},{reg},u1_{i + 1},{v:.17g}")
                for i, v in enumerate(ensemble.u2[c, b, j]):
                    lines.append(f"{c},{b},{ts},{reg},u2_{i + 1},{v:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_cost_csv(est: CostEstimate, path: str | Path) -> None:
    """CSV ``quantity, mean, se, n_chain, n_bm``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["quantity", "mean", "se", "n_chain", "n_bm"])
        wr.writerow(["J1", "%.17g" % est.J1_mean, "%.17g" % est.J1_se, est.n_chain, est.n_bm])
        wr.writerow(["J2", "%.17g" % est.J2_mean, "%.17g" % est.J2_se, est.n_chain, est.n_bm])
