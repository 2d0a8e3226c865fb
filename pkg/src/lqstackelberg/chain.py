"""Exact sampling and queries for the regime-switching Markov chain."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import NoOccupation, OutOfRange
from .rng import stream


@dataclass(frozen=True)
class ChainPath:
    """One realization of the chain on ``[0, horizon]``.

    Regimes are 1-based. ``jump_times[k]`` is the time at which the chain
    enters ``post_jump_regimes[k]``.
    """

    initial_regime: int
    jump_times: tuple[float, ...]
    post_jump_regimes: tuple[int, ...]
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "jump_times", tuple(float(t) for t in self.jump_times))
        object.__setattr__(
            self, "post_jump_regimes", tuple(int(r) for r in self.post_jump_regimes)
        )
        if len(self.jump_times) != len(self.post_jump_regimes):
            raise ValueError("jump_times and post_jump_regimes differ in length")
        prev_t, prev_r = 0.0, self.initial_regime
        for t, r in zip(self.jump_times, self.post_jump_regimes):
            if not prev_t < t <= self.horizon:
                raise ValueError(f"jump time {t} out of order or outside (0, T]")
            if r == prev_r:
                raise ValueError(f"jump at {t} does not change the regime")
            prev_t, prev_r = t, r

    @property
    def jump_count(self) -> int:
        return len(self.jump_times)

    def segments(self) -> list[tuple[float, float, int]]:
        """``(start, end, regime)`` triples covering ``[0, T]``."""
        starts = (0.0,) + self.jump_times
        ends = self.jump_times + (self.horizon,)
        regs = (self.initial_regime,) + self.post_jump_regimes
        return [(a, b, r) for a, b, r in zip(starts, ends, regs)]


def sample_path(
    generator: np.ndarray,
    initial_regime: int,
    horizon: float,
    rng: np.random.Generator,
) -> ChainPath:
    """Draw one path by exact holding-time simulation.

    Parameters
    ----------
    generator : (K, K) array
        Valid rate matrix.
    initial_regime : int
        1-based starting regime.
    horizon : float
        End of the time window.
    rng : numpy.random.Generator
        Source of randomness; consumed sequentially.
    """
    gen = np.asarray(generator, dtype=float)
    K = gen.shape[0]
    t, state = 0.0, initial_regime - 1
    times: list[float] = []
    regimes: list[int] = []
    while True:
        rate = -gen[state, state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        probs = gen[state].copy()
        probs[state] = 0.0
        cdf = np.cumsum(probs / rate)
        u = rng.random()
        nxt = min(int(np.searchsorted(cdf, u, side="right")), K - 1)
        # Guard against round-off landing on a zero-probability state.
        while probs[nxt] <= 0:
            nxt -= 1
        state = nxt
        times.append(t)
        regimes.append(state + 1)
    return ChainPath(initial_regime, tuple(times), tuple(regimes), horizon)


def sample_paths(
    generator: np.ndarray,
    initial_regime: int,
    horizon: float,
    count: int,
    master_seed: int,
    tag: str = "chain",
) -> list[ChainPath]:
    """Sample ``count`` paths, path ``p`` from the stream ``(seed, tag, p)``."""
    return [
        sample_path(generator, initial_regime, horizon, stream(master_seed, tag, p))
        for p in range(count)
    ]


def regime_at(path: ChainPath, t: float) -> int:
    """Regime in force at time ``t`` (right-continuous)."""
    if not 0.0 <= t <= path.horizon:
        raise OutOfRange(f"t={t} outside [0, {path.horizon}]")
    k = bisect.bisect_right(path.jump_times, t)
    return path.initial_regime if k == 0 else path.post_jump_regimes[k - 1]


def regimes_on_grid(path: ChainPath, nodes: np.ndarray) -> np.ndarray:
    """0-based regime at each node, jumps taking effect at the first node >= jump."""
    regs = np.array((path.initial_regime,) + path.post_jump_regimes) - 1
    idx = np.searchsorted(np.asarray(path.jump_times), nodes, side="right")
    return regs[idx]


def occupation_times(path: ChainPath, regimes: int) -> np.ndarray:
    occ = np.zeros(regimes)
    for a, b, r in path.segments():
        occ[r - 1] += b - a
    return occ


def transition_counts(path: ChainPath, regimes: int) -> np.ndarray:
    counts = np.zeros((regimes, regimes))
    prev = path.initial_regime
    for r in path.post_jump_regimes:
        counts[prev - 1, r - 1] += 1
        prev = r
    return counts


def empirical_generator(
    paths: Sequence[ChainPath], regimes: int | None = None, strict: bool = False
) -> np.ndarray:
    """Maximum-likelihood rate estimate from observed paths.

    Rows of never-visited states are NaN, or raise :class:`NoOccupation`
    when ``strict`` is set.
    """
    if not paths:
        raise ValueError("need at least one path")
    if regimes is None:
        regimes = max(max((p.initial_regime,) + p.post_jump_regimes) for p in paths)
    occ = np.zeros(regimes)
    counts = np.zeros((regimes, regimes))
    for p in paths:
        occ += occupation_times(p, regimes)
        counts += transition_counts(p, regimes)
    est = np.full((regimes, regimes), np.nan)
    for i in range(regimes):
        if occ[i] <= 0:
            if strict:
                raise NoOccupation(f"regime {i + 1} never visited")
            continue
        est[i] = counts[i] / occ[i]
        est[i, i] = 0.0
        est[i, i] = -est[i].sum()
    return est


def write_chain_csv(paths: Iterable[ChainPath], path: str | Path) -> None:
    """CSV with columns ``path_id, jump_index, jump_time, new_regime``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "jump_index", "jump_time", "new_regime"])
        for pid, p in enumerate(paths):
            w.writerow([pid, 0, "%.17g" % 0.0, p.initial_regime])
            for k, (t, r) in enumerate(zip(p.jump_times, p.post_jump_regimes), 1):
                w.writerow([pid, k, "%.17g" % t, r])
