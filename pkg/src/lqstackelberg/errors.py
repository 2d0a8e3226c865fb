"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class GameError(Exception):
    """Base class for every error raised by this package."""


class ConfigInvalid(GameError):
    """A configuration file or simulation setting is malformed."""


class DimensionMismatch(ConfigInvalid):
    """A coefficient matrix has a shape inconsistent with ``n``, ``m1``, ``m2``."""


class GeneratorInvalid(ConfigInvalid):
    """The chain generator has a negative off-diagonal rate or a nonzero row sum."""


class UnknownExample(ConfigInvalid):
    """Requested builtin example does not exist."""


class AssumptionViolated(GameError):
    """A weight matrix breaks the standing sign assumptions.

    Attributes
    ----------
    assumption : str
        ``"A1"`` for the follower's weights, ``"A2"`` for the leader's.
    matrix : str
        Name of the offending matrix, e.g. ``"N1"``.
    regime : int
        1-based regime index.
    """

    def __init__(self, assumption: str, matrix: str, regime: int, detail: str = ""):
        self.assumption = assumption
        self.matrix = matrix
        self.regime = regime
        msg = f"assumption {assumption} violated by {matrix} in regime {regime}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class GainSingular(GameError):
    """``N1_tilde`` or ``N2_tilde`` is not (numerically) positive definite."""


class MatrixSingular(GameError):
    """``I - P2 D1`` is numerically singular.

    Carries the time and 1-based regime at which the guard tripped.
    """

    def __init__(self, t: float, regime: int, rcond: float):
        self.t = t
        self.regime = regime
        self.rcond = rcond
        super().__init__(
            f"I - P2 D1 singular at t={t:.6g}, regime {regime} (rcond={rcond:.3e})"
        )


class StepUnstable(GameError):
    """An integration step produced non-finite values."""


class OutOfRange(GameError):
    """A time query falls outside ``[0, T]``."""


class NoOccupation(GameError):
    """A chain state was never visited, so its empirical rates are undefined."""


class EmptyEnsemble(GameError):
    """Cost estimation was requested on an ensemble without samples."""
