"""Game specification, standing-assumption checks and bundled examples.

Per-regime coefficients are stored as stacked arrays whose leading axis is
the (0-based) regime index. Everything user-facing -- config files, CSV
output, error messages -- uses 1-based regimes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import (
    AssumptionViolated,
    ConfigInvalid,
    DimensionMismatch,
    GeneratorInvalid,
    UnknownExample,
)

SYMMETRY_TOL = 1e-12
GENERATOR_TOL = 1e-12
PSD_TOL = 1e-10
PD_TOL = 1e-10

# (config key, rows, cols) with "n", "m1", "m2" as symbolic sizes.
COEFFICIENTS: tuple[tuple[str, str, str], ...] = (
    ("A", "n", "n"),
    ("A_hat", "n", "n"),
    ("B1", "n", "m1"),
    ("B2", "n", "m2"),
    ("C", "n", "n"),
    ("C_hat", "n", "n"),
    ("D1", "n", "m1"),
    ("D2", "n", "m2"),
    ("Q1", "n", "n"),
    ("Q1_hat", "n", "n"),
    ("N1", "m1", "m1"),
    ("G1", "n", "n"),
    ("G1_hat", "n", "n"),
    ("Q2", "n", "n"),
    ("Q2_hat", "n", "n"),
    ("N2", "m2", "m2"),
    ("G2", "n", "n"),
    ("G2_hat", "n", "n"),
)
OPTIONAL_ZERO = ("A_hat", "C_hat", "Q1_hat", "G1_hat", "Q2_hat", "G2_hat")
FOLLOWER_WEIGHTS = ("Q1", "Q1_hat", "G1", "G1_hat", "N1")
LEADER_WEIGHTS = ("Q2", "Q2_hat", "G2", "G2_hat", "N2")


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Coefficients of the regime-switching leader-follower LQ game.

    Matrix fields have shape ``(K, rows, cols)``; ``generator`` is ``(K, K)``.
    ``initial_regime`` is 1-based.
    """

    generator: np.ndarray
    horizon: float
    x0: np.ndarray
    initial_regime: int
    A: np.ndarray
    A_hat: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    C_hat: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Q1: np.ndarray
    Q1_hat: np.ndarray
    N1: np.ndarray
    G1: np.ndarray
    G1_hat: np.ndarray
    Q2: np.ndarray
    Q2_hat: np.ndarray
    N2: np.ndarray
    G2: np.ndarray
    G2_hat: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "horizon":
                object.__setattr__(self, f.name, float(value))
            elif f.name == "initial_regime":
                object.__setattr__(self, f.name, int(value))
            else:
                object.__setattr__(self, f.name, _frozen(value))

    @property
    def regimes(self) -> int:
        return self.generator.shape[0]

    @property
    def state_dim(self) -> int:
        return self.x0.shape[0]

    @property
    def m1(self) -> int:
        return self.B1.shape[-1]

    @property
    def m2(self) -> int:
        return self.B2.shape[-1]

    @property
    def i0(self) -> int:
        """0-based initial regime."""
        return self.initial_regime - 1

    def coefficients(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name, _, _ in COEFFICIENTS}

    def replace(self, **changes) -> "ProblemSpec":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ProblemSpec(**values)

    def __eq__(self, other):
        if not isinstance(other, ProblemSpec):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ValidatedSpec(ProblemSpec):
    """A :class:`ProblemSpec` that has passed :func:`validate_spec`."""

    def replace(self, **changes) -> ProblemSpec:
        # Any change invalidates the tag.
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ProblemSpec(**values)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / N`` on ``[0, T]``."""

    step_count: int
    horizon: float

    def __post_init__(self):
        if self.step_count < 1:
            raise ConfigInvalid("grid needs at least one step")
        if not self.horizon > 0:
            raise ConfigInvalid("horizon must be positive")

    @property
    def h(self) -> float:
        return self.horizon / self.step_count

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.step_count + 1) * self.h
        t[-1] = self.horizon
        return t

    def node(self, k: int) -> float:
        return self.horizon if k == self.step_count else k * self.h


def _check_shapes(spec: ProblemSpec) -> None:
    K = spec.generator.shape[0] if spec.generator.ndim == 2 else -1
    if spec.generator.ndim != 2 or spec.generator.shape != (K, K) or K < 1:
        raise DimensionMismatch(f"generator must be square, got {spec.generator.shape}")
    if spec.x0.ndim != 1 or spec.x0.shape[0] < 1:
        raise DimensionMismatch(f"x0 must be a nonempty vector, got {spec.x0.shape}")
    if not 1 <= spec.initial_regime <= K:
        raise DimensionMismatch(f"initial_regime {spec.initial_regime} not in 1..{K}")
    if not spec.horizon > 0:
        raise ConfigInvalid("horizon must be positive")
    if spec.B1.ndim != 3 or spec.B2.ndim != 3:
        raise DimensionMismatch("B1 and B2 must be per-regime matrices")
    sizes = {"n": spec.x0.shape[0], "m1": spec.B1.shape[-1], "m2": spec.B2.shape[-1]}
    for name, r, c in COEFFICIENTS:
        want = (K, sizes[r], sizes[c])
        got = getattr(spec, name).shape
        if got != want:
            raise DimensionMismatch(f"{name} has shape {got}, expected {want}")


def _check_generator(gen: np.ndarray) -> None:
    if not np.all(np.isfinite(gen)):
        raise GeneratorInvalid("generator has non-finite entries")
    off = gen - np.diag(np.diag(gen))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise GeneratorInvalid(f"negative rate {gen[i, j]} at ({i + 1},{j + 1})")
    sums = gen.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums) > GENERATOR_TOL)
    if bad.size:
        raise GeneratorInvalid(f"row {bad[0] + 1} sums to {sums[bad[0]]}, not 0")


def _check_weights(spec: ProblemSpec, names: tuple[str, ...], tag: str) -> None:
    for name in names:
        stack = getattr(spec, name)
        for i, M in enumerate(stack):
            if not np.all(np.isfinite(M)):
                raise AssumptionViolated(tag, name, i + 1, "non-finite entries")
            asym = np.max(np.abs(M - M.T))
            if asym > SYMMETRY_TOL:
                raise AssumptionViolated(tag, name, i + 1, f"asymmetric by {asym:.3e}")
            lam = np.linalg.eigvalsh(M).min()
            if name.startswith("N"):
                if lam <= PD_TOL:
                    raise AssumptionViolated(
                        tag, name, i + 1, f"not positive definite (min eig {lam:.3e})"
                    )
            elif lam < -PSD_TOL:
                raise AssumptionViolated(
                    tag, name, i + 1, f"not positive semidefinite (min eig {lam:.3e})"
                )


def validate_spec(spec: ProblemSpec) -> ValidatedSpec:
    """Check shapes, the generator and assumptions (A1)/(A2).

    Raises
    ------
    DimensionMismatch, GeneratorInvalid, AssumptionViolated
    """
    _check_shapes(spec)
    for name, _, _ in COEFFICIENTS:
        if not np.all(np.isfinite(getattr(spec, name))):
            raise ConfigInvalid(f"{name} has non-finite entries")
    if not np.all(np.isfinite(spec.x0)):
        raise ConfigInvalid("x0 has non-finite entries")
    _check_generator(spec.generator)
    _check_weights(spec, FOLLOWER_WEIGHTS, "A1")
    _check_weights(spec, LEADER_WEIGHTS, "A2")
    if isinstance(spec, ValidatedSpec):
        return spec
    return ValidatedSpec(**{f.name: getattr(spec, f.name) for f in fields(spec)})


# ---------------------------------------------------------------------------
# construction helpers


def _as_matrix(value: Any, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr * np.ones((rows, cols)) if rows == cols == 1 else arr
    if arr.ndim == 1 and rows == 1 and cols == 1 and arr.size == 1:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def spec_from_regimes(
    *,
    horizon: float,
    generator,
    x0,
    regimes: list[Mapping[str, Any]],
    initial_regime: int = 1,
) -> ProblemSpec:
    """Build a spec from a list of per-regime coefficient mappings.

    Hatted matrices may be omitted and default to zero. Scalars are accepted
    for 1x1 entries.
    """
    if not regimes:
        raise ConfigInvalid("at least one regime is required")
    x0 = np.atleast_1d(np.array(x0, dtype=float))
    if x0.ndim != 1:
        raise DimensionMismatch("x0 must be a vector")
    n = x0.shape[0]
    first = regimes[0]
    try:
        m1 = np.atleast_2d(np.array(first["N1"], dtype=float)).shape[0]
        m2 = np.atleast_2d(np.array(first["N2"], dtype=float)).shape[0]
    except KeyError as exc:
        raise ConfigInvalid(f"regime 1 missing key {exc}") from None
    sizes = {"n": n, "m1": m1, "m2": m2}
    stacks: dict[str, list[np.ndarray]] = {name: [] for name, _, _ in COEFFICIENTS}
    for k, reg in enumerate(regimes):
        unknown = set(reg) - {name for name, _, _ in COEFFICIENTS}
        if unknown:
            raise ConfigInvalid(f"regime {k + 1}: unknown keys {sorted(unknown)}")
        for name, r, c in COEFFICIENTS:
            if name in reg:
                M = _as_matrix(reg[name], sizes[r], sizes[c], name)
            elif name in OPTIONAL_ZERO:
                M = np.zeros((sizes[r], sizes[c]))
            else:
                raise ConfigInvalid(f"regime {k + 1} missing key {name!r}")
            if M.shape != (sizes[r], sizes[c]):
                raise DimensionMismatch(
                    f"regime {k + 1}: {name} has shape {M.shape}, "
                    f"expected {(sizes[r], sizes[c])}"
                )
            stacks[name].append(M)
    gen = np.array(generator, dtype=float)
    if gen.ndim != 2 or gen.shape != (len(regimes), len(regimes)):
        raise DimensionMismatch(
            f"generator shape {gen.shape} does not match {len(regimes)} regimes"
        )
    return ProblemSpec(
        generator=gen,
        horizon=horizon,
        x0=x0,
        initial_regime=initial_regime,
        **{name: np.stack(mats) for name, mats in stacks.items()},
    )


def spec_from_config(cfg: Mapping[str, Any]) -> ProblemSpec:
    """Build a spec from a parsed config document (see README for the schema)."""
    if not isinstance(cfg, Mapping):
        raise ConfigInvalid("config root must be a mapping")
    required = ("horizon", "x0", "generator", "regimes")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ConfigInvalid(f"config missing keys {missing}")
    spec = spec_from_regimes(
        horizon=float(cfg["horizon"]),
        generator=cfg["generator"],
        x0=cfg["x0"],
        regimes=list(cfg["regimes"]),
        initial_regime=int(cfg.get("initial_regime", 1)),
    )
    declared = {
        "state_dim": spec.state_dim,
        "control_dim_follower": spec.m1,
        "control_dim_leader": spec.m2,
    }
    for key, actual in declared.items():
        if key in cfg and int(cfg[key]) != actual:
            raise DimensionMismatch(f"{key}={cfg[key]} but matrices imply {actual}")
    return spec


def spec_to_config(spec: ProblemSpec) -> dict[str, Any]:
    """Inverse of :func:`spec_from_config`; round-trips exactly."""
    return {
        "horizon": spec.horizon,
        "state_dim": spec.state_dim,
        "control_dim_follower": spec.m1,
        "control_dim_leader": spec.m2,
        "x0": spec.x0.tolist(),
        "initial_regime": spec.initial_regime,
        "generator": spec.generator.tolist(),
        "regimes": [
            {name: getattr(spec, name)[i].tolist() for name, _, _ in COEFFICIENTS}
            for i in range(spec.regimes)
        ],
    }


def load_config(path: str | Path) -> ProblemSpec:
    """Read a JSON or YAML config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(text)
        else:
            # YAML is a superset of JSON, so this also covers unknown suffixes.
            doc = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot parse config {path}: {exc}") from None
    return spec_from_config(doc)


# ---------------------------------------------------------------------------
# builtin examples

SWAP_GENERATOR = [[-1.0, 1.0], [1.0, -1.0]]


def _paper_example(x0: float = 1.0, initial_regime: int = 1) -> ProblemSpec:
    regimes = []
    for b1 in (2.0, 1.0):
        regimes.append(
            dict(
                A=0.0, B1=b1, B2=1.0, C=0.5, D1=0.0, D2=0.0,
                Q1=0.0, N1=1.0, G1=1.0, G1_hat=0.5,
                Q2=0.0, N2=1.0, G2=1.0, G2_hat=0.5,
            )
        )
    return spec_from_regimes(
        horizon=1.0, generator=SWAP_GENERATOR, x0=[x0], regimes=regimes,
        initial_regime=initial_regime,
    )


def _pension_reduced(
    r=(0.03, 0.01),
    b=(0.08, 0.04),
    sigma=(0.2, 0.3),
    pi: float = 0.5,
    generator=SWAP_GENERATOR,
    x0: float = 1.0,
    horizon: float = 1.0,
    initial_regime: int = 1,
) -> ProblemSpec:
    # Fund dynamics with benefit outgo and tracking targets removed; both
    # players pay for contributions and for the terminal conditional mean.
    regimes = []
    for ri, bi, si in zip(r, b, sigma):
        regimes.append(
            dict(
                A=ri + (bi - ri) * pi, B1=1.0, B2=1.0, C=si * pi, D1=0.0, D2=0.0,
                Q1=0.0, N1=1.0, G1=0.0, G1_hat=1.0,
                Q2=0.0, N2=1.0, G2=0.0, G2_hat=1.0,
            )
        )
    return spec_from_regimes(
        horizon=horizon, generator=generator, x0=[x0], regimes=regimes,
        initial_regime=initial_regime,
    )


def _single_regime_classic(x0: float = 1.0) -> ProblemSpec:
    reg = dict(
        A=0.5, B1=1.0, B2=1.0, C=0.3, D1=0.2, D2=0.1,
        Q1=1.0, N1=1.0, G1=1.0, Q2=1.0, N2=1.0, G2=0.5,
    )
    return spec_from_regimes(horizon=1.0, generator=[[0.0]], x0=[x0], regimes=[reg])


def _all_zero_costs(x0: float = 1.0, initial_regime: int = 1) -> ProblemSpec:
    regimes = []
    for b1 in (2.0, 1.0):
        regimes.append(
            dict(
                A=0.0, B1=b1, B2=1.0, C=0.5, D1=0.0, D2=0.0,
                Q1=0.0, N1=1.0, G1=0.0, Q2=0.0, N2=1.0, G2=0.0,
            )
        )
    return spec_from_regimes(
        horizon=1.0, generator=SWAP_GENERATOR, x0=[x0], regimes=regimes,
        initial_regime=initial_regime,
    )


EXAMPLES = {
    "paper_example": _paper_example,
    "pension_reduced": _pension_reduced,
    "single_regime_classic": _single_regime_classic,
    "all_zero_costs": _all_zero_costs,
}


def builtin_example(name: str, **params) -> ProblemSpec:
    """Return one of the bundled problem instances.

    ``params`` override the example's defaults (e.g. ``x0``, ``initial_regime``
    or the market parameters of ``pension_reduced``).
    """
    try:
        factory = EXAMPLES[name]
    except KeyError:
        raise UnknownExample(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}")
    return factory(**params)
