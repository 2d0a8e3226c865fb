"""Command-line pipeline: validate, solve, synthesize, simulate, verify.

Exit codes: 0 success, 2 invalid configuration, 3 assumption violated,
4 singular weight or resolvent, 5 a verification check failed,
6 numerical blow-up, 7 output could not be written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Sequence

from .chain import write_chain_csv
from .errors import (
    AssumptionViolated,
    ConfigInvalid,
    GainSingular,
    MatrixSingular,
    StepUnstable,
)
from .model import (
    EXAMPLES,
    ProblemSpec,
    TimeGrid,
    builtin_example,
    load_config,
    spec_to_config,
    validate_spec,
)
from .riccati import (
    FollowerSolution,
    LeaderSolution,
    RegimeTrajectory,
    solve_game,
    write_trajectory_csv,
)
from .simulate import SimConfig, estimate_costs, simulate_closed_loop, write_cost_csv
from .simulate import write_trajectory_csv as write_paths_csv
from .synthesis import leader_value, synthesize, write_gains_csv
from .verify import CHECK_NAMES, ReportEntry, VerificationReport, run_checks

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_SINGULAR = 4
EXIT_CHECK = 5
EXIT_UNSTABLE = 6
EXIT_IO = 7


@dataclass
class RunManifest:
    config_source: str
    config_hash: str
    master_seed: int
    grid_steps: int
    sim_steps: int
    tool_version: str
    started: str = ""
    finished: str = ""
    files: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lqstackelberg",
        description="Solve and verify a regime-switching LQ leader-follower game.",
    )
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON or YAML problem file")
    src.add_argument("--example", choices=sorted(EXAMPLES), help="built-in problem")
    p.add_argument("--out-dir", default="./out")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--grid", type=int, default=2048, help="Riccati steps N_t")
    p.add_argument("--dt-divisor", type=int, default=2,
                   help="simulation steps per Riccati step")
    p.add_argument("--chains", type=int, default=200, help="chain paths")
    p.add_argument("--bm", type=int, default=200, help="Brownian paths per chain path")
    p.add_argument("--verify", action="store_true", help="run the check suite")
    p.add_argument("--no-sim", action="store_true", help="Riccati and gains only")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    return p


def _tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def config_hash(spec: ProblemSpec, args: argparse.Namespace) -> str:
    """SHA-256 over the problem data and every flag that changes numbers."""
    doc = {
        "problem": spec_to_config(spec),
        "seed": args.seed,
        "grid": args.grid,
        "dt_divisor": args.dt_divisor,
        "chains": args.chains,
        "bm": args.bm,
        "verify": args.verify,
        "no_sim": args.no_sim,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _figure_csv(traj: RegimeTrajectory, n: int, path: Path) -> None:
    """``t, regime, value`` of the upper-left ``n x n`` block.

    With a vector state the block has several entries, so ``row, col`` are
    added before ``value``.
    """
    v = traj.values[:, :, :n, :n]
    scalar = n == 1
    lines = ["t,regime,value" if scalar else "t,regime,row,col,value"]
    for k, t in enumerate(traj.grid.nodes):
        ts = "%.17g" % t
        for i in range(v.shape[1]):
            if scalar:
                lines.append(f"{ts},{i + 1},{v[k, i, 0, 0]:.17g}")
                continue
            for r in range(n):
                for c in range(n):
                    lines.append(f"{ts},{i + 1},{r + 1},{c + 1},{v[k, i, r, c]:.17g}")
    path.write_text("\n".join(lines) + "\n")


def emit_figure_data(
    spec: ProblemSpec, follower: FollowerSolution, leader: LeaderSolution, out_dir: Path
) -> list[Path]:
    """Plotted quantities: ``P1``, ``P1_tilde`` and the leading blocks of ``P2``, ``P2_tilde``."""
    n = spec.state_dim
    out = []
    for name, traj in (
        ("figure_P1.csv", follower.P1),
        ("figure_P1_tilde.csv", follower.P1_tilde),
        ("figure_P2_11.csv", leader.P2),
        ("figure_P2_tilde_11.csv", leader.P2_tilde),
    ):
        path = out_dir / name
        _figure_csv(traj, n, path)
        out.append(path)
    return out


def _load_spec(args) -> tuple[ProblemSpec, str]:
    if args.config:
        return load_config(args.config), str(args.config)
    name = args.example or "paper_example"
    return builtin_example(name), f"example:{name}"


def _check_args(args) -> None:
    for flag in ("grid", "dt_divisor", "chains", "bm", "threads"):
        if getattr(args, flag) < 1:
            raise ConfigInvalid(f"--{flag.replace('_', '-')} must be positive")
    if not 0 <= args.seed < 2**64:
        raise ConfigInvalid("--seed must fit in 64 bits")


def _pipeline(args, log) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    _check_args(args)
    spec, source = _load_spec(args)
    spec = validate_spec(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = TimeGrid(args.grid, spec.horizon)
    files: list[Path] = []

    fs, ls = solve_game(spec, grid)
    for name, traj in (*fs._asdict().items(), *ls._asdict().items()):
        path = out / f"riccati_{name}.csv"
        write_trajectory_csv(traj, path)
        files.append(path)
    files += emit_figure_data(spec, fs, ls, out)
    gains = synthesize(spec, fs, ls)
    write_gains_csv(gains, out / "gains.csv")
    files.append(out / "gains.csv")
    value = leader_value(spec, ls)
    log(f"leader value 1/2 <P2t11(0,i0) x0, x0> = {value:.12g}")

    config = SimConfig(
        chain_paths=args.chains, brownian_paths=args.bm, dt_divisor=args.dt_divisor,
        master_seed=args.seed, threads=args.threads,
    )
    status = EXIT_OK
    if not args.no_sim:
        if args.verify:
            report, ens = run_checks(spec, (fs, ls), gains, config)
        else:
            report, ens = None, simulate_closed_loop(spec, gains, fs, ls, config)
        est = estimate_costs(spec, ens)
        log(f"J1 = {est.J1_mean:.8g} +- {est.J1_se:.3g}, J2 = {est.J2_mean:.8g} +- {est.J2_se:.3g}")
        write_chain_csv(ens.chain_paths, out / "chains.csv")
        write_paths_csv(ens, out / "trajectories.csv")
        write_cost_csv(est, out / "costs.csv")
        files += [out / "chains.csv", out / "trajectories.csv", out / "costs.csv"]
    elif args.verify:
        report = VerificationReport()
        for check in CHECK_NAMES:
            report.add(ReportEntry(check, "skipped", float("nan"), float("nan"),
                                   notes="simulation disabled"))
    else:
        report = None

    if report is not None:
        report.write_text(out / "verification.txt")
        report.write_csv(out / "verification.csv")
        files += [out / "verification.txt", out / "verification.csv"]
        log(report.to_text().rstrip())
        if not report.passed:
            status = EXIT_CHECK

    manifest = RunManifest(
        config_source=source,
        config_hash=config_hash(spec, args),
        master_seed=args.seed,
        grid_steps=args.grid,
        sim_steps=args.grid * args.dt_divisor,
        tool_version=_tool_version(),
        started=started,
        finished=time.strftime("%Y-%m-%dT%H:%M:%S"),
        files=sorted(p.name for p in files),
    )
    manifest.write(out / "manifest.json")
    return status


def run(argv: Sequence[str] | None = None, log=None) -> int:
    """Execute the pipeline and return the exit code."""
    args = build_parser().parse_args(argv)
    if log is None:
        def log(msg):
            print(msg, file=sys.stderr)
    try:
        return _pipeline(args, log)
    except ConfigInvalid as exc:
        log(f"configuration error: {exc}")
        return EXIT_CONFIG
    except AssumptionViolated as exc:
        log(f"assumption violated: {exc}")
        return EXIT_ASSUMPTION
    except (GainSingular, MatrixSingular) as exc:
        log(f"singular matrix: {exc}")
        return EXIT_SINGULAR
    except StepUnstable as exc:
        log(f"numerical blow-up: {exc}")
        return EXIT_UNSTABLE
    except OSError as exc:
        log(f"output error: {exc}")
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
