"""Scenario runner and command-line harness.

Usage::

    python -m rigidlcp.benchcli run configs/grasp.cfg --steps 100 --out-dir out/
    python -m rigidlcp.benchcli compare configs/grasp.cfg configs/grasp_pyramid.cfg
    python -m rigidlcp.benchcli dump-problem configs/grasp.cfg --step 10

Config files are flat ``key = value`` text; ``#`` starts a comment. Exit
codes: 0 success, 2 config error, 3 solver failure.

Trajectory CSV (format version ``TRAJECTORY_VERSION``) has one row per step
with the columns ``step, time, n_contacts, lcp_size, fn_sum, pivots,
max_order, kinetic_energy`` followed by, for each body ``i``, ``b{i}_px
b{i}_py b{i}_pz b{i}_qw b{i}_qx b{i}_qy b{i}_qz b{i}_vx b{i}_vy b{i}_vz
b{i}_wx b{i}_wy b{i}_wz``. Wall-clock times are written to a separate
``timing.csv`` so that ``trajectory.csv`` and ``report.json`` stay
bit-identical between runs with the same seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import contactmodels as cm
from . import rigidsim as rs
from .lcpkit import dump_problem
from .matrixcore import ContractError
from .scenarios import SCENARIOS

TRAJECTORY_VERSION = 1
MODELS = (cm.NOSLIP, cm.VISCOUS, cm.PYRAMID)
SOLVERS = ("ppm", "lemke", "enumerate")
IMPACT_VARIANTS = ("frictionless", "no-slip")
ENUMERATE_LIMIT = 16

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class ConfigError(ContractError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "grasp"
    model: str = cm.NOSLIP
    solver: str = "ppm"
    dt: float = 0.01
    steps: int = 100
    mu_v: float = 0.0
    mu_c: float = 100.0
    seed: int = 0
    duplication: int | None = None  # None keeps the scenario's own factor
    impact: str = "frictionless"  # impact resolution used before viscous steps

    def validate(self) -> ScenarioConfig:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario: unknown value {self.scenario!r}; expected one of {sorted(SCENARIOS)}")
        if self.model not in MODELS:
            raise ConfigError(f"model: unknown value {self.model!r}; expected one of {list(MODELS)}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver: unknown value {self.solver!r}; expected one of {list(SOLVERS)}")
        if self.model == cm.PYRAMID and self.solver == "ppm":
            raise ConfigError("solver: ppm needs a PSD matrix; the pyramid baseline requires lemke or enumerate")
        if self.impact not in IMPACT_VARIANTS:
            raise ConfigError(f"impact: unknown value {self.impact!r}; expected one of {list(IMPACT_VARIANTS)}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ConfigError(f"dt: must be positive, got {self.dt!r}")
        if self.steps < 0:
            raise ConfigError(f"steps: must be non-negative, got {self.steps!r}")
        if not (self.mu_v >= 0 and np.isfinite(self.mu_v)):
            raise ConfigError(f"mu_v: must be non-negative, got {self.mu_v!r}")
        if not (self.mu_c >= 0 and np.isfinite(self.mu_c)):
            raise ConfigError(f"mu_c: must be non-negative, got {self.mu_c!r}")
        if self.duplication is not None and self.duplication < 1:
            raise ConfigError(f"duplication: must be at least 1, got {self.duplication!r}")
        if self.solver == "enumerate":
            size = lcp_size(self, build_system(self))
            if size > ENUMERATE_LIMIT:
                raise ConfigError(
                    f"solver: enumerate is limited to LCP size {ENUMERATE_LIMIT}, this scenario gives {size}")
        return self

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    @property
    def label(self) -> str:
        return f"{self.model}/{self.solver}"


_FIELD_TYPES = {"dt": float, "steps": int, "mu_v": float, "mu_c": float, "seed": int, "duplication": int}


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    values: dict[str, object] = {}
    names = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"{key}: unknown field ({source}:{lineno})")
        conv = _FIELD_TYPES.get(key, str)
        try:
            values[key] = conv(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {conv.__name__} ({source}:{lineno})") from None
    return ScenarioConfig(**values)


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def format_config(cfg: ScenarioConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if value is not None:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def build_system(cfg: ScenarioConfig) -> rs.MultibodySystem:
    s = SCENARIOS[cfg.scenario](seed=cfg.seed)
    s.mu_v, s.mu_c = cfg.mu_v, cfg.mu_c
    if cfg.duplication is not None:
        s.contact_duplication = cfg.duplication
    return s


def lcp_size(cfg: ScenarioConfig, system: rs.MultibodySystem) -> int:
    n = len(rs.generate_contacts(system))
    return 6 * n if cfg.model == cm.PYRAMID else n


@dataclass(frozen=True)
class StepRecord:
    step: int
    time: float
    n_contacts: int
    lcp_size: int
    fn_sum: float
    pivots: int
    max_order: int
    macs: int
    kinetic_energy: float
    residual: float  # worst equality or complementarity violation of the step
    impact: bool
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class RunReport:
    config: ScenarioConfig
    steps: list[StepRecord] = field(default_factory=list)
    trajectory: list[np.ndarray] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    max_drift: float = 0.0

    @property
    def wall_times(self) -> list[float]:
        return [s.wall_time for s in self.steps]

    def aggregates(self) -> dict:
        piv = [s.pivots for s in self.steps]
        wt = self.wall_times
        return {
            "steps_completed": len(self.steps),
            "failures": len(self.failures),
            "mean_pivots": statistics.fmean(piv) if piv else 0.0,
            "max_pivots": max(piv, default=0),
            "max_order": max((s.max_order for s in self.steps), default=0),
            "mean_lcp_size": statistics.fmean([s.lcp_size for s in self.steps]) if piv else 0.0,
            "max_residual": max((s.residual for s in self.steps), default=0.0),
            "mean_wall_time": statistics.fmean(wt) if wt else 0.0,
            "std_wall_time": statistics.pstdev(wt) if wt else 0.0,
        }

    def check(self) -> None:
        """Recompute the aggregates from the per-step rows and compare."""
        agg = self.aggregates()
        piv = [s.pivots for s in self.steps]
        if agg["max_pivots"] != max(piv, default=0) or agg["steps_completed"] != len(self.steps):
            raise AssertionError("aggregate statistics disagree with per-step rows")
        if piv and abs(agg["mean_pivots"] - sum(piv) / len(piv)) > 1e-12 * (1 + agg["mean_pivots"]):
            raise AssertionError("mean pivots disagree with per-step rows")

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        """Deterministic summary; wall times are deliberately excluded."""
        agg = {k: v for k, v in self.aggregates().items() if "wall" not in k}
        rows = []
        for s in self.steps:
            d = dataclasses.asdict(s)
            del d["wall_time"]
            rows.append(d)
        doc = {
            "trajectory_version": TRAJECTORY_VERSION,
            "config": dataclasses.asdict(self.config),
            "aggregates": agg,
            "max_drift": self.max_drift,
            "failures": [{k: v for k, v in f.items() if k != "dump"} for f in self.failures],
            "steps": rows,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write_trajectory(self, out: TextIO) -> None:
        nb = self.trajectory[0].shape[0] if self.trajectory else 0
        head = ["step", "time", "n_contacts", "lcp_size", "fn_sum", "pivots", "max_order", "kinetic_energy"]
        for i in range(nb):
            head += [f"b{i}_{c}" for c in ("px", "py", "pz", "qw", "qx", "qy", "qz",
                                            "vx", "vy", "vz", "wx", "wy", "wz")]
        out.write(f"# rigidlcp trajectory v{TRAJECTORY_VERSION}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(head)
        for s, state in zip(self.steps, self.trajectory):
            w.writerow([s.step, repr(s.time), s.n_contacts, s.lcp_size, repr(s.fn_sum), s.pivots,
                        s.max_order, repr(s.kinetic_energy)] + [repr(float(x)) for x in state.reshape(-1)])

    def write_timing(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "wall_time"])
        for s in self.steps:
            w.writerow([s.step, repr(s.wall_time)])

    def write(self, out_dir: str | Path) -> None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "trajectory.csv", "w") as fh:
            self.write_trajectory(fh)
        with open(d / "timing.csv", "w") as fh:
            self.write_timing(fh)
        (d / "report.json").write_text(self.to_json())
        for f in self.failures:
            (d / f"failure_step{f['step']}.lcp").write_text(f["dump"])


def _step_residual(res: dict) -> float:
    vals = [abs(v) for k, v in res.items() if k not in ("min_Nv", "min_gamma")]
    vals += [max(0.0, -res.get("min_Nv", 0.0)), max(0.0, -res.get("min_gamma", 0.0))]
    return max(vals)


def advance(cfg: ScenarioConfig, system: rs.MultibodySystem) -> list[rs.StepResult]:
    """One configured step; viscous runs resolve impacts first."""
    if cfg.model == cm.NOSLIP:
        return [rs.step_noslip(system, cfg.dt, cfg.solver)]
    if cfg.model == cm.PYRAMID:
        return [rs.step_pyramid(system, cfg.dt, cfg.solver)]
    out = []
    jb = rs.jacobian_bundle(system, rs.generate_contacts(system))
    approach = jb.N @ system.velocity()
    if approach.size and approach.min() < -1e-9:
        out.append(rs.resolve_impact(system, cfg.impact, cfg.solver))
    out.append(rs.step_viscous(system, cfg.dt, cfg.solver))
    return out


def run_scenario(cfg: ScenarioConfig, stop_on_failure: bool = True) -> RunReport:
    cfg.validate()
    system = build_system(cfg)
    start = system.state()[:, :3].copy()
    report = RunReport(cfg)
    for k in range(cfg.steps):
        if cfg.solver == "enumerate" and lcp_size(cfg, system) > ENUMERATE_LIMIT:
            raise ConfigError(f"solver: enumerate exceeded LCP size {ENUMERATE_LIMIT} at step {k}")
        try:
            results = advance(cfg, system)
        except rs.StepError as exc:
            report.failures.append({"step": k, "message": str(exc), "dump": exc.dump})
            if stop_on_failure:
                break
            continue
        last = results[-1]
        report.steps.append(StepRecord(
            step=k, time=system.time, n_contacts=last.n_contacts, lcp_size=last.lcp_size,
            fn_sum=float(np.sum(last.f_n)), pivots=sum(r.pivots for r in results),
            max_order=max(r.max_order for r in results), macs=sum(r.macs for r in results),
            kinetic_energy=last.kinetic_energy,
            residual=max(_step_residual(r.residuals) for r in results),
            impact=any(r.impact for r in results), wall_time=sum(r.wall_time for r in results),
        ))
        report.trajectory.append(system.state())
    report.max_drift = float(np.abs(system.state()[:, :3] - start).max()) if system.bodies else 0.0
    report.check()
    return report


@dataclass(frozen=True)
class ComparisonTable:
    columns: tuple[str, ...]
    rows: list[tuple]

    def to_text(self) -> str:
        cells = [list(self.columns)] + [[_fmt(c) for c in r] for r in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(c) if isinstance(c, float) else c for c in r])
        return buf.getvalue()


def _fmt(c) -> str:
    if isinstance(c, float):
        return f"{c:.3g}" if abs(c) < 1e-2 and c else f"{c:.3f}"
    return str(c)


def compare_models(cfgs: Sequence[ScenarioConfig], trials: int = 1,
                   reports: Sequence[RunReport] | None = None) -> ComparisonTable:
    """Side-by-side wall time, pivot and variable-count summary.

    Each configuration is run ``trials`` times; wall-time statistics pool all
    steps of all trials.
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise ConfigError("compare: at least one configuration is required")
    base = cfgs[0]
    for c in cfgs[1:]:
        if c.scenario != base.scenario or c.steps != base.steps:
            raise ConfigError(
                f"scenario: compare needs matching scenario and steps, got "
                f"{base.scenario}/{base.steps} and {c.scenario}/{c.steps}")
    columns = ("config", "lcp_vars", "mean_wall_s", "std_wall_s", "mean_pivots", "max_pivots", "failures")
    rows = []
    for i, c in enumerate(cfgs):
        runs = [reports[i]] if reports is not None else [run_scenario(c) for _ in range(max(1, trials))]
        wt = [t for r in runs for t in r.wall_times]
        piv = [s.pivots for r in runs for s in r.steps]
        sizes = [s.lcp_size for r in runs for s in r.steps]
        rows.append((
            c.label,
            max(sizes, default=0),
            statistics.fmean(wt) if wt else 0.0,
            statistics.pstdev(wt) if wt else 0.0,
            statistics.fmean(piv) if piv else 0.0,
            max(piv, default=0),
            sum(len(r.failures) for r in runs),
        ))
    return ComparisonTable(columns, rows)


def contact_problem_text(cfg: ScenarioConfig, step: int) -> str:
    """Run ``step`` steps, then serialize the problem the next step would solve."""
    cfg.validate()
    system = build_system(cfg)
    for _ in range(step):
        advance(cfg, system)
    contacts = rs.generate_contacts(system)
    M, v, f = system.inertia(), system.velocity(), system.forces()
    jb = rs.jacobian_bundle(system, contacts)
    buf = io.StringIO()
    buf.write(f"# scenario: {cfg.scenario}\n# step: {step}\n")
    if cfg.model == cm.PYRAMID:
        lcp, _ = cm.build_pyramid_baseline_lcp(M, v, f, jb, cfg.dt)
        dump_problem(lcp, buf, meta={"provenance": cm.PYRAMID})
    elif cfg.model == cm.NOSLIP:
        cm.dump_contact_problem(cm.build_noslip_mlcp(M, v, f, jb, cfg.dt), buf)
    else:
        cm.dump_contact_problem(cm.build_viscous_mlcp(M, v, f, jb), buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rigidlcp-bench", description="Contact-model benchmark harness.")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--model", choices=MODELS)
        sp.add_argument("--solver", choices=SOLVERS)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--seed", type=int)

    run = sub.add_parser("run", help="run one scenario and write trajectory.csv, report.json, timing.csv")
    run.add_argument("config")
    overrides(run)
    run.add_argument("--out-dir", default="out")

    cmp_ = sub.add_parser("compare", help="run several configs and print a comparison table")
    cmp_.add_argument("configs", nargs="+")
    cmp_.add_argument("--trials", type=int, default=1)
    cmp_.add_argument("--steps", type=int)
    cmp_.add_argument("--csv", help="also write the table as CSV to this path")

    dump = sub.add_parser("dump-problem", help="write the contact problem at a given step")
    dump.add_argument("config")
    overrides(dump)
    dump.add_argument("--step", type=int, required=True)
    dump.add_argument("--out", help="output file (default: stdout)")
    return p


def _overridden(cfg: ScenarioConfig, ns: argparse.Namespace) -> ScenarioConfig:
    keys = ("model", "solver", "steps", "dt", "seed")
    return cfg.replace(**{k: getattr(ns, k, None) for k in keys})


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None) -> int:
    out = stdout or sys.stdout
    ns = _parser().parse_args(argv)
    try:
        if ns.command == "run":
            cfg = _overridden(load_config(ns.config), ns).validate()
            report = run_scenario(cfg)
            report.write(ns.out_dir)
            agg = report.aggregates()
            out.write(f"{cfg.scenario} {cfg.label}: {agg['steps_completed']} steps, "
                      f"{agg['failures']} failures, mean pivots {agg['mean_pivots']:.2f}, "
                      f"max drift {report.max_drift:.3g}\n")
            return EXIT_OK if report.ok else EXIT_SOLVER
        if ns.command == "compare":
            cfgs = [load_config(c).replace(steps=ns.steps).validate() for c in ns.configs]
            table = compare_models(cfgs, trials=ns.trials)
            out.write(table.to_text())
            if ns.csv:
                Path(ns.csv).write_text(table.to_csv())
            return EXIT_SOLVER if any(r[-1] for r in table.rows) else EXIT_OK
        cfg = _overridden(load_config(ns.config), ns).validate()
        if ns.step < 0:
            raise ConfigError(f"step: must be non-negative, got {ns.step}")
        text = contact_problem_text(cfg, ns.step)
        if ns.out:
            Path(ns.out).write_text(text)
        else:
            out.write(text)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except rs.StepError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
