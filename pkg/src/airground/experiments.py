"""Parameter sweeps over task count and hotspot share, CSV export and result files."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .engine import RunResult, SimulationAbort, mean_stderr, run_batch
from .model import (
    DEFAULT_SCENARIO_PATH,
    Environment,
    HotspotSpec,
    Position,
    ScenarioConfig,
    ScenarioError,
)

CSV_HEADER = ("environment", "sweep_variable", "sweep_value", "mean_success_rate", "stderr", "n_seeds")


class SweepVariable(str, enum.Enum):
    TASK_COUNT = "TaskCount"
    HOTSPOT_PROPORTION = "HotspotProportion"
    # exploration only: fraction of the way from the base hotspot center to ``shift_target``
    HOTSPOT_SHIFT = "HotspotShift"


class SweepAbort(RuntimeError):
    """A single sweep point failed; carries the point coordinates."""

    def __init__(self, environment: str, value: float, seed: int, message: str):
        super().__init__(environment, value, seed, message)
        self.environment, self.value, self.seed, self.message = environment, value, seed, message

    def __str__(self) -> str:
        return f"run aborted at environment={self.environment} value={self.value} seed={self.seed}: {self.message}"


@dataclass(frozen=True)
class SweepSpec:
    variable: SweepVariable
    values: tuple[float, ...]
    environments: tuple[Environment, ...]
    seeds: int
    base: ScenarioConfig
    first_seed: int = 0
    shift_target: Optional[Position] = None

    def __post_init__(self):
        object.__setattr__(self, "variable", SweepVariable(self.variable))
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "environments", tuple(Environment(e) for e in self.environments))
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ScenarioError("sweep values must be strictly increasing")
        if self.seeds < 1:
            raise ScenarioError("seeds per point must be >= 1")
        if len(set(self.environments)) != len(self.environments):
            raise ScenarioError("environments must be distinct")
        if self.variable is SweepVariable.TASK_COUNT:
            if any(v != int(v) or v < 1 for v in self.values):
                raise ScenarioError("task counts must be positive integers")
        else:
            if any(not 0 <= v <= 1 for v in self.values):
                raise ScenarioError(f"{self.variable.value} values must lie in [0, 1]")
            if self.base.hotspot is None:
                raise ScenarioError(f"{self.variable.value} sweep needs a base hotspot (center, radius)")
            if self.variable is SweepVariable.HOTSPOT_SHIFT and self.shift_target is None:
                raise ScenarioError("HotspotShift sweep needs shift_target")

    @property
    def seed_list(self) -> list[int]:
        return list(range(self.first_seed, self.first_seed + self.seeds))

    def point_config(self, env: Environment, value: float, seed: int) -> ScenarioConfig:
        cfg = self.base.replace(environment=env, seed=seed)
        if self.variable is SweepVariable.TASK_COUNT:
            return cfg.replace(task_count=int(value))
        hs = self.base.hotspot
        if self.variable is SweepVariable.HOTSPOT_PROPORTION:
            return cfg.replace(hotspot=HotspotSpec(hs.center, hs.radius, float(value)))
        c, t = hs.center, self.shift_target
        moved = Position(c.x + value * (t.x - c.x), c.y + value * (t.y - c.y))
        return cfg.replace(hotspot=HotspotSpec(moved, hs.radius, hs.proportion))

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SweepSpec":
        """Spec file layout: variable, values, environments, seeds, optional first_seed,
        optional shift_target, and ``base``: overrides applied on top of the default scenario."""
        allowed = {"variable", "values", "environments", "seeds", "first_seed", "base", "shift_target"}
        unknown = set(doc) - allowed
        if unknown:
            raise ScenarioError(f"unknown sweep field(s): {', '.join(sorted(unknown))}")
        try:
            base_doc = json.loads(DEFAULT_SCENARIO_PATH.read_text(encoding="utf-8"))
            base_doc.update(doc.get("base", {}))
            target = doc.get("shift_target")
            return cls(
                variable=SweepVariable(doc["variable"]),
                values=tuple(doc["values"]),
                environments=tuple(Environment(e) for e in doc.get("environments", [e.value for e in Environment])),
                seeds=int(doc["seeds"]),
                base=ScenarioConfig.from_dict(base_doc),
                first_seed=int(doc.get("first_seed", 0)),
                shift_target=None if target is None else Position(*map(float, target)),
            )
        except KeyError as exc:
            raise ScenarioError(f"sweep spec missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"bad sweep spec: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "SweepSpec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read sweep spec {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ScenarioError("sweep spec must be a JSON object")
        return cls.from_dict(doc)


@dataclass(frozen=True)
class Cell:
    mean: float
    stderr: float
    n: int
    rates: tuple[float, ...] = ()


@dataclass
class SweepResult:
    variable: SweepVariable
    values: tuple[float, ...]
    environments: tuple[Environment, ...]
    cells: dict[tuple[Environment, float], Cell]
    config_hash: str = ""
    version: str = __version__
    # serialized base scenario; kept raw so an invalid one can be reported rather than rejected on load
    base: Optional[dict[str, Any]] = None
    conservation_violations: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def cell(self, env: Environment | str, value: float) -> Cell:
        return self.cells[(Environment(env), float(value))]

    @property
    def min_seeds(self) -> int:
        return min((c.n for c in self.cells.values()), default=0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "variable": self.variable.value,
            "values": list(self.values),
            "environments": [e.value for e in self.environments],
            "config_hash": self.config_hash,
            "version": self.version,
            "base": self.base,
            "conservation_violations": self.conservation_violations,
            "extra": self.extra,
            "cells": [
                {"environment": e.value, "value": v, "mean": c.mean, "stderr": c.stderr, "n": c.n,
                 "rates": list(c.rates)}
                for (e, v), c in sorted(self.cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SweepResult":
        base = doc.get("base")
        cells = {
            (Environment(c["environment"]), float(c["value"])): Cell(c["mean"], c["stderr"], c["n"], tuple(c["rates"]))
            for c in doc["cells"]
        }
        return cls(SweepVariable(doc["variable"]), tuple(float(v) for v in doc["values"]),
                   tuple(Environment(e) for e in doc["environments"]), cells, doc.get("config_hash", ""),
                   doc.get("version", ""), base, doc.get("conservation_violations", 0), doc.get("extra", {}))


def _conserved(run: RunResult) -> bool:
    return all(g == s + f + i for g, s, f, i in run.conservation)


def _run_point(args: tuple[str, float, ScenarioConfig]) -> RunResult:
    env, value, cfg = args
    try:
        return run_batch(cfg)
    except SimulationAbort as exc:
        raise SweepAbort(env, value, cfg.seed, str(exc)) from None
    except Exception as exc:  # surface anything else with the point coordinates too
        raise SweepAbort(env, value, cfg.seed, f"{type(exc).__name__}: {exc}") from None


def run_points(points: Sequence[tuple[str, float, ScenarioConfig]], parallel: int = 1) -> list[RunResult]:
    if parallel > 1 and len(points) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_point, points, chunksize=max(1, len(points) // (4 * parallel))))
    return [_run_point(p) for p in points]


def run_sweep(spec: SweepSpec, parallel: int = 1) -> SweepResult:
    spec.base.validate()
    seeds = spec.seed_list
    points = [(env.value, float(v), spec.point_config(env, v, s))
              for env in spec.environments for v in spec.values for s in seeds]
    for _, _, cfg in points:
        cfg.validate()
    runs = run_points(points, parallel)
    by_point: dict[tuple[Environment, float], dict[int, RunResult]] = {}
    violations = 0
    for (env, v, cfg), run in zip(points, runs):
        by_point.setdefault((Environment(env), v), {})[cfg.seed] = run
        violations += not _conserved(run)
    cells = {}
    for key, runs_by_seed in by_point.items():
        rates = tuple(runs_by_seed[s].success_rate for s in seeds)
        mean, se = mean_stderr(rates)
        cells[key] = Cell(mean, se, len(rates), rates)
    return SweepResult(spec.variable, tuple(float(v) for v in spec.values), spec.environments, cells,
                       spec.base.config_hash(), __version__, spec.base.to_dict(), violations)


def sweep_task_count(spec: SweepSpec, parallel: int = 1) -> SweepResult:
    if spec.variable is not SweepVariable.TASK_COUNT:
        raise ScenarioError("sweep_task_count needs a TaskCount spec")
    if spec.base.hotspot is not None:
        raise ScenarioError("task-count sweep runs without a hotspot")
    return run_sweep(spec, parallel)


def sweep_hotspot(spec: SweepSpec, parallel: int = 1) -> SweepResult:
    if spec.variable not in (SweepVariable.HOTSPOT_PROPORTION, SweepVariable.HOTSPOT_SHIFT):
        raise ScenarioError("sweep_hotspot needs a HotspotProportion or HotspotShift spec")
    return run_sweep(spec, parallel)


# -- duplex comparison --------------------------------------------------------

@dataclass
class DuplexResult:
    """Integrated runs of one scenario with and without agent-initiated elicitation."""

    enabled: Cell
    disabled: Cell
    first_replan_enabled: float
    first_replan_disabled: float
    config_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        def cell(c: Cell):
            return {"mean": c.mean, "stderr": c.stderr, "n": c.n, "rates": list(c.rates)}

        return {"enabled": cell(self.enabled), "disabled": cell(self.disabled),
                "first_replan_enabled": self.first_replan_enabled,
                "first_replan_disabled": self.first_replan_disabled, "config_hash": self.config_hash}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "DuplexResult":
        def cell(c):
            return Cell(c["mean"], c["stderr"], c["n"], tuple(c["rates"]))

        return cls(cell(doc["enabled"]), cell(doc["disabled"]), float(doc["first_replan_enabled"]),
                   float(doc["first_replan_disabled"]), doc.get("config_hash", ""))


def _first_replan(run: RunResult) -> float:
    return math.inf if run.first_replan_tick is None else float(run.first_replan_tick)


def run_duplex(config: ScenarioConfig, seeds: Sequence[int], parallel: int = 1) -> DuplexResult:
    """Time-to-first-replan is measured from tick 0, when the batch (and so the surge) lands."""
    config = config.replace(environment=Environment.INTEGRATED)
    out = {}
    for flag in (True, False):
        cfg = config.replace(elicitation_enabled=flag)
        runs = run_points([(cfg.environment.value, float(flag), cfg.replace(seed=s)) for s in seeds], parallel)
        rates = tuple(r.success_rate for r in runs)
        mean, se = mean_stderr(rates)
        first = math.fsum(_first_replan(r) for r in runs) / len(runs)
        out[flag] = (Cell(mean, se, len(rates), rates), first)
    return DuplexResult(out[True][0], out[False][0], out[True][1], out[False][1], config.config_hash())


# -- files --------------------------------------------------------------------

def _fmt_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def emit_csv(result: SweepResult, path: str | Path) -> Path:
    path = Path(path)
    rows = sorted(result.cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for (env, v), c in rows:
            w.writerow([env.value, result.variable.value, _fmt_value(v), f"{c.mean:.6f}", f"{c.stderr:.6f}", c.n])
    return path


def provenance_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".json")


def save_result(result: SweepResult, csv_path: str | Path) -> tuple[Path, Path]:
    """CSV plus a JSON sidecar holding per-seed rates, base scenario and provenance."""
    out = emit_csv(result, csv_path)
    side = provenance_path(csv_path)
    side.write_text(json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out, side


def read_csv(path: str | Path) -> SweepResult:
    """Load a sweep CSV; the JSON sidecar, when present, restores per-seed rates and the base scenario."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ScenarioError(f"{path}: unexpected CSV header {header}")
        cells, variable, envs, values = {}, None, [], set()
        for row in reader:
            env, var, value, mean, se, n = row
            var = SweepVariable(var)
            if variable is not None and var is not variable:
                raise ScenarioError(f"{path}: mixed sweep variables")
            variable = var
            e = Environment(env)
            if e not in envs:
                envs.append(e)
            values.add(float(value))
            cells[(e, float(value))] = Cell(float(mean), float(se), int(n))
    side = provenance_path(path)
    if side.exists():
        full = SweepResult.from_dict(json.loads(side.read_text(encoding="utf-8")))
        for key, c in cells.items():
            known = full.cells.get(key)
            if known is None or f"{known.mean:.6f}" != f"{c.mean:.6f}" or known.n != c.n:
                raise ScenarioError(f"{side} does not match {path}")
        return full
    return SweepResult(variable or SweepVariable.TASK_COUNT, tuple(sorted(values)), tuple(envs), cells)
