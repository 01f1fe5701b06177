"""Domain types, scenario configuration and geometry/workload primitives."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


class Environment(str, enum.Enum):
    CPN_ONLY = "CpnOnly"
    LAE_ONLY = "LaeOnly"
    INTEGRATED = "Integrated"

    @property
    def edges_active(self) -> bool:
        return self is not Environment.LAE_ONLY

    @property
    def flyers_active(self) -> bool:
        return self is not Environment.CPN_ONLY


class TaskStatus(str, enum.Enum):
    PENDING = "Pending"
    QUEUED = "Queued"
    RELAYING = "Relaying"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (TaskStatus.SUCCEEDED, TaskStatus.FAILED)


_S = TaskStatus
# Relaying/Queued -> Pending is the release edge used when the orchestrator
# re-admits a task that has not started yet.
ALLOWED_TRANSITIONS: dict[TaskStatus, frozenset[TaskStatus]] = {
    _S.PENDING: frozenset({_S.RELAYING, _S.QUEUED, _S.FAILED}),
    _S.RELAYING: frozenset({_S.QUEUED, _S.PENDING, _S.FAILED}),
    _S.QUEUED: frozenset({_S.RUNNING, _S.PENDING, _S.FAILED}),
    _S.RUNNING: frozenset({_S.SUCCEEDED, _S.FAILED}),
    _S.SUCCEEDED: frozenset(),
    _S.FAILED: frozenset(),
}


class TaskStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def clamp(self, size: float) -> "Position":
        return Position(min(max(self.x, 0.0), size), min(max(self.y, 0.0), size))

    def as_list(self) -> list[float]:
        return [self.x, self.y]


def distance(a: Position, b: Position) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass
class EdgeNode:
    id: str
    pos: Position
    capacity: int
    coverage_radius: float
    queue: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity <= 0 or self.coverage_radius <= 0:
            raise ScenarioError(f"edge node {self.id}: capacity and coverage_radius must be > 0")

    def __setattr__(self, name, value):
        if name == "pos" and "pos" in self.__dict__:
            raise AttributeError("edge node position is fixed")
        super().__setattr__(name, value)

    @property
    def reach(self) -> float:
        return self.coverage_radius


@dataclass
class FlyingNode:
    id: str
    pos: Position
    speed: float
    capacity: int
    link_radius: float
    waypoint: Optional[Position] = None
    queue: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity <= 0 or self.link_radius <= 0 or self.speed < 0:
            raise ScenarioError(f"flying node {self.id}: invalid capacity/link_radius/speed")

    @property
    def reach(self) -> float:
        return self.link_radius


@dataclass
class Task:
    id: int
    origin: Position
    demand: int
    arrival_tick: int
    deadline_wait: int
    status: TaskStatus = TaskStatus.PENDING
    remaining: int = 0
    preprocessed: bool = False
    relayed: bool = False
    queue_arrival_tick: Optional[int] = None
    start_tick: Optional[int] = None
    end_tick: Optional[int] = None
    holder: Optional[str] = None

    def __post_init__(self):
        if self.demand <= 0:
            raise ValueError(f"task {self.id}: demand must be positive")
        if not self.remaining:
            self.remaining = self.demand

    def advance(self, new: TaskStatus) -> None:
        if new not in ALLOWED_TRANSITIONS[self.status]:
            raise TaskStateError(f"task {self.id}: illegal status change {self.status.value} -> {new.value}")
        self.status = new

    def waiting(self, tick: int) -> int:
        return tick - self.arrival_tick

    def expired(self, tick: int) -> bool:
        return self.start_tick is None and self.waiting(tick) > self.deadline_wait


@dataclass(frozen=True)
class HotspotSpec:
    center: Position
    radius: float
    proportion: float

    def __post_init__(self):
        if not 0.0 <= self.proportion <= 1.0:
            raise ScenarioError(f"hotspot proportion {self.proportion} outside [0, 1]")
        if self.radius <= 0:
            raise ScenarioError("hotspot radius must be > 0")


@dataclass(frozen=True)
class ScenarioConfig:
    environment: Environment = Environment.INTEGRATED
    world_size: float = 100.0
    edge_count: int = 20
    edge_grid_cols: Optional[int] = 5
    edge_jitter: float = 0.3
    layout_seed: int = 7
    flying_count: int = 20
    edge_capacity: int = 4
    flying_capacity: int = 1
    edge_coverage_radius: float = 15.0
    flying_link_radius: float = 20.0
    flying_speed: float = 15.0
    deadline_wait: int = 25
    task_count: int = 160
    demand_min: int = 2
    demand_max: int = 8
    hotspot: Optional[HotspotSpec] = None
    preprocessing_factor: float = 0.5
    relay_hop_delay: int = 1
    message_delay: int = 1
    report_interval: int = 1
    reflection_window: int = 5
    deviation_factor: float = 2.0
    edge_deviation_factor: float = 1000.0
    cooldown_reset: int = 10
    baseline_rate: Optional[float] = None
    elicitation_enabled: bool = True
    grid_size: int = 10
    hotspot_factor: float = 2.0
    grid_decay: float = 0.9
    replan_interval: int = 10
    arrival_mode: str = "batch"
    stream_rate: float = 0.0
    stream_ticks: int = 0
    horizon: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.environment, str) and not isinstance(self.environment, Environment):
            try:
                object.__setattr__(self, "environment", Environment(self.environment))
            except ValueError:
                raise ScenarioError(f"unknown environment {self.environment!r}") from None
        if isinstance(self.hotspot, dict):
            object.__setattr__(self, "hotspot", _hotspot_from_dict(self.hotspot))
        self.validate()

    def validate(self) -> None:
        if self.world_size <= 0:
            raise ScenarioError("world_size must be > 0")
        if self.edge_count < 0 or self.flying_count < 0:
            raise ScenarioError("node counts must be >= 0")
        if self.task_count < 1:
            raise ScenarioError("task_count (K) must be >= 1")
        if self.edge_capacity <= 0 or self.flying_capacity <= 0:
            raise ScenarioError("capacities must be > 0")
        if self.edge_count and self.flying_count and self.flying_capacity >= self.edge_capacity:
            raise ScenarioError(
                f"flying_capacity ({self.flying_capacity}) must be strictly below "
                f"edge_capacity ({self.edge_capacity})"
            )
        if self.edge_coverage_radius <= 0 or self.flying_link_radius <= 0:
            raise ScenarioError("radii must be > 0")
        if not 0 < self.preprocessing_factor <= 1:
            raise ScenarioError("preprocessing_factor must be in (0, 1]")
        if not 1 <= self.demand_min <= self.demand_max:
            raise ScenarioError("need 1 <= demand_min <= demand_max")
        if self.deadline_wait < 0 or self.relay_hop_delay < 1 or self.message_delay < 1:
            raise ScenarioError("deadline_wait >= 0, relay_hop_delay >= 1 and message_delay >= 1 required")
        if self.reflection_window < 1 or self.cooldown_reset < 0:
            raise ScenarioError("reflection_window >= 1 and cooldown_reset >= 0 required")
        if self.deviation_factor <= 1 or self.edge_deviation_factor <= 1:
            raise ScenarioError("deviation factors must be > 1")
        if self.grid_size < 1 or self.hotspot_factor <= 1 or not 0 < self.grid_decay <= 1:
            raise ScenarioError("grid_size >= 1, hotspot_factor > 1, grid_decay in (0, 1] required")
        if self.replan_interval < 1 or self.report_interval < 1:
            raise ScenarioError("replan_interval and report_interval must be >= 1")
        if self.arrival_mode not in ("batch", "stream"):
            raise ScenarioError(f"arrival_mode must be 'batch' or 'stream', got {self.arrival_mode!r}")
        if self.edge_grid_cols is not None and self.edge_grid_cols < 1:
            raise ScenarioError("edge_grid_cols must be >= 1")
        if not 0 <= self.edge_jitter <= 1:
            raise ScenarioError("edge_jitter must be in [0, 1]")
        if not 0 <= self.seed < 2**64 or not 0 <= self.layout_seed < 2**64:
            raise ScenarioError("seeds must be unsigned 64-bit integers")

    @property
    def run_horizon(self) -> int:
        if self.horizon is not None:
            return self.horizon
        return 10 * max(self.deadline_wait, 1) + (self.stream_ticks if self.arrival_mode == "stream" else 0)

    def derived_baseline(self, reach: float) -> float:
        """Expected count of waiting requests inside a disk of radius ``reach`` under uniform load."""
        if self.baseline_rate is not None:
            return self.baseline_rate
        frac = min(1.0, math.pi * reach * reach / self.world_size**2)
        total = self.task_count if self.arrival_mode == "batch" else self.stream_rate * self.deadline_wait
        return max(1.0, total * frac)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Environment):
                v = v.value
            elif isinstance(v, HotspotSpec):
                v = {"center": v.center.as_list(), "radius": v.radius, "proportion": v.proportion}
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ScenarioError("scenario document must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ScenarioError(f"unknown scenario field(s): {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
        return cls.from_dict(doc)


def _hotspot_from_dict(doc: dict[str, Any]) -> HotspotSpec:
    extra = set(doc) - {"center", "radius", "proportion"}
    if extra:
        raise ScenarioError(f"unknown hotspot field(s): {', '.join(sorted(extra))}")
    try:
        cx, cy = doc["center"]
        return HotspotSpec(Position(float(cx), float(cy)), float(doc["radius"]), float(doc["proportion"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad hotspot: {exc}") from None


DEFAULT_SCENARIO_PATH = Path(__file__).parent / "data" / "default_scenario.json"


def default_config(**changes) -> ScenarioConfig:
    """The pinned default scenario (20 edge + 20 flying nodes)."""
    return ScenarioConfig.load(DEFAULT_SCENARIO_PATH).replace(**changes)


# -- randomness ---------------------------------------------------------------

def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one consumer, keyed by (seed, label).

    Adding a new label never perturbs the streams of existing ones.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


def sample_origin(rng: np.random.Generator, hotspot: Optional[HotspotSpec], size: float) -> Position:
    # The mixture coin is always drawn so that alpha = 0 reproduces the
    # hotspot-free stream exactly.
    coin = rng.random()
    if hotspot is not None and coin < hotspot.proportion:
        c, r = hotspot.center, hotspot.radius
        x0, x1 = max(0.0, c.x - r), min(size, c.x + r)
        y0, y1 = max(0.0, c.y - r), min(size, c.y + r)
        if x0 >= x1 or y0 >= y1:
            raise ScenarioError("hotspot disk does not intersect the world square")
        while True:
            x = x0 + (x1 - x0) * rng.random()
            y = y0 + (y1 - y0) * rng.random()
            if (x - c.x) ** 2 + (y - c.y) ** 2 <= r * r:
                return Position(x, y)
    return Position(size * rng.random(), size * rng.random())


def grid_shape(count: int, cols: Optional[int]) -> tuple[int, int]:
    """(cols, rows) of the edge grid."""
    if count == 0:
        return (0, 0)
    if cols is None:
        cols = next(c for c in range(math.isqrt(count), 0, -1) if count % c == 0)
        cols = count // cols  # wider than tall
    if count % cols:
        raise ScenarioError(f"edge_count ({count}) must be divisible by edge_grid_cols ({cols}) to tile the grid")
    return cols, count // cols


def place_nodes(config: ScenarioConfig) -> tuple[list[EdgeNode], list[FlyingNode]]:
    size = config.world_size
    cols, rows = grid_shape(config.edge_count, config.edge_grid_cols)
    edges: list[EdgeNode] = []
    if cols:
        rng = rng_for(config.layout_seed, "layout")
        cw, ch = size / cols, size / rows
        for r in range(rows):
            for c in range(cols):
                jx, jy = (rng.random() - 0.5) * config.edge_jitter * cw, (rng.random() - 0.5) * config.edge_jitter * ch
                pos = Position((c + 0.5) * cw + jx, (r + 0.5) * ch + jy).clamp(size)
                edges.append(EdgeNode(f"e{len(edges):02d}", pos, config.edge_capacity, config.edge_coverage_radius))
    rng = rng_for(config.seed, "placement")
    flyers = [
        FlyingNode(
            f"f{i:02d}",
            Position(size * rng.random(), size * rng.random()),
            config.flying_speed,
            config.flying_capacity,
            config.flying_link_radius,
        )
        for i in range(config.flying_count)
    ]
    return edges, flyers


def generate_tasks(config: ScenarioConfig) -> list[Task]:
    """The scenario workload: K tasks at tick 0 (batch) or Poisson arrivals (stream)."""
    rng = rng_for(config.seed, "workload")
    ticks: list[int]
    if config.arrival_mode == "batch":
        ticks = [0] * config.task_count
    else:
        counts = rng.poisson(config.stream_rate, size=config.stream_ticks)
        ticks = [t for t, n in enumerate(counts) for _ in range(int(n))]
    tasks = []
    for i, t in enumerate(ticks):
        origin = sample_origin(rng, config.hotspot, config.world_size)
        demand = int(rng.integers(config.demand_min, config.demand_max + 1))
        tasks.append(Task(i, origin, demand, t, config.deadline_wait))
    return tasks
