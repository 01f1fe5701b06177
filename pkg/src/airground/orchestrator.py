"""Orchestrator: situational-awareness model, route planning, hotspot dispatch and re-planning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .model import Environment, Position, ScenarioConfig, distance
from .protocol import (
    Ack,
    AbnormalData,
    Assignment,
    Directive,
    ElicitationBody,
    PerceptionReport,
    PlanCommand,
    QueueEntry,
    Role,
    UnknownAgentError,
)


class InfeasibleRouteError(ValueError):
    pass


@dataclass(frozen=True)
class Route:
    """Direct execution at ``executor``, or a relay through flying node ``via``."""

    executor: str
    via: Optional[str] = None

    @property
    def relayed(self) -> bool:
        return self.via is not None

    def sort_key(self) -> tuple[str, str]:
        return (self.executor, self.via or "")

    def to_json(self) -> list:
        return [self.executor, self.via]


@dataclass
class NodeView:
    """What the orchestrator believes about one agent."""

    id: str
    flying: bool
    pos: Position
    capacity: int
    reach: float
    queue: list[QueueEntry] = field(default_factory=list)
    relay_queue: list[int] = field(default_factory=list)
    waypoint: Optional[Position] = None
    dispatch_tick: int = -(10**9)
    utilization: float = 0.0
    report_tick: int = -1
    # assignments issued but not yet visible in a report
    pending_in: dict[int, int] = field(default_factory=dict)
    relay_in: dict[int, int] = field(default_factory=dict)

    def backlog(self, exclude: Optional[int] = None) -> int:
        total = sum(q.remaining for q in self.queue if q.task_id != exclude)
        return total + sum(d for t, d in self.pending_in.items() if t != exclude)

    def relay_backlog(self, exclude: Optional[int] = None) -> int:
        n = sum(1 for t in self.relay_queue if t != exclude)
        return n + sum(1 for t in self.relay_in if t != exclude)

    @property
    def moving(self) -> bool:
        return self.waypoint is not None

    @property
    def busy(self) -> bool:
        return bool(self.backlog() or self.relay_backlog())


@dataclass
class Hotspot:
    center: Position
    magnitude: float
    updated: int


@dataclass
class WorldState:
    environment: Environment
    world_size: float
    preprocessing_factor: float
    relay_hop_delay: int
    grid_size: int = 10
    hotspot_factor: float = 2.0
    nodes: dict[str, NodeView] = field(default_factory=dict)
    grid: np.ndarray = None
    hotspots: list[Hotspot] = field(default_factory=list)
    epoch: int = 0
    tick: int = 0

    def __post_init__(self):
        if self.grid is None:
            self.grid = np.zeros((self.grid_size, self.grid_size))

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "WorldState":
        return cls(config.environment, config.world_size, config.preprocessing_factor,
                   config.relay_hop_delay, config.grid_size, config.hotspot_factor)

    def edges(self) -> list[NodeView]:
        return [n for n in self.nodes.values() if not n.flying]

    def flyers(self) -> list[NodeView]:
        return [n for n in self.nodes.values() if n.flying]

    def cell_of(self, p: Position) -> tuple[int, int]:
        g = self.grid_size
        side = self.world_size / g
        return min(g - 1, max(0, int(p.x // side))), min(g - 1, max(0, int(p.y // side)))

    def cell_center(self, ix: int, iy: int) -> Position:
        side = self.world_size / self.grid_size
        return Position((ix + 0.5) * side, (iy + 0.5) * side)


# -- routing ------------------------------------------------------------------

def route_feasible(world: WorldState, origin: Position, route: Route) -> bool:
    env = world.environment
    ex = world.nodes.get(route.executor)
    if ex is None:
        return False
    if route.via is None:
        if ex.flying:
            return env.flyers_active and not ex.moving and distance(origin, ex.pos) <= ex.reach
        return env.edges_active and distance(origin, ex.pos) <= ex.reach
    via = world.nodes.get(route.via)
    return (env is Environment.INTEGRATED and via is not None and via.flying and not ex.flying
            and not via.moving and distance(origin, via.pos) <= via.reach
            and distance(ex.pos, via.pos) <= via.reach)


def estimate_completion(world: WorldState, task, route: Route, exclude: Optional[int] = None) -> int:
    """Ticks until ``task`` would finish on ``route``.

    Queue drain at the executor, plus transit (hop delay and the relay node's
    hand-off backlog) for relayed routes, plus the task's own service time.
    A flying executor additionally loses one tick per pending hand-off.
    """
    if not route_feasible(world, task.origin, route):
        raise InfeasibleRouteError(f"route {route} infeasible for task {task.id}")
    ex = world.nodes[route.executor]
    demand = task.demand
    transit = 0
    if route.via is not None:
        demand = math.ceil(world.preprocessing_factor * demand)
        transit = world.relay_hop_delay + world.nodes[route.via].relay_backlog(exclude)
    stall = ex.relay_backlog(exclude) if ex.flying else 0
    drain = math.ceil(ex.backlog(exclude) / ex.capacity)
    return drain + stall + transit + math.ceil(demand / ex.capacity)


def candidate_routes(world: WorldState, origin: Position) -> list[Route]:
    env = world.environment
    routes: list[Route] = []
    if env.edges_active:
        routes += [Route(e.id) for e in world.edges() if distance(origin, e.pos) <= e.reach]
    if env.flyers_active:
        near = [f for f in world.flyers() if not f.moving and distance(origin, f.pos) <= f.reach]
        routes += [Route(f.id) for f in near]
        if env is Environment.INTEGRATED:
            for f in near:
                routes += [Route(e.id, f.id) for e in world.edges() if distance(e.pos, f.pos) <= f.reach]
    return routes


def admit(world: WorldState, task, exclude: Optional[int] = None) -> Optional[Route]:
    """Pick a route for a pending task, or None if nothing can reach it yet.

    Single-network environments use the least-loaded reachable node; the
    integrated environment minimises estimated completion time.  Ties go to the
    lowest node id.
    """
    routes = candidate_routes(world, task.origin)
    if not routes:
        return None
    if world.environment is Environment.INTEGRATED:
        return min(routes, key=lambda r: (estimate_completion(world, task, r, exclude), r.sort_key()))
    return min(routes, key=lambda r: (world.nodes[r.executor].backlog(exclude), r.executor))


# -- hotspots -----------------------------------------------------------------

def detect_hotspots(world: WorldState, tick: int) -> list[Hotspot]:
    """Connected groups of grid cells whose rate is at least ``hotspot_factor`` times the mean."""
    g = world.grid
    mean = float(g.mean())
    if mean <= 0:
        return []
    hot = g >= world.hotspot_factor * mean
    seen = np.zeros_like(hot)
    n = world.grid_size
    found = []
    for ix in range(n):
        for iy in range(n):
            if not hot[ix, iy] or seen[ix, iy]:
                continue
            stack, cells = [(ix, iy)], []
            seen[ix, iy] = True
            while stack:
                cx, cy = stack.pop()
                cells.append((cx, cy))
                for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
                    if 0 <= nx < n and 0 <= ny < n and hot[nx, ny] and not seen[nx, ny]:
                        seen[nx, ny] = True
                        stack.append((nx, ny))
            w = np.array([g[c] for c in cells])
            centers = np.array([world.cell_center(*c).as_list() for c in cells])
            cx, cy = (w[:, None] * centers).sum(axis=0) / w.sum()
            found.append(Hotspot(Position(float(cx), float(cy)), float(w.sum() / mean), tick))
    found.sort(key=lambda h: (-h.magnitude, h.center.x, h.center.y))
    return found


def merge_abnormal(world: WorldState, abnormal: AbnormalData) -> None:
    """Raise the reporting cell so its rate relative to the grid mean equals the reported magnitude."""
    ix, iy = world.cell_of(abnormal.location)
    g = world.grid
    n = g.size
    rest = float(g.sum() - g[ix, iy])
    mag = abnormal.magnitude
    if rest <= 0 or mag >= n:
        target = max(float(g[ix, iy]), mag, 1.0)
    else:
        target = mag * rest / (n - mag)
    g[ix, iy] = max(float(g[ix, iy]), target)


# -- plans --------------------------------------------------------------------

@dataclass
class Plan:
    epoch: int
    trigger: str
    tick: int
    assignments: dict[int, Route] = field(default_factory=dict)
    dispatches: dict[str, Position] = field(default_factory=dict)
    releases: dict[str, list[int]] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    def directives(self, task_lookup: Callable[[int], object] = None) -> dict[str, Directive]:
        parts: dict[str, dict] = {}

        def slot(agent):
            return parts.setdefault(agent, {"waypoint": None, "assignments": [], "release": []})

        for fid, wp in sorted(self.dispatches.items()):
            slot(fid)["waypoint"] = wp
        for tid, route in sorted(self.assignments.items()):
            if route.via is None:
                slot(route.executor)["assignments"].append(Assignment(tid, Role.EXECUTE))
            else:
                s = slot(route.via)["assignments"]
                s.append(Assignment(tid, Role.PREPROCESS))
                s.append(Assignment(tid, Role.RELAY, route.executor))
        for holder, tids in sorted(self.releases.items()):
            slot(holder)["release"].extend(sorted(tids))
        return {a: Directive(a, p["waypoint"], tuple(p["assignments"]), tuple(p["release"]))
                for a, p in sorted(parts.items())}

    def log_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "trigger": self.trigger,
            "dispatches": {k: v.as_list() for k, v in sorted(self.dispatches.items())},
            "assignment_count": len(self.assignments),
            "release_count": sum(len(v) for v in self.releases.values()),
        }


def validate_plan(world: WorldState, plan: Plan, origins: dict[int, Position]) -> list[str]:
    problems = []
    for tid, route in plan.assignments.items():
        if not route_feasible(world, origins[tid], route):
            problems.append(f"task {tid}: infeasible route {route}")
        if route.executor in plan.dispatches or route.via in plan.dispatches:
            problems.append(f"task {tid}: assigned to a node dispatched in the same plan")
    return problems


@dataclass
class KnownTask:
    id: int
    origin: Position
    demand: int
    arrival_tick: int
    state: str = "pending"  # pending | assigned | releasing | done
    route: Optional[Route] = None


class Orchestrator:
    """The protocol host's planner; implements the host handler callbacks."""

    def __init__(self, config: ScenarioConfig, edges: Iterable = (), flyers: Iterable = (),
                 log: Optional[Callable] = None):
        self.config = config
        self.world = WorldState.from_config(config)
        for n in edges:
            self.world.nodes[n.id] = NodeView(n.id, False, n.pos, n.capacity, n.coverage_radius)
        for n in flyers:
            self.world.nodes[n.id] = NodeView(n.id, True, n.pos, n.capacity, n.link_radius)
        self.tasks: dict[int, KnownTask] = {}
        self.plans: list[Plan] = []
        self.replans = 0
        self.first_replan_tick: Optional[int] = None
        self.log = log or (lambda *a, **k: None)
        self._outbox: dict[str, list[Directive]] = {}

    # perception -------------------------------------------------------------
    def begin_tick(self, tick: int) -> None:
        self.world.tick = tick
        self.world.grid *= self.config.grid_decay
        for t in self.tasks.values():
            if t.state == "pending" and tick - t.arrival_tick > self.config.deadline_wait:
                t.state = "done"

    def on_report(self, rep: PerceptionReport) -> None:
        view = self.world.nodes.get(rep.agent_id)
        if view is None:
            raise UnknownAgentError(rep.agent_id)
        if rep.tick < view.report_tick:
            return
        view.report_tick = rep.tick
        view.pos = rep.position
        view.queue = list(rep.queue)
        view.relay_queue = list(rep.relay_queue)
        view.utilization = rep.utilization
        if view.flying and rep.tick >= view.dispatch_tick + self.config.message_delay:
            view.waypoint = rep.waypoint
        seen = {q.task_id for q in rep.queue}
        for tid in seen:
            view.pending_in.pop(tid, None)
        for tid in (*rep.relay_queue, *rep.forwarded):
            view.relay_in.pop(tid, None)
        for tid in rep.done:
            self._forget(tid)
            if tid in self.tasks:
                self.tasks[tid].state = "done"
        for s in rep.sightings:
            if s.task_id in self.tasks:
                continue
            self.tasks[s.task_id] = KnownTask(s.task_id, s.origin, s.demand, s.arrival_tick)
            self.world.grid[self.world.cell_of(s.origin)] += 1.0

    def on_ack(self, agent_id: str, ack: Ack) -> None:
        for tid in (*ack.rejected, *ack.released):
            self._forget(tid)
            t = self.tasks.get(tid)
            if t is not None and t.state != "done":
                t.state, t.route = "pending", None
        view = self.world.nodes[agent_id]
        if ack.released:
            rel = set(ack.released)
            view.queue = [q for q in view.queue if q.task_id not in rel]
            view.relay_queue = [t for t in view.relay_queue if t not in rel]
        for tid in ack.kept:
            t = self.tasks.get(tid)
            if t is not None and t.state == "releasing":
                t.state = "assigned"

    def on_elicitation(self, session, body: ElicitationBody) -> tuple[PlanCommand, list[PlanCommand]]:
        meta = body.agent_meta
        view = self.world.nodes.get(meta.id)
        if view is None:
            raise UnknownAgentError(f"elicitation from unregistered agent {meta.id!r}")
        view.pos = meta.position
        merge_abnormal(self.world, body.abnormal_data)
        plan = self.replan("elicitation")
        directives = plan.directives()
        own = PlanCommand(plan.epoch, (directives.pop(meta.id, Directive(meta.id)),))
        others = [PlanCommand(plan.epoch, (d,)) for _, d in sorted(directives.items())]
        return own, others

    # planning ---------------------------------------------------------------
    def _forget(self, tid: int) -> None:
        for v in self.world.nodes.values():
            v.pending_in.pop(tid, None)
            v.relay_in.pop(tid, None)

    def _reserve(self, task: KnownTask, route: Route) -> None:
        nodes = self.world.nodes
        demand = task.demand
        if route.via is not None:
            nodes[route.via].relay_in[task.id] = 1
            demand = math.ceil(self.world.preprocessing_factor * demand)
        nodes[route.executor].pending_in[task.id] = demand

    def _dispatch(self, plan: Plan) -> None:
        world, cfg = self.world, self.config
        station = world.world_size / world.grid_size / 2
        claimed: set[str] = set()
        for hs in world.hotspots:
            want = math.ceil(hs.magnitude / world.hotspot_factor)
            stationed = [f for f in world.flyers()
                         if f.id not in claimed and not f.moving and distance(f.pos, hs.center) <= station]
            heading = [f for f in world.flyers() if f.moving and f.waypoint is not None
                       and distance(f.waypoint, hs.center) <= station]
            claimed.update(f.id for f in stationed + heading)
            need = want - len(stationed) - len(heading)
            if need <= 0:
                continue
            free = [f for f in world.flyers() if f.id not in claimed and not f.moving and not f.busy]
            free.sort(key=lambda f: (distance(f.pos, hs.center), f.id))
            for f in free[:need]:
                wp = hs.center.clamp(world.world_size)
                plan.dispatches[f.id] = wp
                f.waypoint = wp
                f.dispatch_tick = world.tick
                claimed.add(f.id)

    def _current_estimate(self, view: NodeView, tid: int) -> Optional[int]:
        """Estimated completion of a held, unstarted task where it currently sits."""
        if tid in view.relay_queue:
            task = self.tasks[tid]
            route = task.route
            if route is None or route.via != view.id or route.executor not in self.world.nodes:
                return None
            ex = self.world.nodes[route.executor]
            idx = view.relay_queue.index(tid)
            demand = math.ceil(self.world.preprocessing_factor * task.demand)
            return (idx + self.world.relay_hop_delay + math.ceil(ex.backlog(tid) / ex.capacity)
                    + math.ceil(demand / ex.capacity))
        ahead = 0
        for q in view.queue:
            if q.task_id == tid:
                stall = view.relay_backlog() if view.flying else 0
                return math.ceil(ahead / view.capacity) + stall + math.ceil(q.remaining / view.capacity)
            ahead += q.remaining
        return None

    def _readmit_held(self, plan: Plan) -> None:
        overhead = 2 * self.config.message_delay
        held = []
        for view in sorted(self.world.nodes.values(), key=lambda v: v.id):
            held += [(q.task_id, view) for q in view.queue if not q.started]
            held += [(tid, view) for tid in view.relay_queue]
        for tid, view in sorted(held, key=lambda p: p[0]):
            task = self.tasks.get(tid)
            if task is None or task.state != "assigned":
                continue
            if self.world.tick - task.arrival_tick > self.config.deadline_wait:
                continue
            current = self._current_estimate(view, tid)
            if current is None:
                continue
            route = admit(self.world, task, exclude=tid)
            if route is None or (route.via or route.executor) == view.id:
                continue
            new = estimate_completion(self.world, task, route, exclude=tid)
            if new + overhead >= current:
                continue
            plan.releases.setdefault(view.id, []).append(tid)
            task.state = "releasing"
            view.queue = [q for q in view.queue if q.task_id != tid]
            view.relay_queue = [t for t in view.relay_queue if t != tid]
            self._forget(tid)
            self._reserve(task, route)

    def replan(self, trigger: str) -> Plan:
        world = self.world
        world.epoch += 1
        self.replans += 1
        if self.first_replan_tick is None:
            self.first_replan_tick = world.tick
        world.hotspots = detect_hotspots(world, world.tick)
        plan = Plan(world.epoch, trigger, world.tick)
        if world.environment.flyers_active:
            self._dispatch(plan)
        self._readmit_held(plan)
        self._finish(plan)
        self.log(world.tick, "Replan", ("host",), plan.log_record())
        return plan

    def admission(self) -> Plan:
        plan = Plan(self.world.epoch, "admission", self.world.tick)
        for tid in sorted(t.id for t in self.tasks.values() if t.state == "pending"):
            task = self.tasks[tid]
            self._forget(tid)
            route = admit(self.world, task)
            if route is None:
                continue
            plan.assignments[tid] = route
            task.state, task.route = "assigned", route
            self._reserve(task, route)
        self._finish(plan)
        return plan

    def _finish(self, plan: Plan) -> None:
        origins = {tid: self.tasks[tid].origin for tid in plan.assignments}
        plan.violations = validate_plan(self.world, plan, origins)
        if plan.violations:
            raise RuntimeError(f"planner emitted infeasible plan: {plan.violations}")
        self.plans.append(plan)
