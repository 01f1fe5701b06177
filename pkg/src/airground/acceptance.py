"""Acceptance gate: structural checks, the scripted surge scenario and the sweep orderings.

Every check returns a :class:`CriterionResult`; nothing here raises on a failed
criterion.  ``check_acceptance`` runs them all and prints a table.
"""

from __future__ import annotations

import io
import math
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np

from .engine import Simulation, run_batch
from .experiments import Cell, DuplexResult, SweepResult
from .model import (
    Environment,
    FlyingNode,
    Position,
    ScenarioConfig,
    ScenarioError,
    Task,
    default_config,
    distance,
)
from .orchestrator import NodeView, Route, WorldState, admit, estimate_completion
from .protocol import (
    Ack,
    AbnormalData,
    AgentMeta,
    AgentState,
    Assignment,
    Directive,
    ElicitationBody,
    Event,
    IllegalTransition,
    Kind,
    Lifecycle,
    Message,
    PerceptionReport,
    PlanCommand,
    QueueEntry,
    Role,
    ServiceInfo,
    Sighting,
    decode,
    encode,
    transition,
)

MIN_SEEDS = 20


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: Optional[bool]  # None: not evaluated (input missing)
    detail: str = ""

    @property
    def status(self) -> str:
        return {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]


@dataclass
class AcceptanceReport:
    rows: list[CriterionResult] = field(default_factory=list)
    refused: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.refused is None and all(r.passed is not False for r in self.rows)

    def table(self) -> str:
        if self.refused is not None:
            return f"REFUSED: {self.refused}\n"
        buf = io.StringIO()
        for r in sorted(self.rows, key=lambda r: r.number):
            buf.write(f"[{r.status}] {r.number:>2}. {r.title}: {r.detail}\n")
        buf.write(f"overall: {'PASS' if self.passed else 'FAIL'}\n")
        return buf.getvalue()


def pooled_se(*cells: Cell) -> float:
    """Standard error of a difference (or sum) of independent means."""
    return math.sqrt(math.fsum(c.stderr ** 2 for c in cells))


# -- 1. codec round trip ------------------------------------------------------

def _rpos(rng: np.random.Generator) -> Position:
    return Position(float(rng.uniform(0, 100)), float(rng.uniform(0, 100)))


def _rids(rng: np.random.Generator, hi: int = 6) -> tuple[int, ...]:
    return tuple(int(x) for x in rng.integers(0, 2**32, size=int(rng.integers(0, hi))))


def random_message(rng: np.random.Generator) -> Message:
    """A valid message of a random kind with a random payload."""
    kind = list(Kind)[int(rng.integers(len(Kind)))]
    cid = int(rng.integers(0, 2**63))
    epoch = int(rng.integers(0, 1000))
    sender = f"{'ef'[int(rng.integers(2))]}{int(rng.integers(100)):02d}"
    if kind in (Kind.REQUEST, Kind.ELICITATION_RESPONSE):
        directives = []
        for _ in range(int(rng.integers(0, 4))):
            assigns = []
            for _ in range(int(rng.integers(0, 4))):
                role = list(Role)[int(rng.integers(len(Role)))]
                target = f"e{int(rng.integers(20)):02d}" if role is Role.RELAY else None
                assigns.append(Assignment(int(rng.integers(0, 10**6)), role, target))
            wp = _rpos(rng) if rng.random() < 0.5 else None
            directives.append(Directive(f"f{int(rng.integers(20)):02d}", wp, tuple(assigns), _rids(rng)))
        payload = PlanCommand(epoch, tuple(directives))
    elif kind is Kind.RESPONSE:
        payload = Ack(_rids(rng), _rids(rng), _rids(rng), _rids(rng))
    elif kind is Kind.ELICITATION:
        payload = ElicitationBody(
            AgentMeta(sender, _rpos(rng), int(rng.integers(1, 8)), int(rng.integers(0, 50))),
            ServiceInfo(_rids(rng, 6) + (1,)),
            AbnormalData("LoadSurge", float(rng.uniform(0, 50)), _rpos(rng)),
        )
    else:
        queue = tuple(QueueEntry(int(rng.integers(10**6)), int(rng.integers(1, 9)), bool(rng.integers(2)))
                      for _ in range(int(rng.integers(0, 4))))
        sightings = tuple(Sighting(int(rng.integers(10**6)), _rpos(rng), int(rng.integers(1, 9)),
                                   int(rng.integers(0, 300))) for _ in range(int(rng.integers(0, 4))))
        payload = PerceptionReport(sender, int(rng.integers(0, 10**4)), _rpos(rng), len(queue),
                                   float(rng.random()), float(rng.uniform(0, 20)),
                                   _rpos(rng) if rng.random() < 0.5 else None, queue, _rids(rng), _rids(rng),
                                   _rids(rng), sightings)
    return Message(kind, cid, sender, epoch, payload)


def check_roundtrip(n: int = 10_000, seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        m = random_message(rng)
        wire = encode(m)
        back = decode(wire)
        if back != m or encode(back) != wire:
            bad += 1
    return CriterionResult(1, "protocol round trip", bad == 0, f"{n - bad}/{n} messages identical")


# -- 2. lifecycle table -------------------------------------------------------

LEGAL = {
    (Lifecycle.IDLE, Event.PLAN_RECEIVED): Lifecycle.ACTION,
    (Lifecycle.ACTION, Event.TASK_BATCH_DONE): Lifecycle.IDLE,
    (Lifecycle.ACTION, Event.DEVIATION_DETECTED): Lifecycle.ELICITATION,
    (Lifecycle.ELICITATION, Event.ELICITATION_ANSWERED): Lifecycle.ACTION,
}


def check_transition_table() -> CriterionResult:
    wrong = []
    for state in Lifecycle:
        st = AgentState(state, 7 if state is Lifecycle.ELICITATION else None)
        for ev in Event:
            want = LEGAL.get((state, ev))
            try:
                got = transition(st, ev, 11).current
            except IllegalTransition:
                got = None
            if got != want:
                wrong.append(f"{state.value}+{ev.value}")
    total = len(Lifecycle) * len(Event)
    return CriterionResult(2, "lifecycle transition table", not wrong,
                           f"{total - len(wrong)}/{total} pairs correct" + (f"; wrong: {wrong}" if wrong else ""))


# -- 3 and 10. scripted surge -------------------------------------------------

def scripted_surge() -> Simulation:
    """Three flying nodes, no ground edges; six unit tasks land on top of f00 at tick 0.

    f00 is the only agent that can see the burst, so it is the only one whose
    monitor fires.  The two idle flyers start 30 units away on either side and
    are dispatched by the resulting replan.
    """
    cfg = default_config(environment=Environment.LAE_ONLY, edge_count=0, flying_count=3, task_count=6,
                         baseline_rate=1.0, demand_min=1, demand_max=1)
    make = lambda fid, x: FlyingNode(fid, Position(x, 50.0), cfg.flying_speed, cfg.flying_capacity,
                                     cfg.flying_link_radius)
    flyers = [make("f00", 50.0), make("f01", 20.0), make("f02", 80.0)]
    tasks = [Task(i, Position(50 + 3 * math.cos(i), 50 + 3 * math.sin(i)), 1, 0, cfg.deadline_wait)
             for i in range(6)]
    sim = Simulation(cfg, tasks=tasks, nodes=([], flyers))
    sim.run()
    return sim


def check_closed_loop(sim: Simulation) -> CriterionResult:
    ev = sim.events
    elicits = [e for e in ev if e.kind == "Elicit"]
    sent = [e for e in ev if e.kind == "MsgSent" and e.detail.get("kind") == "elicitation"]
    answers = [e for e in ev if e.kind == "MsgSent" and e.detail.get("kind") == "elicitation_response"]
    replans = [e for e in ev if e.kind == "Replan"]
    ok = len(elicits) == 1 and len(sent) == 1 and len(answers) == 1
    detail = f"elicitations={len(elicits)} responses={len(answers)}"
    if ok:
        who, cid, at = elicits[0].subjects[0], elicits[0].detail["cid"], elicits[0].tick
        ok &= answers[0].detail["cid"] == cid and answers[0].subjects[1] == who
        before = [r.detail["epoch"] for r in replans if r.tick <= at]
        after = [r.detail["epoch"] for r in replans if r.tick > at and r.detail["trigger"] == "elicitation"]
        bumped = bool(after) and after[0] == (before[-1] if before else 0) + 1
        resumed = sum(1 for e in ev if e.kind == "ServiceStart" and e.subjects[0] == who
                      and e.tick > answers[0].tick)
        ok &= bumped and resumed >= 1
        detail += f" epoch_incremented={bumped} service_starts_after_answer={resumed}"
    return CriterionResult(3, "elicitation closed loop", ok, detail)


def dispatch_distances(sim: Simulation) -> list[float]:
    """Mean distance of dispatched flyers to their target, from the tick before the
    command takes effect until the last of them arrives."""
    replan = next((e for e in sim.events if e.kind == "Replan" and e.detail["dispatches"]), None)
    if replan is None:
        return []
    targets = {f: Position(*xy) for f, xy in replan.detail["dispatches"].items()}
    start = replan.tick + sim.config.message_delay  # first tick the command can act
    # trajectory[f][k] is the position at the end of tick k - 1
    series = []
    for k in range(start, len(next(iter(sim.trajectory.values())))):
        d = [distance(Position(*sim.trajectory[f][k]), c) for f, c in targets.items()]
        series.append(sum(d) / len(d))
        if max(d) == 0.0:
            break
    return series


def check_dispatch_convergence(sim: Simulation) -> CriterionResult:
    s = dispatch_distances(sim)
    ok = len(s) >= 2 and s[-1] == 0.0 and all(b < a for a, b in zip(s, s[1:]))
    return CriterionResult(10, "dispatch convergence", ok, "mean distance " + " > ".join(f"{x:.2f}" for x in s))


# -- 4 and 5. determinism and conservation ------------------------------------

def check_determinism(config: Optional[ScenarioConfig] = None) -> CriterionResult:
    config = config or default_config(seed=3)
    logs, results = [], []
    for _ in range(2):
        sim = Simulation(config)
        results.append(sim.run().to_json())
        logs.append(sim.event_log_text())
    ok = logs[0] == logs[1] and results[0] == results[1]
    return CriterionResult(4, "determinism", ok, f"{len(logs[0].splitlines())} log lines, identical={ok}")


def check_conservation(extra_violations: int = 0, configs: Sequence[ScenarioConfig] = ()) -> CriterionResult:
    configs = list(configs) or [default_config(environment=e, seed=1) for e in Environment]
    ticks = bad = 0
    for cfg in configs:
        r = run_batch(cfg)
        ticks += len(r.conservation)
        bad += sum(1 for g, s, f, i in r.conservation if g != s + f + i)
    bad += extra_violations
    return CriterionResult(5, "conservation", bad == 0, f"{ticks} ticks checked here, violations={bad}")


# -- 6. planner micro-worlds --------------------------------------------------

def random_micro_world(rng: np.random.Generator) -> tuple[WorldState, Task]:
    env = list(Environment)[int(rng.integers(3))]
    world = WorldState(env, 40.0, float(rng.choice([0.25, 0.5, 1.0])), int(rng.integers(1, 4)))
    cap_edge, cap_fly = int(rng.integers(2, 6)), 1

    def queue() -> list[QueueEntry]:
        return [QueueEntry(1000 + i, int(rng.integers(1, 9)), i == 0) for i in range(int(rng.integers(0, 4)))]

    for i in range(int(rng.integers(1, 4))):
        world.nodes[f"e{i:02d}"] = NodeView(f"e{i:02d}", False, _rpos_in(rng, 40), cap_edge, 15.0, queue())
    for i in range(int(rng.integers(0, 3))):
        fid = f"f{i:02d}"
        relays = int(rng.integers(0, 3)) if env is Environment.INTEGRATED else 0  # hand-offs need edges
        v = NodeView(fid, True, _rpos_in(rng, 40), cap_fly, 20.0, queue(),
                     relay_queue=[2000 + j for j in range(relays)])
        if rng.random() < 0.2:
            v.waypoint = _rpos_in(rng, 40)
        world.nodes[fid] = v
    task = Task(1, _rpos_in(rng, 40), int(rng.integers(1, 9)), 0, 25)
    return world, task


def _rpos_in(rng: np.random.Generator, size: float) -> Position:
    return Position(float(rng.uniform(0, size)), float(rng.uniform(0, size)))


def enumerate_feasible(world: WorldState, origin: Position) -> list[Route]:
    """All (executor, via) pairs, filtered by the reachability rules written out directly."""
    env, out = world.environment, []
    nodes = sorted(world.nodes.values(), key=lambda n: n.id)
    for ex in nodes:
        direct_ok = (env.flyers_active and not ex.moving) if ex.flying else env.edges_active
        if direct_ok and distance(origin, ex.pos) <= ex.reach:
            out.append(Route(ex.id))
        if ex.flying or env is not Environment.INTEGRATED:
            continue
        for via in nodes:
            if (via.flying and not via.moving and distance(origin, via.pos) <= via.reach
                    and distance(ex.pos, via.pos) <= via.reach):
                out.append(Route(ex.id, via.id))
    return out


def check_planner(n: int = 100, seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(seed)
    bad, compared, i = [], 0, -1
    while compared < n:
        i += 1
        world, task = random_micro_world(rng)
        routes = enumerate_feasible(world, task.origin)
        chosen = admit(world, task)
        if not routes:
            if chosen is not None:
                bad.append(i)
            continue
        compared += 1
        best = min(estimate_completion(world, task, r) for r in routes)
        if chosen is None or estimate_completion(world, task, chosen) != best:
            bad.append(i)
        elif world.environment is Environment.INTEGRATED:
            lowest = min((r for r in routes if estimate_completion(world, task, r) == best), key=Route.sort_key)
            if chosen != lowest:
                bad.append(i)
    return CriterionResult(6, "planner optimality on micro-worlds", not bad,
                           f"{compared} worlds with a feasible route ({i + 1} drawn), mismatches={bad}")


# -- 7, 8, 9. sweep orderings -------------------------------------------------

def _ordered(result: SweepResult, env: Environment) -> list[Cell]:
    return [result.cell(env, v) for v in sorted(result.values)]


def check_fig3(result: SweepResult) -> CriterionResult:
    need = (Environment.CPN_ONLY, Environment.LAE_ONLY, Environment.INTEGRATED)
    if any(e not in result.environments for e in need):
        return CriterionResult(7, "task-count ordering", False, "sweep lacks an environment")
    margins, ok = [], True
    for env in need:
        cells = _ordered(result, env)
        worst = min((a.mean + 2 * pooled_se(a, b) - b.mean for a, b in zip(cells, cells[1:])), default=0.0)
        ok &= worst >= 0
        margins.append(f"{env.value} monotone slack {worst:+.4f}")
    k = max(result.values)
    i, c, l = (result.cell(e, k) for e in (Environment.INTEGRATED, Environment.CPN_ONLY, Environment.LAE_ONLY))
    g1 = (i.mean - c.mean) - 2 * pooled_se(i, c)
    g2 = (c.mean - l.mean) - 2 * pooled_se(c, l)
    ok &= g1 > 0 and g2 > 0
    margins.append(f"K={int(k)}: I-C beyond 2SE {g1:+.4f}, C-L beyond 2SE {g2:+.4f}")
    return CriterionResult(7, "task-count ordering", ok, "; ".join(margins))


def check_fig4(result: SweepResult) -> CriterionResult:
    need = (Environment.CPN_ONLY, Environment.LAE_ONLY, Environment.INTEGRATED)
    if any(e not in result.environments for e in need):
        return CriterionResult(8, "hotspot ordering", False, "sweep lacks an environment")
    lo, hi = min(result.values), max(result.values)
    drops, parts, ok = {}, [], True
    for env in need:
        a, b = result.cell(env, lo), result.cell(env, hi)
        drops[env] = a.mean - b.mean
        if env is not Environment.INTEGRATED:
            m = drops[env] - 2 * pooled_se(a, b)
            ok &= m > 0
            parts.append(f"{env.value} drop {drops[env]:.4f} (beyond 2SE {m:+.4f})")
    dominance = min(result.cell(Environment.INTEGRATED, v).mean
                    - max(result.cell(Environment.CPN_ONLY, v).mean, result.cell(Environment.LAE_ONLY, v).mean)
                    for v in result.values)
    ok &= dominance >= 0
    di = drops[Environment.INTEGRATED]
    ok &= di < drops[Environment.CPN_ONLY] and di < drops[Environment.LAE_ONLY]
    parts.append(f"Integrated drop {di:.4f}; min lead over best baseline {dominance:+.4f}")
    return CriterionResult(8, "hotspot ordering", ok, "; ".join(parts))


def check_duplex(result: DuplexResult) -> CriterionResult:
    gap = result.enabled.mean - result.disabled.mean
    margin = gap - 2 * pooled_se(result.enabled, result.disabled)
    later = result.first_replan_disabled > result.first_replan_enabled
    return CriterionResult(
        9, "duplex benefit", margin > 0 and later,
        f"on {result.enabled.mean:.4f} vs off {result.disabled.mean:.4f} (beyond 2SE {margin:+.4f}); "
        f"first replan {result.first_replan_enabled:g} vs {result.first_replan_disabled:g}")


# -- gate ---------------------------------------------------------------------

def check_acceptance(fig3: SweepResult, fig4: SweepResult, duplex: Optional[DuplexResult] = None, *,
                     structural: bool = True, min_seeds: int = MIN_SEEDS,
                     out: Optional[TextIO] = None, quiet: bool = False) -> AcceptanceReport:
    """Evaluate every criterion; the table goes to ``out`` (stdout at call time) unless ``quiet``."""
    report = AcceptanceReport()
    for name, res in (("fig3", fig3), ("fig4", fig4)):
        if res.base is not None:
            try:
                ScenarioConfig.from_dict(dict(res.base))
            except ScenarioError as exc:
                report.refused = f"scenario validation failed for {name} results: {exc}"
                break
    if report.refused is None:
        seeds = min(fig3.min_seeds, fig4.min_seeds, *([duplex.enabled.n, duplex.disabled.n] if duplex else []))
        if seeds < min_seeds:
            report.refused = f"insufficient replication: {seeds} seed(s) per point, at least {min_seeds} required"
    if report.refused is None:
        if structural:
            sim = scripted_surge()
            report.rows += [check_roundtrip(), check_transition_table(), check_closed_loop(sim),
                            check_determinism(), check_planner(), check_dispatch_convergence(sim)]
            report.rows.append(check_conservation(fig3.conservation_violations + fig4.conservation_violations))
        report.rows += [check_fig3(fig3), check_fig4(fig4)]
        report.rows.append(check_duplex(duplex) if duplex is not None
                           else CriterionResult(9, "duplex benefit", None, "no duplex result supplied"))
    if not quiet:
        (out or sys.stdout).write(report.table())
    return report
