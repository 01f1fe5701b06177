"""Deterministic discrete-time simulation loop.

Each tick runs five phases in a fixed order, iterating agents by ascending id:

1. task arrivals and delivery of due protocol messages
2. perception: agents report position, load and sighted requests
3. reasoning: the host handles reports/acks, then elicitations, then a
   periodic replan when due, then admits pending tasks
4. action: agents apply commands, move, hand off relays, serve queues
5. reflection: monitors observe local demand and may elicit
"""

from __future__ import annotations

import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .agents import Agent, ReflectionMonitor
from .model import EdgeNode, FlyingNode, ScenarioConfig, Task, TaskStatus, generate_tasks, place_nodes
from .orchestrator import Orchestrator, Plan
from .protocol import HOST_ID, HostSession, Kind, Message, PlanCommand, decode, encode, host_dispatch

KIND_ORDER = ("TaskArrival", "MsgDelivered", "Replan", "MsgSent", "QueueEnter", "Move",
              "ServiceStart", "ServiceEnd", "TaskFailed", "Elicit")
_PRIORITY = {k: i for i, k in enumerate(KIND_ORDER)}


class SimulationAbort(RuntimeError):
    """Internal inconsistency or non-termination; the run cannot continue."""

    def __init__(self, msg: str, seed: Optional[int] = None):
        super().__init__(msg if seed is None else f"seed {seed}: {msg}")
        self.seed = seed


@dataclass(frozen=True)
class EventRecord:
    tick: int
    kind: str
    subjects: tuple[str, ...]
    detail: dict

    def to_json(self) -> str:
        return json.dumps({"tick": self.tick, "kind": self.kind, "subjects": list(self.subjects),
                           "detail": self.detail}, sort_keys=True, separators=(",", ":"))


@dataclass
class RunResult:
    config_hash: str
    seed: int
    generated: int
    succeeded: int
    failed: int
    success_rate: float
    ticks: int
    elicitations: int
    elicitation_responses: int
    replans: int
    first_replan_tick: Optional[int]
    first_dispatch_tick: Optional[int]
    utilization: list[float] = field(default_factory=list)
    conservation: list[list[int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


@dataclass
class _Envelope:
    due: int
    seq: int
    dest: str
    data: bytes


class Simulation:
    def __init__(self, config: ScenarioConfig, tasks: Optional[Sequence[Task]] = None,
                 record_events: bool = True,
                 nodes: Optional[tuple[Sequence[EdgeNode], Sequence[FlyingNode]]] = None):
        self.config = config
        env = config.environment
        edges, flyers = (list(nodes[0]), list(nodes[1])) if nodes is not None else place_nodes(config)
        edges = edges if env.edges_active else []
        flyers = flyers if env.flyers_active else []
        self.nodes = {n.id: n for n in (*edges, *flyers)}
        self.agents: dict[str, Agent] = {}
        for n in (*edges, *flyers):
            factor = config.deviation_factor if n in flyers else config.edge_deviation_factor
            mon = ReflectionMonitor(config.reflection_window, config.derived_baseline(n.reach), factor,
                                    config.cooldown_reset)
            self.agents[n.id] = Agent(n, mon)
        self.order = sorted(self.agents)
        task_list = list(tasks) if tasks is not None else generate_tasks(config)
        self.tasks: dict[int, Task] = {t.id: t for t in task_list}
        self._arrivals: dict[int, list[int]] = {}
        for t in task_list:
            self._arrivals.setdefault(t.arrival_tick, []).append(t.id)
        self._last_arrival = max(self._arrivals, default=0)
        self._origins = np.array([[t.origin.x, t.origin.y] for t in task_list]).reshape(-1, 2)
        self._ids = np.array([t.id for t in task_list], dtype=int)
        self.pool: set[int] = set()
        self.orchestrator = Orchestrator(config, edges, flyers, log=self.log)
        self.session = HostSession(self.orchestrator, agents=set(self.agents))
        self._wire: list[_Envelope] = []
        self._seq = 0
        self._host_inbox: list[Message] = []
        self._agent_inbox: dict[str, list[Message]] = {a: [] for a in self.agents}
        self.record_events = record_events
        self.events: list[EventRecord] = []
        self._tick_events: list[EventRecord] = []
        self.generated = self.succeeded = self.failed = 0
        self.elicitations = 0
        self.tick = 0
        self.utilization: list[float] = []
        self.conservation: list[list[int]] = []
        self.trajectory: dict[str, list[tuple[float, float]]] = {f.id: [(f.pos.x, f.pos.y)] for f in flyers}
        self.first_dispatch_tick: Optional[int] = None

    # bookkeeping ------------------------------------------------------------
    def log(self, tick: int, kind: str, subjects: tuple, detail: dict) -> None:
        if self.record_events:
            self._tick_events.append(EventRecord(tick, kind, tuple(subjects), detail))

    def settle(self, completed: Iterable[int], failed: Iterable[int]) -> None:
        self.succeeded += len(list(completed))
        self.failed += len(list(failed))

    def send(self, msg: Message, dest: str, tick: int) -> None:
        data = encode(msg)
        self._seq += 1
        self._wire.append(_Envelope(tick + self.config.message_delay, self._seq, dest, data))
        if msg.kind is Kind.ELICITATION:
            self.elicitations += 1
        self.log(tick, "MsgSent", (msg.sender, dest), {"kind": msg.kind.value, "cid": msg.correlation_id,
                                                       "epoch": msg.epoch})

    def _send_plan(self, plan: Plan, tick: int) -> None:
        if plan.dispatches and self.first_dispatch_tick is None:
            self.first_dispatch_tick = tick
        for agent_id, d in plan.directives().items():
            self.send(self.session.request(agent_id, PlanCommand(plan.epoch, (d,))), agent_id, tick)

    # phases -----------------------------------------------------------------
    def _deliver(self, tick: int) -> None:
        due = [e for e in self._wire if e.due <= tick]
        self._wire = [e for e in self._wire if e.due > tick]
        for env in sorted(due, key=lambda e: e.seq):
            msg = decode(env.data)
            self.log(tick, "MsgDelivered", (msg.sender, env.dest), {"kind": msg.kind.value,
                                                                   "cid": msg.correlation_id})
            if env.dest == HOST_ID:
                self._host_inbox.append(msg)
            else:
                self._agent_inbox[env.dest].append(msg)

    def _visible(self, agent: Agent, mask: np.ndarray) -> np.ndarray:
        p = agent.node.pos
        d2 = (self._origins[:, 0] - p.x) ** 2 + (self._origins[:, 1] - p.y) ** 2
        return mask & (d2 <= agent.node.reach ** 2)

    def _perceive(self, tick: int) -> None:
        if tick % self.config.report_interval:
            return
        pooled = np.isin(self._ids, list(self.pool)) if self.pool else np.zeros(len(self._ids), bool)
        for aid in self.order:
            agent = self.agents[aid]
            seen = [self.tasks[int(t)] for t in self._ids[self._visible(agent, pooled)]]
            self.send(agent.report(self, tick, seen), HOST_ID, tick)

    def _reason(self, tick: int) -> None:
        orch = self.orchestrator
        orch.begin_tick(tick)
        inbox, self._host_inbox = self._host_inbox, []
        # stable by sender: preserves each agent's send order
        regular = sorted((m for m in inbox if m.kind is not Kind.ELICITATION), key=lambda m: m.sender)
        elicits = sorted((m for m in inbox if m.kind is Kind.ELICITATION), key=lambda m: m.sender)
        for msg in regular + elicits:
            before = len(orch.plans)
            replies = host_dispatch(self.session, msg)
            for plan in orch.plans[before:]:
                if plan.dispatches and self.first_dispatch_tick is None:
                    self.first_dispatch_tick = tick
            for r in replies:
                dest = msg.sender if r.kind is Kind.ELICITATION_RESPONSE else r.payload.directives[0].agent_id
                self.send(r, dest, tick)
        if tick > 0 and tick % self.config.replan_interval == 0:
            self._send_plan(orch.replan("periodic"), tick)
        self._send_plan(orch.admission(), tick)

    def _act(self, tick: int) -> None:
        for aid in self.order:
            agent = self.agents[aid]
            inbox, self._agent_inbox[aid] = self._agent_inbox[aid], []
            for msg in inbox:
                dropped = agent.stale_dropped
                ack = agent.receive(self, msg, tick)
                if agent.stale_dropped > dropped:
                    self.log(tick, "MsgDelivered", (aid,), {"cid": msg.correlation_id, "dropped": "stale_epoch"})
                if ack is not None:
                    self.send(ack, HOST_ID, tick)
            agent.act(self, tick)
            if agent.flying:
                self.trajectory[aid].append((agent.node.pos.x, agent.node.pos.y))
        for tid in sorted(self.pool):
            task = self.tasks[tid]
            if task.expired(tick):
                self.pool.discard(tid)
                task.advance(TaskStatus.FAILED)
                task.end_tick = tick
                self.failed += 1
                self.log(tick, "TaskFailed", (f"t{tid:05d}",), {"at": "pending"})

    def _reflect(self, tick: int) -> None:
        waiting = np.array([t.start_tick is None and not t.status.terminal and t.arrival_tick <= tick
                            for t in self.tasks.values()], dtype=bool).reshape(-1)
        for aid in self.order:
            agent = self.agents[aid]
            count = int(self._visible(agent, waiting).sum())
            msg = agent.reflect(self, tick, count)
            if msg is not None:
                self.send(msg, HOST_ID, tick)

    def _check(self, tick: int) -> None:
        in_flight = sum(1 for t in self.tasks.values() if t.arrival_tick <= tick and not t.status.terminal)
        row = [self.generated, self.succeeded, self.failed, in_flight]
        self.conservation.append(row)
        if self.generated != self.succeeded + self.failed + in_flight:
            raise SimulationAbort(f"tick {tick}: conservation violated {row}", self.config.seed)
        for agent in self.agents.values():
            if not agent.custody_balanced():
                raise SimulationAbort(f"tick {tick}: custody imbalance at {agent.id}", self.config.seed)

    def step(self) -> None:
        tick = self.tick
        for tid in self._arrivals.get(tick, ()):
            self.pool.add(tid)
            self.generated += 1
            self.log(tick, "TaskArrival", (f"t{tid:05d}",), {"origin": self.tasks[tid].origin.as_list()})
        self._deliver(tick)
        self._perceive(tick)
        self._reason(tick)
        self._act(tick)
        self._reflect(tick)
        self.utilization.append(
            sum(a.utilization for a in self.agents.values()) / len(self.agents) if self.agents else 0.0)
        self._check(tick)
        self._tick_events.sort(key=lambda e: (_PRIORITY[e.kind], e.subjects))
        self.events.extend(self._tick_events)
        self._tick_events = []
        self.tick += 1

    @property
    def finished(self) -> bool:
        return self.tick > self._last_arrival and self.generated == self.succeeded + self.failed

    def run(self) -> RunResult:
        horizon = self.config.run_horizon
        while not self.finished:
            if self.tick > horizon:
                raise SimulationAbort(f"run exceeded horizon of {horizon} ticks", self.config.seed)
            self.step()
        return self.result()

    def result(self) -> RunResult:
        cfg = self.config
        return RunResult(
            config_hash=cfg.config_hash(),
            seed=cfg.seed,
            generated=self.generated,
            succeeded=self.succeeded,
            failed=self.failed,
            success_rate=self.succeeded / self.generated if self.generated else 0.0,
            ticks=self.tick,
            elicitations=self.elicitations,
            elicitation_responses=self.session.elicitations_answered,
            replans=self.orchestrator.replans,
            first_replan_tick=self.orchestrator.first_replan_tick,
            first_dispatch_tick=self.first_dispatch_tick,
            utilization=[round(u, 6) for u in self.utilization],
            conservation=self.conservation,
        )

    def write_event_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.events:
                fh.write(e.to_json() + "\n")

    def event_log_text(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def run_batch(config: ScenarioConfig, event_log: Optional[str | Path] = None) -> RunResult:
    sim = Simulation(config, record_events=event_log is not None)
    result = sim.run()
    if event_log is not None:
        sim.write_event_log(event_log)
    return result


@dataclass
class EnsembleResult:
    runs: list[RunResult]
    mean: float
    stderr: float

    @property
    def rates(self) -> list[float]:
        return [r.success_rate for r in self.runs]


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    se = statistics.stdev(values) / math.sqrt(n) if n > 1 else 0.0
    return mean, se


def _run_one(config: ScenarioConfig) -> RunResult:
    try:
        return run_batch(config)
    except SimulationAbort:
        raise
    except Exception as exc:
        raise SimulationAbort(f"{type(exc).__name__}: {exc}", config.seed) from exc


def run_many(configs: Sequence[ScenarioConfig], parallel: int = 1) -> list[RunResult]:
    if parallel > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_one, configs, chunksize=max(1, len(configs) // (4 * parallel))))
    return [_run_one(c) for c in configs]


def run_seeded_ensemble(config: ScenarioConfig, seeds: Sequence[int], parallel: int = 1) -> EnsembleResult:
    if len(set(seeds)) != len(seeds):
        raise ValueError("ensemble seeds must be distinct")
    runs = run_many([config.replace(seed=s) for s in seeds], parallel)
    runs.sort(key=lambda r: seeds.index(r.seed))
    mean, se = mean_stderr([r.success_rate for r in runs])
    return EnsembleResult(runs, mean, se)
