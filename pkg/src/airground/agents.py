"""Per-tick behaviour of edge and flying agents."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Union

from .model import EdgeNode, Environment, FlyingNode, Position, Task, TaskStatus, distance
from .protocol import (
    AbnormalData,
    Ack,
    AgentMeta,
    AgentState,
    Directive,
    ElicitationBody,
    Event,
    Kind,
    Lifecycle,
    Message,
    PerceptionReport,
    QueueEntry,
    Role,
    ServiceInfo,
    Sighting,
    transition,
)

if TYPE_CHECKING:
    from .engine import Simulation

Node = Union[EdgeNode, FlyingNode]


class RelayError(RuntimeError):
    pass


class RelayRangeError(RelayError):
    pass


class RelayEnvironmentError(RelayError):
    pass


class PreprocessError(RuntimeError):
    pass


# -- reflection ---------------------------------------------------------------

@dataclass
class Deviation:
    kind: str
    magnitude: float
    location: Position


@dataclass
class ReflectionMonitor:
    """Sliding window of locally observed request counts compared against a baseline."""

    window_len: int
    baseline: float
    deviation_factor: float
    cooldown_reset: int
    window: deque = field(default_factory=deque)
    cooldown: int = 0

    def __post_init__(self):
        if self.deviation_factor <= 1:
            raise ValueError("deviation_factor must be > 1")
        if self.baseline <= 0:
            raise ValueError("baseline must be > 0")
        self.window = deque(self.window, maxlen=self.window_len)

    def observe(self, count: float) -> None:
        self.window.append(count)

    @property
    def mean(self) -> float:
        return sum(self.window) / len(self.window) if self.window else 0.0

    @property
    def ready(self) -> bool:
        return len(self.window) >= self.window_len

    def cool(self) -> None:
        if self.cooldown > 0:
            self.cooldown -= 1


def detect_deviation(monitor: ReflectionMonitor, position: Position) -> Optional[Deviation]:
    if monitor.cooldown > 0:
        monitor.cooldown -= 1
        return None
    if not monitor.ready:
        return None
    mean = monitor.mean
    if mean >= monitor.deviation_factor * monitor.baseline:
        monitor.cooldown = monitor.cooldown_reset
        return Deviation("LoadSurge", mean / monitor.baseline, position)
    return None


# -- primitives ---------------------------------------------------------------

@dataclass
class ServiceOutcome:
    started: list[int] = field(default_factory=list)
    completed: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)
    used: int = 0


def expire_queue(node: Node, tasks: dict[int, Task], tick: int) -> list[int]:
    """Drop unstarted queued tasks whose waiting time exceeds their deadline."""
    failed = [tid for tid in node.queue if tasks[tid].expired(tick)]
    for tid in failed:
        node.queue.remove(tid)
        tasks[tid].advance(TaskStatus.FAILED)
        tasks[tid].end_tick = tick
    return failed


def serve_queue(node: Node, tasks: dict[int, Task], tick: int, *, budget: Optional[int] = None,
                allow_start: bool = True) -> ServiceOutcome:
    """One tick of FIFO, non-preemptive service.

    Expired tasks are removed first.  Leftover capacity flows to the next task in
    line once the head completes, so at most one task is ever in service.
    """
    out = ServiceOutcome(failed=expire_queue(node, tasks, tick))
    budget = node.capacity if budget is None else budget
    while budget > 0 and node.queue:
        task = tasks[node.queue[0]]
        if task.queue_arrival_tick is not None and task.queue_arrival_tick > tick:
            raise RuntimeError(f"task {task.id} in queue before its arrival tick")
        if task.status is TaskStatus.QUEUED:
            if not allow_start:
                break
            task.advance(TaskStatus.RUNNING)
            task.start_tick = tick
            out.started.append(task.id)
        work = min(budget, task.remaining)
        task.remaining -= work
        budget -= work
        out.used += work
        if task.remaining == 0:
            node.queue.pop(0)
            task.advance(TaskStatus.SUCCEEDED)
            task.end_tick = tick
            out.completed.append(task.id)
    return out


def move_toward(node: FlyingNode, dt: int = 1, world_size: Optional[float] = None) -> Position:
    if node.waypoint is None:
        return node.pos
    wp = node.waypoint
    d = distance(node.pos, wp)
    step = node.speed * dt
    if d <= step:
        node.pos = wp
        node.waypoint = None
    else:
        f = step / d
        node.pos = Position(node.pos.x + (wp.x - node.pos.x) * f, node.pos.y + (wp.y - node.pos.y) * f)
    if world_size is not None:
        node.pos = node.pos.clamp(world_size)
    return node.pos


def preprocess(task: Task, factor: float) -> Task:
    if not 0 < factor <= 1:
        raise PreprocessError(f"preprocessing factor {factor} outside (0, 1]")
    if task.preprocessed:
        raise PreprocessError(f"task {task.id} already preprocessed")
    if task.status is not TaskStatus.RELAYING:
        raise PreprocessError(f"task {task.id} is {task.status.value}, not Relaying")
    task.demand = math.ceil(factor * task.demand)
    task.remaining = task.demand
    task.preprocessed = True
    return task


def relay(task: Task, via: FlyingNode, target: EdgeNode, tick: int, hop_delay: int,
          environment: Environment) -> Task:
    """Hand a task from a flying node to an edge node; it enters the queue ``hop_delay`` ticks later."""
    if environment is not Environment.INTEGRATED:
        raise RelayEnvironmentError(f"relay not available in {environment.value}")
    if task.relayed:
        raise RelayError(f"task {task.id} already relayed")
    if distance(task.origin, via.pos) > via.link_radius:
        raise RelayRangeError(f"task {task.id} origin out of {via.id} link range")
    if distance(target.pos, via.pos) > via.link_radius:
        raise RelayRangeError(f"edge {target.id} out of {via.id} link range")
    if task.status is not TaskStatus.RELAYING:
        task.advance(TaskStatus.RELAYING)
    task.relayed = True
    task.queue_arrival_tick = tick + hop_delay
    task.holder = target.id
    return task


# -- runtime agent ------------------------------------------------------------

@dataclass
class RelayJob:
    task_id: int
    target: str
    preprocess: bool


class Agent:
    """An edge or flying agent stepped by the simulation engine."""

    def __init__(self, node: Node, monitor: ReflectionMonitor):
        self.node = node
        self.id = node.id
        self.flying = isinstance(node, FlyingNode)
        self.state = AgentState()
        self.monitor = monitor
        self.next_cid = 1
        self.max_epoch = 0
        self.inbound: list[int] = []
        self.relay_jobs: deque[RelayJob] = deque()
        self.done_since_report: list[int] = []
        self.forwarded_since_report: list[int] = []
        self.utilization = 0.0
        self.entered = self.completed = self.failed = self.released = self.forwarded = 0
        self.stale_dropped = 0

    # protocol ---------------------------------------------------------------
    def _cid(self) -> int:
        cid = self.next_cid
        self.next_cid += 1
        return cid

    def custody_balanced(self) -> bool:
        held = len(self.node.queue) + len(self.relay_jobs)
        return self.entered == self.completed + self.failed + self.released + self.forwarded + held

    def held_tasks(self) -> list[int]:
        return list(self.node.queue) + [j.task_id for j in self.relay_jobs] + list(self.inbound)

    def busy(self) -> bool:
        return bool(self.node.queue or self.relay_jobs or self.inbound
                    or (self.flying and self.node.waypoint is not None))

    def report(self, sim: "Simulation", tick: int, sightings: list[Task]) -> Message:
        node = self.node
        rep = PerceptionReport(
            agent_id=self.id,
            tick=tick,
            position=node.pos,
            queue_depth=len(node.queue),
            utilization=self.utilization,
            arrival_rate=self.monitor.mean,
            waypoint=node.waypoint if self.flying else None,
            queue=tuple(QueueEntry(t, sim.tasks[t].remaining, sim.tasks[t].start_tick is not None)
                        for t in node.queue),
            relay_queue=tuple(j.task_id for j in self.relay_jobs),
            forwarded=tuple(self.forwarded_since_report),
            done=tuple(self.done_since_report),
            sightings=tuple(Sighting(t.id, t.origin, t.demand, t.arrival_tick) for t in sightings),
        )
        self.done_since_report.clear()
        self.forwarded_since_report.clear()
        return Message(Kind.REPORT, self._cid(), self.id, self.max_epoch, rep)

    def receive(self, sim: "Simulation", msg: Message, tick: int) -> Optional[Message]:
        """Apply a host message; returns the Ack response for requests."""
        if msg.epoch < self.max_epoch:
            self.stale_dropped += 1
            return None
        self.max_epoch = msg.epoch
        directive = msg.payload.for_agent(self.id)
        if msg.kind is Kind.ELICITATION_RESPONSE:
            if self.state.pending_elicitation != msg.correlation_id:
                raise RuntimeError(f"{self.id}: unexpected elicitation response {msg.correlation_id}")
            self.state = transition(self.state, Event.ELICITATION_ANSWERED)
            self.apply(sim, directive, tick)
            return None
        ack = self.apply(sim, directive, tick)
        return Message(Kind.RESPONSE, msg.correlation_id, self.id, self.max_epoch, ack)

    def apply(self, sim: "Simulation", d: Directive, tick: int) -> Ack:
        accepted, rejected, released, kept = [], [], [], []
        node = self.node
        for tid in d.release:
            task = sim.tasks[tid]
            if tid in node.queue and task.start_tick is None:
                node.queue.remove(tid)
            elif any(j.task_id == tid for j in self.relay_jobs):
                self.relay_jobs = deque(j for j in self.relay_jobs if j.task_id != tid)
            else:
                kept.append(tid)
                continue
            task.advance(TaskStatus.PENDING)
            task.holder = None
            task.queue_arrival_tick = None
            sim.pool.add(tid)
            released.append(tid)
            self.released += 1
        if self.flying and d.waypoint is not None:
            node.waypoint = d.waypoint.clamp(sim.config.world_size)
        by_task: dict[int, list] = {}
        for a in d.assignments:
            by_task.setdefault(a.task_id, []).append(a)
        for tid, roles in by_task.items():
            task = sim.tasks[tid]
            if self._accept(sim, task, roles, tick):
                accepted.append(tid)
            else:
                rejected.append(tid)
        if self.state.current is Lifecycle.IDLE and not d.empty:
            self.state = transition(self.state, Event.PLAN_RECEIVED)
        return Ack(tuple(accepted), tuple(rejected), tuple(released), tuple(kept))

    def _accept(self, sim: "Simulation", task: Task, roles: list, tick: int) -> bool:
        if task.status is not TaskStatus.PENDING or task.expired(tick):
            return False
        node = self.node
        if distance(task.origin, node.pos) > node.reach:
            return False
        role_set = {a.role for a in roles}
        if Role.RELAY in role_set:
            target_id = next(a.target for a in roles if a.role is Role.RELAY)
            target = sim.nodes.get(target_id)
            if (not self.flying or target is None or sim.config.environment is not Environment.INTEGRATED
                    or distance(target.pos, node.pos) > node.link_radius or task.relayed):
                return False
            task.advance(TaskStatus.RELAYING)
            task.holder = self.id
            self.relay_jobs.append(RelayJob(task.id, target_id, Role.PREPROCESS in role_set))
        else:
            task.advance(TaskStatus.QUEUED)
            task.holder = self.id
            task.queue_arrival_tick = tick
            node.queue.append(task.id)
            sim.log(tick, "QueueEnter", (self.id, _tid(task.id)), {})
        sim.pool.discard(task.id)
        self.entered += 1
        return True

    # action -----------------------------------------------------------------
    def act(self, sim: "Simulation", tick: int) -> None:
        node = self.node
        arrived = [t for t in self.inbound if sim.tasks[t].queue_arrival_tick <= tick]
        for tid in arrived:
            self.inbound.remove(tid)
            task = sim.tasks[tid]
            task.advance(TaskStatus.QUEUED)
            node.queue.append(tid)
            self.entered += 1
            sim.log(tick, "QueueEnter", (self.id, _tid(tid)), {"relayed": True})
        paused = self.state.current is Lifecycle.ELICITATION
        budget = node.capacity
        if self.flying:
            before = node.pos
            move_toward(node, 1, sim.config.world_size)
            if node.pos != before:
                sim.log(tick, "Move", (self.id,), {"pos": node.pos.as_list(), "step": distance(before, node.pos)})
            if self.relay_jobs and not paused:
                self._hand_off(sim, tick)
                budget = 0
        out = serve_queue(node, sim.tasks, tick, budget=budget, allow_start=not paused)
        for tid in out.failed:
            sim.log(tick, "TaskFailed", (_tid(tid),), {"at": self.id})
        for tid in out.started:
            sim.log(tick, "ServiceStart", (self.id, _tid(tid)), {})
        for tid in out.completed:
            sim.log(tick, "ServiceEnd", (self.id, _tid(tid)), {})
        self.failed += len(out.failed)
        self.completed += len(out.completed)
        self.done_since_report.extend(out.failed + out.completed)
        sim.settle(out.completed, out.failed)
        # expired relay jobs are dropped at the flyer too
        for job in [j for j in self.relay_jobs if sim.tasks[j.task_id].expired(tick)]:
            self.relay_jobs.remove(job)
            task = sim.tasks[job.task_id]
            task.advance(TaskStatus.FAILED)
            task.end_tick = tick
            self.failed += 1
            self.done_since_report.append(task.id)
            sim.log(tick, "TaskFailed", (_tid(task.id),), {"at": self.id})
            sim.settle([], [task.id])
        self.utilization = (node.capacity if budget == 0 else out.used) / node.capacity
        if self.state.current is Lifecycle.ACTION and not self.busy():
            self.state = transition(self.state, Event.TASK_BATCH_DONE)

    def _hand_off(self, sim: "Simulation", tick: int) -> None:
        job = self.relay_jobs.popleft()
        task = sim.tasks[job.task_id]
        if job.preprocess:
            preprocess(task, sim.config.preprocessing_factor)
        target = sim.nodes[job.target]
        relay(task, self.node, target, tick, sim.config.relay_hop_delay, sim.config.environment)
        sim.agents[job.target].inbound.append(task.id)
        self.forwarded_since_report.append(task.id)
        self.forwarded += 1
        sim.log(tick, "MsgSent", (self.id, job.target, _tid(task.id)),
                {"relay": True, "arrive": task.queue_arrival_tick, "demand": task.demand})

    # reflection -------------------------------------------------------------
    def reflect(self, sim: "Simulation", tick: int, observed: int) -> Optional[Message]:
        self.monitor.observe(observed)
        can_elicit = (sim.config.elicitation_enabled and self.state.current is Lifecycle.ACTION
                      and bool(self.held_tasks()))
        if not can_elicit:
            self.monitor.cool()
            return None
        dev = detect_deviation(self.monitor, self.node.pos)
        if dev is None:
            return None
        cid = self._cid()
        self.state = transition(self.state, Event.DEVIATION_DETECTED, cid)
        body = ElicitationBody(
            AgentMeta(self.id, self.node.pos, self.node.capacity, len(self.node.queue)),
            ServiceInfo(tuple(self.held_tasks())),
            AbnormalData(dev.kind, dev.magnitude, dev.location),
        )
        sim.log(tick, "Elicit", (self.id,), {"cid": cid, "magnitude": dev.magnitude})
        return Message(Kind.ELICITATION, cid, self.id, self.max_epoch, body)


def _tid(task_id: int) -> str:
    return f"t{task_id:05d}"
