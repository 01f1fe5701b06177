"""Duplex host/agent protocol: message envelopes, line codec, agent lifecycle and host session.

Wire format: one UTF-8 JSON object per line, keys sorted, compact separators::

    {"correlation_id":7,"epoch":3,"kind":"report","payload":{...},"sender":"f04"}

The host sends ``request`` (carrying a PlanCommand) and ``elicitation_response``;
agents send ``report``, ``response`` (an Ack) and ``elicitation``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Union

from .model import Position

U64_MAX = 2**64 - 1
HOST_ID = "host"


class ProtocolError(Exception):
    """Base class for protocol violations."""


class EncodeError(ProtocolError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


class DecodeError(ProtocolError):
    pass


class FramingError(DecodeError):
    pass


class Utf8Error(DecodeError):
    pass


class MalformedDocumentError(DecodeError):
    pass


class UnknownKindError(DecodeError):
    pass


class CorrelationOverflowError(DecodeError):
    pass


class IllegalTransition(ProtocolError):
    def __init__(self, state: "Lifecycle", event: "Event"):
        super().__init__(f"illegal transition: {state.value} + {event.value}")
        self.state = state
        self.event = event


class DuplicateCorrelationError(ProtocolError):
    pass


class StaleEpochError(ProtocolError):
    pass


class UnmatchedResponseError(ProtocolError):
    pass


class UnknownAgentError(ProtocolError):
    pass


class Kind(str, enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"
    ELICITATION = "elicitation"
    ELICITATION_RESPONSE = "elicitation_response"
    REPORT = "report"


# -- payloads -----------------------------------------------------------------

class Role(str, enum.Enum):
    EXECUTE = "execute"
    RELAY = "relay"
    PREPROCESS = "preprocess"


@dataclass(frozen=True)
class Assignment:
    task_id: int
    role: Role
    target: Optional[str] = None


@dataclass(frozen=True)
class Directive:
    agent_id: str
    waypoint: Optional[Position] = None
    assignments: tuple[Assignment, ...] = ()
    release: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return self.waypoint is None and not self.assignments and not self.release


@dataclass(frozen=True)
class PlanCommand:
    epoch: int
    directives: tuple[Directive, ...] = ()

    def for_agent(self, agent_id: str) -> Directive:
        for d in self.directives:
            if d.agent_id == agent_id:
                return d
        return Directive(agent_id)


@dataclass(frozen=True)
class Ack:
    accepted: tuple[int, ...] = ()
    rejected: tuple[int, ...] = ()
    released: tuple[int, ...] = ()
    kept: tuple[int, ...] = ()


@dataclass(frozen=True)
class QueueEntry:
    task_id: int
    remaining: int
    started: bool


@dataclass(frozen=True)
class Sighting:
    task_id: int
    origin: Position
    demand: int
    arrival_tick: int


@dataclass(frozen=True)
class PerceptionReport:
    agent_id: str
    tick: int
    position: Position
    queue_depth: int
    utilization: float
    arrival_rate: float
    waypoint: Optional[Position] = None
    queue: tuple[QueueEntry, ...] = ()
    relay_queue: tuple[int, ...] = ()
    forwarded: tuple[int, ...] = ()
    done: tuple[int, ...] = ()
    sightings: tuple[Sighting, ...] = ()


@dataclass(frozen=True)
class AgentMeta:
    id: str
    position: Position
    capacity: int
    queue_depth: int


@dataclass(frozen=True)
class ServiceInfo:
    task_ids: tuple[int, ...]


@dataclass(frozen=True)
class AbnormalData:
    kind: str
    magnitude: float
    location: Position


@dataclass(frozen=True)
class ElicitationBody:
    agent_meta: Optional[AgentMeta]
    service_info: Optional[ServiceInfo]
    abnormal_data: Optional[AbnormalData]


Payload = Union[PlanCommand, Ack, ElicitationBody, PerceptionReport]

PAYLOAD_TYPE: dict[Kind, type] = {
    Kind.REQUEST: PlanCommand,
    Kind.RESPONSE: Ack,
    Kind.ELICITATION: ElicitationBody,
    Kind.ELICITATION_RESPONSE: PlanCommand,
    Kind.REPORT: PerceptionReport,
}


@dataclass(frozen=True)
class Message:
    kind: Kind
    correlation_id: int
    sender: str
    epoch: int
    payload: Any

    @property
    def originating(self) -> bool:
        """Messages that allocate a fresh correlation id (as opposed to answering one)."""
        return self.kind in (Kind.REQUEST, Kind.ELICITATION, Kind.REPORT)


# -- validation ---------------------------------------------------------------

def _check_uint(name: str, v: Any, limit: int = U64_MAX) -> None:
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= limit:
        raise EncodeError(name, f"expected unsigned integer, got {v!r}")


def _is_edge(node_id: Optional[str]) -> bool:
    return isinstance(node_id, str) and node_id.startswith("e")


def validate(msg: Message) -> None:
    if not isinstance(msg.kind, Kind):
        raise EncodeError("kind", f"unknown kind {msg.kind!r}")
    _check_uint("correlation_id", msg.correlation_id)
    _check_uint("epoch", msg.epoch)
    if not isinstance(msg.sender, str) or not msg.sender:
        raise EncodeError("sender", "must be a non-empty string")
    expected = PAYLOAD_TYPE[msg.kind]
    if not isinstance(msg.payload, expected):
        raise EncodeError("payload", f"{msg.kind.value} requires {expected.__name__}")
    p = msg.payload
    if isinstance(p, PlanCommand):
        if p.epoch != msg.epoch:
            raise EncodeError("payload.epoch", "must equal envelope epoch")
        for d in p.directives:
            for a in d.assignments:
                if a.role is Role.RELAY and not _is_edge(a.target):
                    raise EncodeError("payload.directives.assignments.target", "relay must target an edge node")
    elif isinstance(p, ElicitationBody):
        if p.agent_meta is None or not p.agent_meta.id:
            raise EncodeError("agent_meta", "missing or empty")
        if p.service_info is None or not p.service_info.task_ids:
            raise EncodeError("service_info", "missing or empty")
        if p.abnormal_data is None or not p.abnormal_data.kind:
            raise EncodeError("abnormal_data", "missing or empty")
    elif isinstance(p, PerceptionReport):
        if not 0.0 <= p.utilization <= 1.0:
            raise EncodeError("payload.utilization", f"{p.utilization} outside [0, 1]")


# -- codec --------------------------------------------------------------------

def _pos(p: Optional[Position]) -> Optional[list[float]]:
    return None if p is None else [float(p.x), float(p.y)]


def _payload_to_json(p: Payload) -> dict[str, Any]:
    if isinstance(p, PlanCommand):
        return {
            "epoch": p.epoch,
            "directives": [
                {
                    "agent_id": d.agent_id,
                    "waypoint": _pos(d.waypoint),
                    "assignments": [
                        {"task_id": a.task_id, "role": a.role.value, "target": a.target} for a in d.assignments
                    ],
                    "release": list(d.release),
                }
                for d in p.directives
            ],
        }
    if isinstance(p, Ack):
        return {"accepted": list(p.accepted), "rejected": list(p.rejected),
                "released": list(p.released), "kept": list(p.kept)}
    if isinstance(p, ElicitationBody):
        m, s, a = p.agent_meta, p.service_info, p.abnormal_data
        return {
            "agent_meta": {"id": m.id, "position": _pos(m.position), "capacity": m.capacity,
                           "queue_depth": m.queue_depth},
            "service_info": {"task_ids": list(s.task_ids)},
            "abnormal_data": {"kind": a.kind, "magnitude": float(a.magnitude), "location": _pos(a.location)},
        }
    return {
        "agent_id": p.agent_id,
        "tick": p.tick,
        "position": _pos(p.position),
        "queue_depth": p.queue_depth,
        "utilization": float(p.utilization),
        "arrival_rate": float(p.arrival_rate),
        "waypoint": _pos(p.waypoint),
        "queue": [[q.task_id, q.remaining, q.started] for q in p.queue],
        "relay_queue": list(p.relay_queue),
        "forwarded": list(p.forwarded),
        "done": list(p.done),
        "sightings": [[s.task_id, float(s.origin.x), float(s.origin.y), s.demand, s.arrival_tick] for s in p.sightings],
    }


def encode(msg: Message) -> bytes:
    validate(msg)
    doc = {
        "correlation_id": msg.correlation_id,
        "epoch": msg.epoch,
        "kind": msg.kind.value,
        "payload": _payload_to_json(msg.payload),
        "sender": msg.sender,
    }
    try:
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except ValueError as exc:
        raise EncodeError("payload", str(exc)) from None
    return text.encode("utf-8") + b"\n"


class _Reader:
    """Strict field access over a decoded JSON object."""

    def __init__(self, doc: Any, path: str):
        if not isinstance(doc, dict):
            raise MalformedDocumentError(f"{path}: expected object")
        self.doc, self.path, self.seen = doc, path, set()

    def get(self, key: str) -> Any:
        if key not in self.doc:
            raise MalformedDocumentError(f"{self.path}: missing field {key!r}")
        self.seen.add(key)
        return self.doc[key]

    def done(self) -> None:
        extra = set(self.doc) - self.seen
        if extra:
            raise MalformedDocumentError(f"{self.path}: unknown field(s) {sorted(extra)}")

    def int(self, key: str) -> int:
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            raise MalformedDocumentError(f"{self.path}.{key}: expected integer")
        return v

    def num(self, key: str) -> float:
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise MalformedDocumentError(f"{self.path}.{key}: expected number")
        return float(v)

    def str(self, key: str) -> str:
        v = self.get(key)
        if not isinstance(v, str):
            raise MalformedDocumentError(f"{self.path}.{key}: expected string")
        return v

    def list(self, key: str) -> list:
        v = self.get(key)
        if not isinstance(v, list):
            raise MalformedDocumentError(f"{self.path}.{key}: expected array")
        return v

    def pos(self, key: str, optional: bool = False) -> Optional[Position]:
        v = self.get(key)
        if v is None and optional:
            return None
        return _as_pos(v, f"{self.path}.{key}")


def _as_pos(v: Any, path: str) -> Position:
    if (not isinstance(v, list) or len(v) != 2
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
        raise MalformedDocumentError(f"{path}: expected [x, y]")
    return Position(float(v[0]), float(v[1]))


def _int_list(v: list, path: str) -> tuple[int, ...]:
    if not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
        raise MalformedDocumentError(f"{path}: expected integer array")
    return tuple(v)


def _tuple_row(v: Any, n: int, path: str) -> list:
    if not isinstance(v, list) or len(v) != n:
        raise MalformedDocumentError(f"{path}: expected {n}-element array")
    return v


def _payload_from_json(kind: Kind, doc: Any) -> Payload:
    r = _Reader(doc, "payload")
    if kind in (Kind.REQUEST, Kind.ELICITATION_RESPONSE):
        directives = []
        for i, d in enumerate(r.list("directives")):
            dr = _Reader(d, f"payload.directives[{i}]")
            assignments = []
            for j, a in enumerate(dr.list("assignments")):
                ar = _Reader(a, f"{dr.path}.assignments[{j}]")
                try:
                    role = Role(ar.str("role"))
                except ValueError:
                    raise MalformedDocumentError(f"{ar.path}.role: unknown role") from None
                target = ar.get("target")
                if target is not None and not isinstance(target, str):
                    raise MalformedDocumentError(f"{ar.path}.target: expected string or null")
                assignments.append(Assignment(ar.int("task_id"), role, target))
                ar.done()
            directives.append(Directive(dr.str("agent_id"), dr.pos("waypoint", optional=True),
                                        tuple(assignments), _int_list(dr.list("release"), dr.path + ".release")))
            dr.done()
        out = PlanCommand(r.int("epoch"), tuple(directives))
    elif kind is Kind.RESPONSE:
        out = Ack(*(_int_list(r.list(k), f"payload.{k}") for k in ("accepted", "rejected", "released", "kept")))
    elif kind is Kind.ELICITATION:
        mr = _Reader(r.get("agent_meta"), "payload.agent_meta")
        meta = AgentMeta(mr.str("id"), mr.pos("position"), mr.int("capacity"), mr.int("queue_depth"))
        mr.done()
        sr = _Reader(r.get("service_info"), "payload.service_info")
        info = ServiceInfo(_int_list(sr.list("task_ids"), "payload.service_info.task_ids"))
        sr.done()
        xr = _Reader(r.get("abnormal_data"), "payload.abnormal_data")
        abnormal = AbnormalData(xr.str("kind"), xr.num("magnitude"), xr.pos("location"))
        xr.done()
        out = ElicitationBody(meta, info, abnormal)
    else:
        queue = []
        for i, row in enumerate(r.list("queue")):
            tid, rem, started = _tuple_row(row, 3, f"payload.queue[{i}]")
            if not isinstance(started, bool) or not isinstance(tid, int) or not isinstance(rem, int):
                raise MalformedDocumentError(f"payload.queue[{i}]: expected [int, int, bool]")
            queue.append(QueueEntry(tid, rem, started))
        sightings = []
        for i, row in enumerate(r.list("sightings")):
            tid, x, y, demand, arrival = _tuple_row(row, 5, f"payload.sightings[{i}]")
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in (tid, demand, arrival)):
                raise MalformedDocumentError(f"payload.sightings[{i}]: expected integer ids")
            sightings.append(Sighting(tid, _as_pos([x, y], f"payload.sightings[{i}]"), demand, arrival))
        out = PerceptionReport(
            agent_id=r.str("agent_id"),
            tick=r.int("tick"),
            position=r.pos("position"),
            queue_depth=r.int("queue_depth"),
            utilization=r.num("utilization"),
            arrival_rate=r.num("arrival_rate"),
            waypoint=r.pos("waypoint", optional=True),
            queue=tuple(queue),
            relay_queue=_int_list(r.list("relay_queue"), "payload.relay_queue"),
            forwarded=_int_list(r.list("forwarded"), "payload.forwarded"),
            done=_int_list(r.list("done"), "payload.done"),
            sightings=tuple(sightings),
        )
    r.done()
    return out


def decode(line: bytes) -> Message:
    if not line.endswith(b"\n"):
        raise FramingError("message line is not newline-terminated")
    body = line[:-1]
    if b"\n" in body:
        raise FramingError("embedded newline in message body")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise Utf8Error(str(exc)) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocumentError(str(exc)) from None
    r = _Reader(doc, "message")
    kind_s = r.str("kind")
    try:
        kind = Kind(kind_s)
    except ValueError:
        raise UnknownKindError(f"unknown kind {kind_s!r}") from None
    cid = r.int("correlation_id")
    if cid < 0:
        raise MalformedDocumentError("correlation_id must be unsigned")
    if cid > U64_MAX:
        raise CorrelationOverflowError(f"correlation_id {cid} exceeds 64 bits")
    epoch = r.int("epoch")
    if not 0 <= epoch <= U64_MAX:
        raise MalformedDocumentError("epoch out of range")
    sender = r.str("sender")
    payload = _payload_from_json(kind, r.get("payload"))
    r.done()
    msg = Message(kind, cid, sender, epoch, payload)
    try:
        validate(msg)
    except EncodeError as exc:
        raise MalformedDocumentError(str(exc)) from None
    return msg


# -- agent lifecycle ----------------------------------------------------------

class Lifecycle(str, enum.Enum):
    IDLE = "Idle"
    ACTION = "Action"
    ELICITATION = "Elicitation"


class Event(str, enum.Enum):
    PLAN_RECEIVED = "PlanReceived"
    TASK_BATCH_DONE = "TaskBatchDone"
    DEVIATION_DETECTED = "DeviationDetected"
    ELICITATION_ANSWERED = "ElicitationAnswered"


@dataclass(frozen=True)
class AgentState:
    current: Lifecycle = Lifecycle.IDLE
    pending_elicitation: Optional[int] = None

    def __post_init__(self):
        if (self.current is Lifecycle.ELICITATION) != (self.pending_elicitation is not None):
            raise ValueError("pending_elicitation must be set iff state is Elicitation")


def transition(state: AgentState, event: Event, correlation_id: Optional[int] = None) -> AgentState:
    """Advance the lifecycle.  ``correlation_id`` is the outgoing elicitation id for DeviationDetected."""
    cur = state.current
    if cur is Lifecycle.IDLE and event is Event.PLAN_RECEIVED:
        return AgentState(Lifecycle.ACTION)
    if cur is Lifecycle.ACTION and event is Event.TASK_BATCH_DONE:
        return AgentState(Lifecycle.IDLE)
    if cur is Lifecycle.ACTION and event is Event.DEVIATION_DETECTED:
        if correlation_id is None:
            raise ValueError("DeviationDetected needs the outgoing correlation id")
        return AgentState(Lifecycle.ELICITATION, correlation_id)
    if cur is Lifecycle.ELICITATION and event is Event.ELICITATION_ANSWERED:
        return AgentState(Lifecycle.ACTION)
    raise IllegalTransition(cur, event)


# -- host session -------------------------------------------------------------

class HostHandler(Protocol):
    def on_report(self, report: PerceptionReport) -> None: ...

    def on_ack(self, agent_id: str, ack: Ack) -> None: ...

    def on_elicitation(self, session: "HostSession", body: ElicitationBody) -> tuple[PlanCommand, list[PlanCommand]]: ...


@dataclass
class HostSession:
    """Host-side protocol state: correlation watermarks, pending requests, epochs."""

    handler: Any
    agents: set[str] = field(default_factory=set)
    next_id: int = 1
    watermarks: dict[str, int] = field(default_factory=dict)
    agent_epochs: dict[str, int] = field(default_factory=dict)
    pending: dict[int, tuple[str, int]] = field(default_factory=dict)
    answered: set[int] = field(default_factory=set)
    loads: dict[str, PerceptionReport] = field(default_factory=dict)
    elicitations_answered: int = 0

    def request(self, agent_id: str, command: PlanCommand) -> Message:
        cid = self.next_id
        self.next_id += 1
        self.pending[cid] = (agent_id, command.epoch)
        return Message(Kind.REQUEST, cid, HOST_ID, command.epoch, command)


def host_dispatch(session: HostSession, msg: Message) -> list[Message]:
    """Apply one incoming agent message to the session; return the messages to send."""
    sender = msg.sender
    if msg.kind in (Kind.REQUEST, Kind.ELICITATION_RESPONSE):
        raise ProtocolError(f"host cannot receive {msg.kind.value}")
    if sender not in session.agents:
        raise UnknownAgentError(f"unknown agent {sender!r}")
    if msg.epoch < session.agent_epochs.get(sender, 0):
        raise StaleEpochError(f"{sender} sent epoch {msg.epoch} < {session.agent_epochs[sender]}")
    if msg.originating:
        if msg.correlation_id <= session.watermarks.get(sender, 0):
            raise DuplicateCorrelationError(f"{sender} reused correlation id {msg.correlation_id}")
    else:
        if msg.correlation_id in session.answered:
            raise DuplicateCorrelationError(f"response {msg.correlation_id} already consumed")
        owner = session.pending.get(msg.correlation_id)
        if owner is None or owner[0] != sender:
            raise UnmatchedResponseError(f"response {msg.correlation_id} from {sender} matches no request")

    out: list[Message] = []
    if msg.kind is Kind.REPORT:
        session.handler.on_report(msg.payload)
        session.loads[sender] = msg.payload
    elif msg.kind is Kind.RESPONSE:
        session.handler.on_ack(sender, msg.payload)
        del session.pending[msg.correlation_id]
        session.answered.add(msg.correlation_id)
    else:
        own, others = session.handler.on_elicitation(session, msg.payload)
        out.append(Message(Kind.ELICITATION_RESPONSE, msg.correlation_id, HOST_ID, own.epoch, own))
        out.extend(session.request(cmd.directives[0].agent_id, cmd) for cmd in others)
        session.elicitations_answered += 1
    if msg.originating:
        session.watermarks[sender] = msg.correlation_id
    session.agent_epochs[sender] = max(msg.epoch, session.agent_epochs.get(sender, 0))
    return out
