import json

import pytest
from hypothesis import given, settings

from airground.model import Position
from airground.protocol import (
    HOST_ID,
    Ack,
    AbnormalData,
    AgentMeta,
    AgentState,
    Assignment,
    CorrelationOverflowError,
    DecodeError,
    Directive,
    DuplicateCorrelationError,
    ElicitationBody,
    EncodeError,
    Event,
    FramingError,
    HostSession,
    IllegalTransition,
    Kind,
    Lifecycle,
    MalformedDocumentError,
    Message,
    PerceptionReport,
    PlanCommand,
    ProtocolError,
    Role,
    ServiceInfo,
    StaleEpochError,
    UnknownAgentError,
    UnknownKindError,
    UnmatchedResponseError,
    Utf8Error,
    decode,
    encode,
    host_dispatch,
    transition,
)
from strategies import message


def body(agent="f01"):
    return ElicitationBody(AgentMeta(agent, Position(10, 10), 1, 3), ServiceInfo((4, 5)),
                           AbnormalData("LoadSurge", 3.2, Position(10, 10)))


def report(agent="f01", tick=0):
    return PerceptionReport(agent, tick, Position(1, 2), 2, 0.5, 1.5)


# -- codec --------------------------------------------------------------------

@settings(max_examples=300)
@given(message())
def test_round_trip_and_canonical_bytes(m):
    wire = encode(m)
    assert wire.endswith(b"\n") and wire.count(b"\n") == 1
    back = decode(wire)
    assert back == m
    assert encode(back) == wire


@given(message())
def test_wire_keys_sorted_and_compact(m):
    text = encode(m).decode("utf-8")
    doc = json.loads(text)
    assert list(doc) == ["correlation_id", "epoch", "kind", "payload", "sender"]
    assert text[:-1] == json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def test_wire_example_shape():
    m = Message(Kind.RESPONSE, 7, "f04", 3, Ack(accepted=(1,)))
    assert encode(m) == (b'{"correlation_id":7,"epoch":3,"kind":"response","payload":'
                         b'{"accepted":[1],"kept":[],"rejected":[],"released":[]},"sender":"f04"}\n')


def test_int_coordinates_encode_as_floats():
    m = Message(Kind.REPORT, 1, "f00", 0, PerceptionReport("f00", 0, Position(3, 4), 0, 0, 0))
    assert encode(decode(encode(m))) == encode(m)


@pytest.mark.parametrize("section", ["agent_meta", "service_info", "abnormal_data"])
def test_elicitation_sections_are_mandatory(section):
    b = body()
    empty = {"agent_meta": AgentMeta("", Position(0, 0), 1, 0), "service_info": ServiceInfo(()),
             "abnormal_data": AbnormalData("", 1.0, Position(0, 0))}[section]
    for bad in (None, empty):
        kwargs = {k: getattr(b, k) for k in ("agent_meta", "service_info", "abnormal_data")}
        kwargs[section] = bad
        with pytest.raises(EncodeError) as err:
            encode(Message(Kind.ELICITATION, 1, "f01", 0, ElicitationBody(**kwargs)))
        assert err.value.field == section


def test_relay_must_target_edge():
    cmd = PlanCommand(1, (Directive("f00", assignments=(Assignment(1, Role.RELAY, "f02"),)),))
    with pytest.raises(EncodeError, match="edge"):
        encode(Message(Kind.REQUEST, 1, HOST_ID, 1, cmd))


@pytest.mark.parametrize("msg,field", [
    (Message(Kind.REPORT, -1, "f00", 0, report("f00")), "correlation_id"),
    (Message(Kind.REPORT, 1, "", 0, report("f00")), "sender"),
    (Message(Kind.REPORT, 1, "f00", 0, Ack()), "payload"),
    (Message(Kind.REQUEST, 1, HOST_ID, 2, PlanCommand(3)), "payload.epoch"),
    (Message(Kind.REPORT, 1, "f00", 0, PerceptionReport("f00", 0, Position(0, 0), 0, 1.5, 0)),
     "payload.utilization"),
])
def test_encode_names_violated_field(msg, field):
    with pytest.raises(EncodeError) as err:
        encode(msg)
    assert err.value.field == field


def good_line():
    return encode(Message(Kind.REPORT, 5, "f00", 0, report("f00")))


def test_unknown_kind():
    line = good_line().replace(b'"kind":"report"', b'"kind":"Requets"')
    with pytest.raises(UnknownKindError):
        decode(line)


def test_missing_newline_is_framing_error():
    with pytest.raises(FramingError):
        decode(good_line()[:-1])
    with pytest.raises(FramingError):
        decode(good_line()[:20])


def test_embedded_newline_is_framing_error():
    with pytest.raises(FramingError):
        decode(good_line()[:-1] + b"\n" + good_line())


def test_bad_utf8():
    with pytest.raises(Utf8Error):
        decode(b'{"kind":"report\xff"}\n')


def test_correlation_overflow():
    line = good_line().replace(b'"correlation_id":5', b'"correlation_id":%d' % 2**64)
    with pytest.raises(CorrelationOverflowError):
        decode(line)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("sender"),
    lambda d: d.update(extra=1),
    lambda d: d["payload"].pop("tick"),
    lambda d: d["payload"].update(colour="red"),
    lambda d: d.update(epoch="3"),
    lambda d: d.update(correlation_id=-2),
])
def test_strict_document_errors(mutate):
    doc = json.loads(good_line())
    mutate(doc)
    with pytest.raises(MalformedDocumentError):
        decode(json.dumps(doc).encode() + b"\n")


def test_not_json():
    with pytest.raises(MalformedDocumentError):
        decode(b"{nope\n")


def test_error_classes_are_distinct():
    classes = [FramingError, Utf8Error, MalformedDocumentError, UnknownKindError, CorrelationOverflowError]
    assert len(set(classes)) == 5 and all(issubclass(c, DecodeError) for c in classes)
    for a in classes:
        for b in classes:
            assert (a is b) or not issubclass(a, b)


# -- lifecycle ----------------------------------------------------------------

def test_transition_examples():
    s = transition(AgentState(Lifecycle.ACTION), Event.DEVIATION_DETECTED, 42)
    assert s == AgentState(Lifecycle.ELICITATION, 42)
    assert transition(s, Event.ELICITATION_ANSWERED) == AgentState(Lifecycle.ACTION)
    with pytest.raises(IllegalTransition) as err:
        transition(AgentState(), Event.DEVIATION_DETECTED, 1)
    assert err.value.state is Lifecycle.IDLE and err.value.event is Event.DEVIATION_DETECTED


def test_transition_table_exhaustive():
    legal = {
        (Lifecycle.IDLE, Event.PLAN_RECEIVED): AgentState(Lifecycle.ACTION),
        (Lifecycle.ACTION, Event.TASK_BATCH_DONE): AgentState(Lifecycle.IDLE),
        (Lifecycle.ACTION, Event.DEVIATION_DETECTED): AgentState(Lifecycle.ELICITATION, 9),
        (Lifecycle.ELICITATION, Event.ELICITATION_ANSWERED): AgentState(Lifecycle.ACTION),
    }
    for state in Lifecycle:
        st = AgentState(state, 3 if state is Lifecycle.ELICITATION else None)
        for ev in Event:
            if (state, ev) in legal:
                assert transition(st, ev, 9) == legal[(state, ev)]
            else:
                with pytest.raises(IllegalTransition):
                    transition(st, ev, 9)


def test_pending_elicitation_iff_elicitation_state():
    with pytest.raises(ValueError):
        AgentState(Lifecycle.ELICITATION)
    with pytest.raises(ValueError):
        AgentState(Lifecycle.ACTION, 4)


# -- host session -------------------------------------------------------------

class RecordingHandler:
    def __init__(self):
        self.reports, self.acks, self.elicitations = [], [], []

    def on_report(self, rep):
        self.reports.append(rep)

    def on_ack(self, agent, ack):
        self.acks.append((agent, ack))

    def on_elicitation(self, session, b):
        self.elicitations.append(b)
        own = PlanCommand(1, (Directive(b.agent_meta.id),))
        others = [PlanCommand(1, (Directive("f02", waypoint=Position(5, 5)),))]
        return own, others


def session():
    return HostSession(RecordingHandler(), agents={"f01", "f02"})


def test_elicitation_gets_exactly_one_matching_response():
    s = session()
    out = host_dispatch(s, Message(Kind.ELICITATION, 11, "f01", 0, body()))
    answers = [m for m in out if m.kind is Kind.ELICITATION_RESPONSE]
    assert len(answers) == 1 and answers[0].correlation_id == 11
    assert answers[0].payload.directives[0].agent_id == "f01"
    others = [m for m in out if m.kind is Kind.REQUEST]
    assert [m.payload.directives[0].agent_id for m in others] == ["f02"]
    assert s.pending[others[0].correlation_id] == ("f02", 1)


def test_report_updates_load_table_without_reply():
    s = session()
    log = [Message(Kind.REPORT, 1, "f01", 0, report("f01", 0)),
           Message(Kind.REPORT, 2, "f02", 0, report("f02", 0)),
           Message(Kind.REPORT, 3, "f01", 0, report("f01", 1))]
    for m in log:
        assert host_dispatch(s, m) == []
    assert s.loads["f01"].tick == 1 and s.loads["f02"].tick == 0
    assert s.watermarks == {"f01": 3, "f02": 2}
    assert len(s.handler.reports) == 3


def test_duplicate_correlation_leaves_state_unchanged():
    s = session()
    host_dispatch(s, Message(Kind.REPORT, 5, "f01", 0, report("f01", 0)))
    before = (dict(s.watermarks), dict(s.loads), len(s.handler.reports))
    for cid in (5, 4):
        with pytest.raises(DuplicateCorrelationError):
            host_dispatch(s, Message(Kind.REPORT, cid, "f01", 0, report("f01", 9)))
    assert (dict(s.watermarks), dict(s.loads), len(s.handler.reports)) == before


def test_response_matches_request_once():
    s = session()
    req = s.request("f02", PlanCommand(0))
    ack = Message(Kind.RESPONSE, req.correlation_id, "f02", 0, Ack())
    assert host_dispatch(s, ack) == []
    assert req.correlation_id not in s.pending
    with pytest.raises(DuplicateCorrelationError):
        host_dispatch(s, ack)


def test_response_without_request():
    s = session()
    with pytest.raises(UnmatchedResponseError):
        host_dispatch(s, Message(Kind.RESPONSE, 99, "f01", 0, Ack()))
    req = s.request("f02", PlanCommand(0))
    with pytest.raises(UnmatchedResponseError):  # wrong responder
        host_dispatch(s, Message(Kind.RESPONSE, req.correlation_id, "f01", 0, Ack()))


def test_stale_epoch_rejected():
    s = session()
    host_dispatch(s, Message(Kind.REPORT, 1, "f01", 3, report("f01")))
    with pytest.raises(StaleEpochError):
        host_dispatch(s, Message(Kind.REPORT, 2, "f01", 2, report("f01")))
    assert s.watermarks["f01"] == 1


def test_unknown_sender_and_wrong_direction():
    s = session()
    with pytest.raises(UnknownAgentError):
        host_dispatch(s, Message(Kind.REPORT, 1, "f99", 0, report("f99")))
    with pytest.raises(ProtocolError):
        host_dispatch(s, Message(Kind.REQUEST, 1, "f01", 0, PlanCommand(0)))


def test_request_ids_increase():
    s = session()
    ids = [s.request("f01", PlanCommand(0)).correlation_id for _ in range(5)]
    assert ids == sorted(ids) and len(set(ids)) == 5
