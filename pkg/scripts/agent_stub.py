#!/usr/bin/env python3
"""Minimal flying agent: connects to a host, reports sighted requests, raises one
elicitation and acknowledges whatever plan comes back.

    python3 scripts/agent_stub.py --port 7400 --agent f00
"""

import argparse
import itertools

from airground.model import Position, default_config, place_nodes
from airground.protocol import (
    Ack,
    AbnormalData,
    AgentMeta,
    ElicitationBody,
    Kind,
    Message,
    PerceptionReport,
    ServiceInfo,
    Sighting,
)
from airground.transport import LineChannel


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=7400)
    ap.add_argument("--agent", default="f00")
    ap.add_argument("--tasks", type=int, default=4, help="requests to report around the agent")
    args = ap.parse_args()

    cfg = default_config()
    node = next(n for n in (*place_nodes(cfg)[0], *place_nodes(cfg)[1]) if n.id == args.agent)
    ids = itertools.count(1)
    sightings = tuple(Sighting(i, Position(node.pos.x + (i % 3), node.pos.y + (i // 3)), 4, 0)
                      for i in range(args.tasks))
    epoch = 0
    with LineChannel.connect(args.host, args.port, timeout=10) as ch:
        report = PerceptionReport(args.agent, 0, node.pos, 0, 0.0, float(args.tasks), sightings=sightings)
        ch.send(Message(Kind.REPORT, next(ids), args.agent, epoch, report))
        body = ElicitationBody(AgentMeta(args.agent, node.pos, node.capacity, args.tasks),
                               ServiceInfo(tuple(range(args.tasks))),
                               AbnormalData("LoadSurge", 3.0, node.pos))
        cid = next(ids)
        ch.send(Message(Kind.ELICITATION, cid, args.agent, epoch, body))
        print(f"sent elicitation {cid}")
        while True:
            msg = ch.recv()
            if msg is None:
                break
            print(f"received {msg.kind.value} cid={msg.correlation_id} epoch={msg.epoch}: {msg.payload}")
            epoch = max(epoch, msg.epoch)
            if msg.kind is Kind.ELICITATION_RESPONSE and msg.correlation_id == cid:
                print("elicitation answered; resuming")
                break
            if msg.kind is Kind.REQUEST:
                mine = msg.payload.for_agent(args.agent)
                accepted = tuple(a.task_id for a in mine.assignments) if mine else ()
                ch.send(Message(Kind.RESPONSE, msg.correlation_id, args.agent, epoch, Ack(accepted=accepted)))


if __name__ == "__main__":
    main()
