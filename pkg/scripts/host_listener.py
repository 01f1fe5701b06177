#!/usr/bin/env python3
"""Run the orchestrator as a protocol host on a TCP port.

Agents connect, send reports, acks and elicitations as newline-delimited JSON,
and receive plan commands.  Node positions come from the scenario file, so
agent ids must be ones that scenario defines (e00.., f00..).

    python3 scripts/host_listener.py --port 7400
"""

import argparse
import socketserver
import sys
import threading

from airground.model import DEFAULT_SCENARIO_PATH, ScenarioConfig, place_nodes
from airground.orchestrator import Orchestrator
from airground.protocol import HOST_ID, DecodeError, HostSession, Kind, PlanCommand, ProtocolError, host_dispatch
from airground.transport import LineChannel


class Host:
    def __init__(self, config: ScenarioConfig):
        edges, flyers = place_nodes(config)
        self.orchestrator = Orchestrator(config, edges, flyers,
                                         log=lambda tick, kind, subj, detail: print(f"[{kind}] {detail}"))
        self.session = HostSession(self.orchestrator, agents={n.id for n in (*edges, *flyers)})
        self.lock = threading.Lock()
        self.channels: dict[str, LineChannel] = {}

    def handle(self, channel: LineChannel) -> None:
        while True:
            try:
                msg = channel.recv()
            except DecodeError as exc:
                print(f"dropping connection: {type(exc).__name__}: {exc}", file=sys.stderr)
                return
            if msg is None:
                return
            with self.lock:
                self.channels[msg.sender] = channel
                try:
                    replies = host_dispatch(self.session, msg)
                except ProtocolError as exc:
                    print(f"rejected {msg.kind.value} from {msg.sender}: {exc}", file=sys.stderr)
                    continue
                print(f"<- {msg.kind.value} from {msg.sender} (cid {msg.correlation_id}, epoch {msg.epoch})")
                if msg.kind is Kind.REPORT:
                    # admit newly sighted requests right away
                    plan = self.orchestrator.admission()
                    replies += [self.session.request(agent, PlanCommand(plan.epoch, (d,)))
                                for agent, d in plan.directives().items()]
                for reply in replies:
                    dest = msg.sender if reply.kind is Kind.ELICITATION_RESPONSE \
                        else reply.payload.directives[0].agent_id
                    out = self.channels.get(dest)
                    if out is None:
                        print(f"   {dest} not connected; command {reply.correlation_id} stays pending")
                        continue
                    out.send(reply)
                    print(f"-> {reply.kind.value} to {dest} (cid {reply.correlation_id}, epoch {reply.epoch})")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=7400)
    ap.add_argument("--config", default=str(DEFAULT_SCENARIO_PATH))
    args = ap.parse_args()
    sys.stdout.reconfigure(line_buffering=True)
    host = Host(ScenarioConfig.load(args.config))

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            host.handle(LineChannel(self.request))

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    with socketserver.ThreadingTCPServer((args.host, args.port), Handler) as server:
        print(f"{HOST_ID} listening on {args.host}:{server.server_address[1]}", flush=True)
        server.serve_forever()


if __name__ == "__main__":
    main()
