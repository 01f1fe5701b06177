"""Command line entry point: ``run``, ``sweep``, ``duplex``, ``accept`` and ``validate``.

Exit codes: 0 success, 1 acceptance failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .engine import Simulation, SimulationAbort
from .experiments import (
    DuplexResult,
    SweepAbort,
    SweepSpec,
    SweepVariable,
    read_csv,
    run_duplex,
    save_result,
    sweep_hotspot,
    sweep_task_count,
)
from .model import DEFAULT_SCENARIO_PATH, HotspotSpec, ScenarioConfig, ScenarioError

EXIT_OK, EXIT_ACCEPT_FAIL, EXIT_CONFIG = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.load(args.config or DEFAULT_SCENARIO_PATH)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    sim = Simulation(cfg, record_events=args.event_log is not None)
    result = sim.run()
    if args.event_log:
        sim.write_event_log(args.event_log)
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"seed {result.seed}: success rate {result.success_rate:.4f} "
          f"({result.succeeded}/{result.generated}, failed {result.failed}) in {result.ticks} ticks")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec)
    run = sweep_task_count if spec.variable is SweepVariable.TASK_COUNT else sweep_hotspot
    result = run(spec, parallel=args.parallel)
    csv_path, side = save_result(result, args.out_csv)
    print(f"wrote {csv_path} and {side}")
    return EXIT_OK


def _cmd_duplex(args) -> int:
    spec = SweepSpec.load(args.spec)
    if spec.base.hotspot is None:
        raise ScenarioError("duplex comparison needs a spec with a hotspot")
    alpha = args.alpha if args.alpha is not None else max(spec.values)
    hs = spec.base.hotspot
    cfg = spec.base.replace(hotspot=HotspotSpec(hs.center, hs.radius, alpha))
    result = run_duplex(cfg, spec.seed_list, parallel=args.parallel)
    Path(args.out).write_text(json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"elicitation on {result.enabled.mean:.4f}±{result.enabled.stderr:.4f}, "
          f"off {result.disabled.mean:.4f}±{result.disabled.stderr:.4f}; wrote {args.out}")
    return EXIT_OK


def _cmd_accept(args) -> int:
    from .acceptance import check_acceptance

    duplex = None
    if args.duplex:
        try:
            duplex = DuplexResult.from_dict(json.loads(Path(args.duplex).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise ScenarioError(f"cannot read duplex result {args.duplex}: {exc}") from None
    report = check_acceptance(read_csv(args.fig3), read_csv(args.fig4), duplex, structural=not args.skip_structural)
    return EXIT_OK if report.passed else EXIT_ACCEPT_FAIL


def _cmd_validate(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    print(f"ok: {args.config} (config hash {cfg.config_hash()})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airground", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--config", help="scenario JSON (default: the pinned default scenario)")
    r.add_argument("--seed", type=int)
    r.add_argument("--event-log", help="write the JSON-lines event log here")
    r.add_argument("--out", help="write the run result JSON here")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run a task-count or hotspot sweep and export CSV")
    s.add_argument("--spec", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    d = sub.add_parser("duplex", help="compare elicitation on/off on a hotspot spec's base scenario")
    d.add_argument("--spec", required=True)
    d.add_argument("--alpha", type=float, help="hotspot proportion (default: the spec's largest value)")
    d.add_argument("--out", required=True)
    d.add_argument("--parallel", type=int, default=1)
    d.set_defaults(func=_cmd_duplex)

    a = sub.add_parser("accept", help="evaluate the acceptance criteria")
    a.add_argument("--fig3", required=True, help="task-count sweep CSV")
    a.add_argument("--fig4", required=True, help="hotspot sweep CSV")
    a.add_argument("--duplex", help="duplex comparison JSON")
    a.add_argument("--skip-structural", action="store_true", help="only evaluate the sweep orderings")
    a.set_defaults(func=_cmd_accept)

    v = sub.add_parser("validate", help="schema and invariant check of a scenario file")
    v.add_argument("--config", required=True)
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SweepAbort, SimulationAbort) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ACCEPT_FAIL


if __name__ == "__main__":
    sys.exit(main())
