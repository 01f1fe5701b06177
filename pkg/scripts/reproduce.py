#!/usr/bin/env python3
"""Regenerate every reference result under results/ and run the acceptance gate.

Equivalent to the sweep, duplex and accept CLI subcommands run back to back.
Exit status is the gate's (0 pass, 1 fail).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from airground.acceptance import check_acceptance
from airground.experiments import SweepSpec, run_duplex, save_result, sweep_hotspot, sweep_task_count
from airground.model import DEFAULT_SCENARIO_PATH, HotspotSpec

DATA = DEFAULT_SCENARIO_PATH.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    fig3 = sweep_task_count(SweepSpec.load(DATA / "fig3_sweep.json"), args.parallel)
    save_result(fig3, out / "fig3_task_count.csv")
    spec4 = SweepSpec.load(DATA / "fig4_sweep.json")
    fig4 = sweep_hotspot(spec4, args.parallel)
    save_result(fig4, out / "fig4_hotspot.csv")
    hs = spec4.base.hotspot
    surge = spec4.base.replace(hotspot=HotspotSpec(hs.center, hs.radius, max(spec4.values)))
    duplex = run_duplex(surge, spec4.seed_list, args.parallel)
    (out / "duplex.json").write_text(json.dumps(duplex.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"sweeps finished in {time.perf_counter() - t0:.1f}s")

    report = check_acceptance(fig3, fig4, duplex)
    print(f"total {time.perf_counter() - t0:.1f}s")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
