#!/usr/bin/env python3
"""Success rate versus batch size K for the three environments; writes CSV + JSON sidecar."""

import argparse
import time

from airground.experiments import SweepSpec, save_result, sweep_task_count
from airground.model import DEFAULT_SCENARIO_PATH


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--spec", default=str(DEFAULT_SCENARIO_PATH.parent / "fig3_sweep.json"))
    ap.add_argument("--out-csv", default="results/fig3_task_count.csv")
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()
    t0 = time.perf_counter()
    result = sweep_task_count(SweepSpec.load(args.spec), parallel=args.parallel)
    save_result(result, args.out_csv)
    for env in result.environments:
        row = "  ".join(f"K={int(v)}: {result.cell(env, v).mean:.3f}" for v in result.values)
        print(f"{env.value:<11} {row}")
    print(f"wrote {args.out_csv} in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
