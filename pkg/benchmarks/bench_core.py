"""Compare the compiled list scheduler with the pure-Python fallback.

Usage: python benchmarks/bench_core.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import sys
import timeit
from pathlib import Path

from moepipe import core, default_kernel_models, load_scenario, route
from moepipe.routing import chunk
from moepipe.sim import _check_dag, build_schedule, simulate

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def layer_events(name: str, N: int):
    spec = load_scenario(FIXTURES / f"{name}.yaml").replace(
        pipeline_number=N, gemm_kind="GroupGemm", compute_sm_allocation=116, comm_sm_allocation=16)
    plan = route(spec)
    return spec, build_schedule(chunk(plan, N, spec), spec, default_kernel_models())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if core.list_schedule_compiled is None:
        print("compiled scheduler not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    print("best of --repeat runs; 'layer' includes event packing, 'core' is the scheduler alone")
    print(f"{'case':<24}{'events':>7}{'layer py ms':>13}{'layer cy ms':>13}"
          f"{'core py ms':>12}{'core cy ms':>12}{'core speedup':>14}")
    for name, N in (("six_experts", 3), ("layer_m3072", 1), ("layer_m3072", 5), ("layer_m3072", 20)):
        spec, events = layer_events(name, N)
        _check_dag(events)
        captured = []

        def record(*a):
            captured.append(a)
            return core.list_schedule_py(*a)
        simulate(events, spec, backend=record)
        timings = {}
        for label, fn in (("py", core.list_schedule_py), ("cy", core.list_schedule_compiled)):
            layer = timeit.repeat(lambda: simulate(events, spec, backend=fn), number=1, repeat=args.repeat)
            raw = timeit.repeat(lambda: fn(*captured[0]), number=1, repeat=args.repeat)
            timings[label] = (1e3 * min(layer), 1e3 * min(raw))
        a = simulate(events, spec, backend=core.list_schedule_py)
        b = simulate(events, spec, backend=core.list_schedule_compiled)
        assert a == b, "backends disagree"
        (lp, cp), (lc, cc) = timings["py"], timings["cy"]
        print(f"{name + ' N=' + str(N):<24}{len(events):>7}{lp:>13.2f}{lc:>13.2f}{cp:>12.3f}{cc:>12.3f}"
              f"{cp / cc:>13.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
