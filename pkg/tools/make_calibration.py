"""Regenerate src/moepipe/data/default_calibration.txt.

The default fixture is a digitized H800-class calibration built from smooth
trend curves:

* GEMM throughput rises with rows per expert and saturates.  GroupGemm
  saturates early; DenseGemm rises slower but peaks higher.  Raw throughput
  crosses at m ~= 1900 for the 5120x1536 expert shape (m ~= 700 for
  5120x15360); per-expert launches push the latency crossover to m ~= 2800.
* More groups only help at small m; beyond ~2K rows the group count is
  irrelevant.  Cooperative scheduling runs 10% below Pingpong.
* GEMM throughput stops improving at 116 SMs.
* all2all transfer time for large volumes is 223.6 at 10 SMs and 199.2 at
  30 SMs for 32 MB (stored in microseconds, unit_scale converts to ms);
  16 SMs is within 5% of the best for prefill volumes, 10 SMs for decode.
* silu-style memory kernels saturate at 40 SMs for 64 tokens and 60 SMs from
  128 tokens up.

Usage: python tools/make_calibration.py [output]
"""
from __future__ import annotations

import math
import sys
from pathlib import Path

from moepipe.kernels import (
    CommCalibrationTable, CommEntry, DENSE, GROUP_COOPERATIVE, GROUP_PINGPONG,
    GemmCalibrationTable, GemmEntry, MemKernelModel, format_calibration,
)

TF = 1e12
M_GRID = [1, 16, 32, 64, 128, 256, 512, 768, 1024, 1536, 2048, 2560, 2800, 3072, 3584, 4096,
          6144, 8192, 16384]
GROUP_GRID = [1, 2, 4, 5, 8, 10, 16, 20, 32, 40]
SM_GRID = [16, 32, 48, 64, 80, 92, 100, 108, 116, 124, 132]
GEMM_SAT_SMS = 116

# (k_dim, n_dim): (group peak, group tau, dense peak, dense tau)
SHAPES = {
    (5120, 1536): (620 * TF, 450.0, 700 * TF, 950.0),
    (5120, 15360): (680 * TF, 250.0, 760 * TF, 381.0),
}
GROUP_FILL = 400.0  # rows x groups needed to fill the machine


def group_factor(groups: int, m: float) -> float:
    ref = 1 - math.exp(-16 * m / GROUP_FILL)
    return (1 - math.exp(-groups * m / GROUP_FILL)) / ref


def sm_factor(sms: int) -> float:
    return min(1.0, sms / GEMM_SAT_SMS) ** 0.5


def gemm_entries():
    for (k, n), (gpeak, gtau, dpeak, dtau) in SHAPES.items():
        for sms in SM_GRID:
            for m in M_GRID:
                dense = dpeak * (1 - math.exp(-m / dtau)) * sm_factor(sms)
                yield GemmEntry(DENSE, m, 1, k, n, sms, dense)
                for g in GROUP_GRID:
                    group = gpeak * (1 - math.exp(-m / gtau)) * group_factor(g, m) * sm_factor(sms)
                    yield GemmEntry(GROUP_PINGPONG, m, g, k, n, sms, group)
                    yield GemmEntry(GROUP_COOPERATIVE, m, g, k, n, sms, 0.9 * group)


MB = 1 << 20
VOLUMES = [64 * 1024, 256 * 1024, 1 * MB, 4 * MB, 8 * MB, 16 * MB, 32 * MB, 64 * MB, 128 * MB,
           256 * MB, 512 * MB]
COMM_SM_GRID = [4, 8, 10, 16, 20, 30]
# SM penalty relative to 30 SMs, for decode-scale (<= 1 MB) and prefill-scale (>= 8 MB) volumes.
PENALTY_SMALL = {4: 1.80, 8: 1.35, 10: 1.03, 16: 1.01, 20: 1.0, 30: 1.0}
PENALTY_LARGE = {4: 1.60, 8: 1.20, 10: 223.6 / 199.2, 16: 1.03, 20: 1.006, 30: 1.0}
COMM_BASE_US = 7.5          # startup term of the 30-SM curve
COMM_PEAK_BW = 32 * MB / (199.2 - COMM_BASE_US) * 1e6  # bytes/s, pins 32 MB @ 30 SMs to 199.2 us


def comm_entries():
    for sms in COMM_SM_GRID:
        for v in VOLUMES:
            w = min(1.0, max(0.0, math.log(v / MB) / math.log(8)))
            penalty = (1 - w) * PENALTY_SMALL[sms] + w * PENALTY_LARGE[sms]
            base = COMM_BASE_US + v / COMM_PEAK_BW * 1e6
            latency = base * penalty
            if v == 32 * MB and sms in (10, 30):
                latency = {10: 223.6, 30: 199.2}[sms]
            yield CommEntry(v, sms, round(latency, 4))


def main(out: str | None = None) -> None:
    gemm = GemmCalibrationTable(tuple(gemm_entries()), launch_overhead=0.005)
    comm = CommCalibrationTable(tuple(comm_entries()), fixed_overhead=0.025, unit_scale=0.001)
    mem = MemKernelModel(effective_bandwidth=3.0e12,
                         saturation=((64, 40), (128, 60), (512, 60), (2048, 60)),
                         launch_overhead=0.005)
    header = ("# Default digitized calibration (H800-class, 132 SMs).\n"
              "# Generated by tools/make_calibration.py; edit the generator, not this file.\n"
              "# comm latencies are in microseconds as measured; unit_scale converts to ms.\n")
    text = header + format_calibration(gemm, comm, mem)
    path = Path(out) if out else Path(__file__).resolve().parents[1] / "src/moepipe/data/default_calibration.txt"
    path.write_text(text)
    print(f"wrote {path} ({text.count(chr(10))} lines)")


if __name__ == "__main__":
    main(*sys.argv[1:])
