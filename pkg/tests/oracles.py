"""Independent oracles shared by the unit and acceptance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from moepipe.sim import KernelEvent, simulate

CAPACITY = 132
COMPUTE_SMS = 116
COMM_SMS = 16


def linear_pipeline_events(t_comm: float, t_comp: float, k: float, b: float, N: int) -> list[KernelEvent]:
    """Chunked pipeline on linear kernels: comm chunk T_comm/N + k, compute chunk T_comp/N.

    A one-off setup transfer of length ``b`` precedes the first chunk.  Compute
    events cannot co-run (their SM demands exceed the pool together) and comm
    events share the channel.
    """
    events = [KernelEvent(0, "all2all_dispatch", 0, 0, 0, COMM_SMS, b)]
    prev_comm = 0
    for c in range(N):
        comm_id = len(events)
        events.append(KernelEvent(comm_id, "all2all_dispatch", c, c, 0, COMM_SMS, t_comm / N + k,
                                  (prev_comm,)))
        events.append(KernelEvent(comm_id + 1, "gate_up_gemm", c, c, 0, COMPUTE_SMS, t_comp / N,
                                  (comm_id,)))
        prev_comm = comm_id
    return events


def pipeline_gain(t_comm: float, t_comp: float, k: float, b: float, N: int, backend=None) -> float:
    trace = simulate(linear_pipeline_events(t_comm, t_comp, k, b, N), sms_per_device=CAPACITY,
                     backend=backend)
    return (t_comm + t_comp) - trace.makespan


def formula_gain(t_comm: float, t_comp: float, k: float, b: float, N: int) -> float:
    C = min(t_comm, t_comp)
    return C * (1 - 1 / N) - k * N - b


@dataclass(frozen=True)
class LinearKernels:
    """Load-linear kernel latencies: no launch overheads, no saturation."""

    flop_rate: float = 5e14
    mem_rate: float = 2e12
    link_rate: float = 1e11
    fixed: float = 0.0
    comm_sm_grid: tuple = (16,)

    def gemm_latency(self, kind, m_per_group, groups, k_dim, n_dim, sms, *, include_overhead=True):
        return 1e3 * 2.0 * m_per_group * groups * k_dim * n_dim / self.flop_rate

    def all2all_latency(self, volume, sms):
        return self.fixed + 1e3 * volume / self.link_rate

    def mem_kernel_latency(self, tokens, dims, sms):
        return 1e3 * 4.0 * tokens * dims / self.mem_rate

    def gemm_saturation_sms(self, kind, m_per_group, groups, k_dim, n_dim):
        return 116


def random_dag(rng: np.random.Generator, n: int, n_dev: int, capacity: int):
    """Random scheduler inputs in the core's array form."""
    duration = rng.choice([0.0, 0.5, 1.0, 1.5, 2.0, 3.25], size=n)
    sm = rng.integers(1, capacity + 1, size=n)
    n_streams = max(1, n // 3)
    stream = rng.integers(0, n_streams, size=n)
    device = rng.integers(0, n_dev, size=n)
    comm = rng.integers(0, 2, size=n)
    preds = [sorted(set(rng.choice(i, size=min(i, rng.integers(0, 3)), replace=False).tolist()))
             if i else [] for i in range(n)]
    succ = [[] for _ in range(n)]
    for j, ps in enumerate(preds):
        for p in ps:
            succ[p].append(j)
    succ_ptr = np.zeros(n + 1, dtype=np.int64)
    succ_ptr[1:] = np.cumsum([len(s) for s in succ])
    succ_idx = np.array([j for s in succ for j in s], dtype=np.int64)
    rank = rng.permutation(n).astype(np.int64)
    pred_count = np.array([len(p) for p in preds], dtype=np.int64)
    args = (duration, sm.astype(np.int64), stream.astype(np.int64), device.astype(np.int64),
            comm.astype(np.int64), rank, pred_count, succ_ptr, succ_idx,
            np.full(n_dev, capacity, dtype=np.int64), n_streams)
    return args, preds


def isclose(a: float, b: float, rel: float) -> bool:
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-9)
