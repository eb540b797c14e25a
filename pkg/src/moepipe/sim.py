"""Discrete-event simulation of the expert pipeline on per-device SM pools.

Each pipeline chunk runs dispatch -> gate/up GEMM -> activation -> down GEMM
-> local reduce -> combine on its own stream.  Dispatch and combine are
collectives: a chunk's GEMM waits for its dispatch on every device, and its
combine waits for the local reduce on every device.  All comm events of a
device share one interconnect channel.  With overlap disabled, every event of
a device is chained onto a single stream in issue order.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import core
from .config import AUTO, RunSpec
from .kernels import DENSE, GROUP_PINGPONG
from .routing import PipelineChunking, RoutingPlan, chunk, route

KIND_ORDER = ("all2all_dispatch", "gate_up_gemm", "silu_act", "down_gemm", "local_reduce",
              "all2all_combine", "shared_expert_gemm")
_KIND_RANK = {k: i for i, k in enumerate(KIND_ORDER)}
KIND_CLASS = {
    "all2all_dispatch": "comm",
    "all2all_combine": "comm",
    "gate_up_gemm": "compute",
    "down_gemm": "compute",
    "shared_expert_gemm": "compute",
    "silu_act": "memory",
    "local_reduce": "memory",
}
EPS = 1e-9


class ScheduleError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelEvent:
    id: int
    kind: str
    chunk: int
    stream: int
    device: int
    sm_demand: int
    duration: float
    deps: tuple[int, ...] = ()

    @property
    def is_comm(self) -> bool:
        return KIND_CLASS[self.kind] == "comm"


@dataclass(frozen=True)
class TraceEvent:
    id: int
    kind: str
    chunk: int
    stream: int
    device: int
    start: float
    end: float
    sms: int
    deps: tuple[int, ...] = ()


@dataclass(frozen=True)
class ScheduleTrace:
    events: tuple[TraceEvent, ...]
    makespan: float
    busy: dict  # class -> ms of kernel time per device, averaged over devices
    sms_per_device: int


def _require_resolved(spec: RunSpec) -> None:
    if not spec.is_resolved:
        raise ValueError("spec still has 'auto' fields; resolve it first (moepipe.optimizer)")


def _gemm_chunk(kernels, kind: str, loads: np.ndarray, k_dim: int, n_dim: int, sms: int) -> float:
    groups = len(loads)
    pairs = int(loads.sum())
    if kind == "DenseGemm":
        active = loads[loads > 0]
        if active.size == 0:
            return kernels.gemm_latency(DENSE, 0, 1, k_dim, n_dim, sms)
        return float(sum(kernels.gemm_latency(DENSE, int(m), 1, k_dim, n_dim, sms) for m in active))
    return kernels.gemm_latency(GROUP_PINGPONG, pairs / groups, groups, k_dim, n_dim, sms)


def build_schedule(chunking: PipelineChunking, spec: RunSpec, kernels) -> list[KernelEvent]:
    """Kernel events of one MoE layer on every device, in issue order."""
    _require_resolved(spec)
    m, hw = spec.model, spec.hardware
    N, D = chunking.num_chunks, chunking.num_devices
    H, I = m.hidden_dim, m.expert_inter_dim
    comp_sms, comm_sms = spec.compute_sm_allocation, spec.comm_sm_allocation
    if max(comp_sms, comm_sms) > hw.sms_per_device:
        raise ScheduleError("SM demand exceeds the device pool")
    kind = spec.gemm_kind
    overlap = spec.overlap_enabled

    if spec.parallel_strategy != "DP_EP":
        raise ScheduleError("build_schedule expects DP_EP; use build_tp_schedule")
    has_comm = D > 1
    dispatch_ms = [kernels.all2all_latency(float(v), comm_sms)
                   for v in chunking.per_device_volume("dispatch")]
    combine_ms = [kernels.all2all_latency(float(v), comm_sms)
                  for v in chunking.per_device_volume("combine")]

    events: list[KernelEvent] = []
    streams_per_device = N + 1
    last_on_device: dict[int, int] = {}

    def add(kind_, c, d, sms, duration, deps=(), stream=None):
        if stream is None:
            stream = d * streams_per_device + (c if overlap else 0)
        deps = tuple(deps)
        if not overlap and d in last_on_device:
            deps = (last_on_device[d],) + deps
        ev = KernelEvent(len(events), kind_, c, stream, d, sms, float(duration), deps)
        events.append(ev)
        last_on_device[d] = ev.id
        return ev.id

    if m.num_shared_experts > 0:
        S = m.num_shared_experts
        for d in range(D):
            tokens = int(chunking.local_tokens[d])
            dur = (kernels.gemm_latency(DENSE, tokens, 1, H, 2 * S * I, comp_sms)
                   + kernels.mem_kernel_latency(tokens, (3 * S * I) // 2, comp_sms)
                   + kernels.gemm_latency(DENSE, tokens, 1, S * I, H, comp_sms))
            stream = d * streams_per_device + (N if overlap else 0)
            add("shared_expert_gemm", 0, d, comp_sms, dur, stream=stream)

    for c in range(N):
        width = len(chunking.chunk_expert_groups[c])
        dispatch_ids = ([add("all2all_dispatch", c, d, comm_sms, dispatch_ms[c]) for d in range(D)]
                        if has_comm else [])
        reduce_ids = []
        for d in range(D):
            loads = chunking.expert_chunk_loads[c, d, :width]
            pairs = int(chunking.chunk_pairs[c, d])
            uniq = int(chunking.chunk_unique_tokens[c, d])
            prev = add("gate_up_gemm", c, d, comp_sms,
                       _gemm_chunk(kernels, kind, loads, H, 2 * I, comp_sms), deps=dispatch_ids)
            prev = add("silu_act", c, d, comp_sms,
                       kernels.mem_kernel_latency(pairs, (3 * I) // 2, comp_sms), deps=(prev,))
            prev = add("down_gemm", c, d, comp_sms,
                       _gemm_chunk(kernels, kind, loads, I, H, comp_sms), deps=(prev,))
            prev = add("local_reduce", c, d, comp_sms,
                       kernels.mem_kernel_latency((pairs + uniq) / 2, H, comp_sms), deps=(prev,))
            reduce_ids.append(prev)
        if has_comm:
            for d in range(D):
                add("all2all_combine", c, d, comm_sms, combine_ms[c], deps=reduce_ids)
    return events


def build_tp_schedule(plan: RoutingPlan, spec: RunSpec, kernels) -> list[KernelEvent]:
    """Kernel events of one tensor-parallel MoE layer.

    Every device gathers all tokens, runs every expert on a 1/D slice of the
    intermediate dimension, then reduce-scatters the partial outputs.  Each
    collective moves ``(D - 1)`` device activations per device.
    """
    _require_resolved(spec)
    m, hw = spec.model, spec.hardware
    D = hw.num_devices
    H = m.hidden_dim
    inter = -(-m.expert_inter_dim // D)
    comp_sms, comm_sms = spec.compute_sm_allocation, spec.comm_sm_allocation
    kind = spec.gemm_kind
    loads = plan.expert_loads
    pairs = int(loads.sum())
    tokens = plan.num_tokens
    volume = float(spec.workload.num_tokens * H * hw.bytes_per_element * (D - 1))
    comm_ms = kernels.all2all_latency(volume, comm_sms)

    events: list[KernelEvent] = []

    def add(kind_, d, sms, duration, deps, stream_offset=0):
        ev = KernelEvent(len(events), kind_, 0, 2 * d + stream_offset, d, sms, float(duration),
                         tuple(deps))
        events.append(ev)
        return ev.id

    gathered = [add("all2all_dispatch", d, comm_sms, comm_ms, ()) for d in range(D)] if D > 1 else []
    last = {}
    for d in range(D):
        prev = add("gate_up_gemm", d, comp_sms,
                   _gemm_chunk(kernels, kind, loads, H, 2 * inter, comp_sms), gathered)
        prev = add("silu_act", d, comp_sms, kernels.mem_kernel_latency(pairs, (3 * inter) // 2, comp_sms),
                   (prev,))
        prev = add("down_gemm", d, comp_sms, _gemm_chunk(kernels, kind, loads, inter, H, comp_sms),
                   (prev,))
        last[d] = add("local_reduce", d, comp_sms,
                      kernels.mem_kernel_latency((pairs + tokens) / 2, H, comp_sms), (prev,))
    if m.num_shared_experts > 0:
        S = m.num_shared_experts
        for d in range(D):
            dur = (kernels.gemm_latency(DENSE, tokens, 1, H, 2 * S * inter, comp_sms)
                   + kernels.mem_kernel_latency(tokens, (3 * S * inter) // 2, comp_sms)
                   + kernels.gemm_latency(DENSE, tokens, 1, S * inter, H, comp_sms))
            if spec.overlap_enabled:
                add("shared_expert_gemm", d, comp_sms, dur, gathered, stream_offset=1)
            else:
                add("shared_expert_gemm", d, comp_sms, dur, gathered + [last[d]])
    if D > 1:
        ends = [e.id for e in events if e.kind in ("local_reduce", "shared_expert_gemm")]
        for d in range(D):
            add("all2all_combine", d, comm_sms, comm_ms, ends)
    return events


def _check_dag(events: list[KernelEvent]) -> None:
    n = len(events)
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for ev in events:
        if ev.id < 0 or ev.id >= n or events[ev.id] is not ev:
            raise ScheduleError("event ids must be 0..n-1 in list order")
        for p in ev.deps:
            if not 0 <= p < n:
                raise ScheduleError(f"event {ev.id} depends on unknown event {p}")
            succ[p].append(ev.id)
            indeg[ev.id] += 1
    stack = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while stack:
        i = stack.pop()
        seen += 1
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    if seen != n:
        raise ScheduleError("dependency cycle in kernel events")


def simulate(events: list[KernelEvent], spec: RunSpec | None = None, *,
             sms_per_device: int | None = None, backend=None) -> ScheduleTrace:
    """List-schedule the events; ties go to (chunk, kind order, event id).

    The SM pool size comes from ``spec`` unless ``sms_per_device`` is given.
    """
    _check_dag(events)
    if sms_per_device is None:
        if spec is None:
            raise ValueError("need a spec or sms_per_device")
        sms_per_device = spec.hardware.sms_per_device
    capacity = sms_per_device
    min_devices = spec.hardware.num_devices if spec is not None else 1
    n = len(events)
    if n == 0:
        return ScheduleTrace((), 0.0, {"compute": 0.0, "memory": 0.0, "comm": 0.0}, capacity)
    for ev in events:
        if ev.sm_demand > capacity or ev.sm_demand < 0:
            raise ScheduleError(f"event {ev.id} demands {ev.sm_demand} SMs of {capacity}")
        if ev.duration < 0:
            raise ScheduleError(f"event {ev.id} has negative duration")
    n_dev = max(max(ev.device for ev in events) + 1, min_devices)
    order = sorted(range(n), key=lambda i: (events[i].chunk, _KIND_RANK[events[i].kind], i))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    succ: list[list[int]] = [[] for _ in range(n)]
    for ev in events:
        for p in ev.deps:
            succ[p].append(ev.id)
    succ_ptr = np.zeros(n + 1, dtype=np.int64)
    succ_ptr[1:] = np.cumsum([len(s) for s in succ])
    succ_idx = np.array([j for s in succ for j in s], dtype=np.int64)
    stream_ids = np.array([ev.stream for ev in events], dtype=np.int64)
    args = (
        np.array([ev.duration for ev in events]),
        np.array([ev.sm_demand for ev in events], dtype=np.int64),
        stream_ids,
        np.array([ev.device for ev in events], dtype=np.int64),
        np.array([ev.is_comm for ev in events], dtype=np.int64),
        rank,
        np.array([len(ev.deps) for ev in events], dtype=np.int64),
        succ_ptr,
        succ_idx,
        np.full(n_dev, capacity, dtype=np.int64),
        int(stream_ids.max()) + 1,
    )
    start, end = (backend or core.list_schedule)(*args)
    trace_events = tuple(
        TraceEvent(ev.id, ev.kind, ev.chunk, ev.stream, ev.device, float(start[i]), float(end[i]),
                   ev.sm_demand, ev.deps)
        for i, ev in enumerate(events))
    busy = {"compute": 0.0, "memory": 0.0, "comm": 0.0}
    for ev in events:
        busy[KIND_CLASS[ev.kind]] += ev.duration
    devices = len({ev.device for ev in events})
    busy = {k: v / devices for k, v in busy.items()}
    return ScheduleTrace(trace_events, float(end.max()), busy, capacity)


# --------------------------------------------------------------------------- validation

class TraceError(AssertionError):
    pass


def validate_trace(trace: ScheduleTrace, events: list[KernelEvent] | None = None) -> None:
    """Raise TraceError unless the trace respects deps, streams, SMs and channels."""
    evs = trace.events
    by_id = {e.id: e for e in evs}
    if events is not None:
        for k in events:
            t = by_id.get(k.id)
            if t is None:
                raise TraceError(f"event {k.id} missing from trace")
            if abs((t.end - t.start) - k.duration) > EPS * max(1.0, k.duration):
                raise TraceError(f"event {k.id} ran {t.end - t.start} instead of {k.duration}")
    for e in evs:
        if e.end < e.start - EPS:
            raise TraceError(f"event {e.id} ends before it starts")
        for p in e.deps:
            if by_id[p].end > e.start + EPS:
                raise TraceError(f"event {e.id} starts at {e.start} before dep {p} ends at {by_id[p].end}")

    def exclusive(key, what):
        groups: dict = {}
        for e in evs:
            k = key(e)
            if k is not None:
                groups.setdefault(k, []).append(e)
        for k, items in groups.items():
            items = sorted((e for e in items if e.end - e.start > EPS), key=lambda e: (e.start, e.end))
            for a, b in zip(items, items[1:]):
                if b.start < a.end - EPS:
                    raise TraceError(f"{what} {k}: events {a.id} and {b.id} overlap")

    exclusive(lambda e: e.stream, "stream")
    exclusive(lambda e: e.device if KIND_CLASS[e.kind] == "comm" else None, "comm channel of device")

    by_device: dict = {}
    for e in evs:
        if e.end - e.start > EPS:
            by_device.setdefault(e.device, []).append(e)
    for d, items in by_device.items():
        points = sorted([(e.start, 1, e.sms) for e in items] + [(e.end, 0, e.sms) for e in items])
        used = 0
        for _, is_start, sms in points:
            used += sms if is_start else -sms
            if used > trace.sms_per_device:
                raise TraceError(f"device {d} uses {used} SMs of {trace.sms_per_device}")


TRACE_COLUMNS = ("id", "kind", "chunk", "stream", "device", "start_ms", "end_ms", "sms", "deps")


def format_trace(trace: ScheduleTrace) -> str:
    out = io.StringIO()
    out.write(f"# sms_per_device={trace.sms_per_device} makespan_ms={trace.makespan!r}\n")
    out.write("\t".join(TRACE_COLUMNS) + "\n")
    for e in trace.events:
        deps = ",".join(str(p) for p in e.deps) or "-"
        out.write(f"{e.id}\t{e.kind}\t{e.chunk}\t{e.stream}\t{e.device}\t{e.start!r}\t{e.end!r}"
                  f"\t{e.sms}\t{deps}\n")
    return out.getvalue()


def parse_trace(text: str) -> ScheduleTrace:
    sms_per_device = None
    events = []
    header = None
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("sms_per_device="):
                    sms_per_device = int(tok.split("=", 1)[1])
            continue
        if not line.strip():
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
            if tuple(header) != TRACE_COLUMNS:
                raise ValueError(f"unexpected trace header {header}")
            continue
        row = dict(zip(header, cells))
        deps = () if row["deps"] == "-" else tuple(int(x) for x in row["deps"].split(","))
        events.append(TraceEvent(int(row["id"]), row["kind"], int(row["chunk"]), int(row["stream"]),
                                 int(row["device"]), float(row["start_ms"]), float(row["end_ms"]),
                                 int(row["sms"]), deps))
    if sms_per_device is None:
        raise ValueError("trace lacks the sms_per_device header")
    makespan = max((e.end for e in events), default=0.0)
    busy = {"compute": 0.0, "memory": 0.0, "comm": 0.0}
    for e in events:
        busy[KIND_CLASS[e.kind]] += e.end - e.start
    return ScheduleTrace(tuple(events), makespan, busy, sms_per_device)


# ------------------------------------------------------------------------ conveniences

@dataclass(frozen=True)
class MoESimulation:
    spec: RunSpec
    chunking: PipelineChunking | None  # None for tensor-parallel layers
    events: list
    trace: ScheduleTrace

    @property
    def makespan(self) -> float:
        return self.trace.makespan


def simulate_moe(spec: RunSpec, plan: RoutingPlan, kernels, *, backend=None) -> MoESimulation:
    """Chunk, build and simulate one MoE layer for a resolved spec."""
    _require_resolved(spec)
    if spec.parallel_strategy == "TP_TP":
        events = build_tp_schedule(plan, spec, kernels)
        return MoESimulation(spec, None, events, simulate(events, spec, backend=backend))
    chunking = chunk(plan, spec.pipeline_number, spec)
    events = build_schedule(chunking, spec, kernels)
    return MoESimulation(spec, chunking, events, simulate(events, spec, backend=backend))


def compare_overlap(spec: RunSpec, N: int, kernels, plan: RoutingPlan | None = None
                    ) -> tuple[float, float, float]:
    """(overlapped, chunked-but-serial, monolithic serial) MoE makespans in ms."""
    _require_resolved(spec.replace(pipeline_number=1))
    plan = plan if plan is not None else route(spec)
    overlapped = simulate_moe(spec.replace(pipeline_number=N, overlap_enabled=True), plan, kernels)
    serial = simulate_moe(spec.replace(pipeline_number=N, overlap_enabled=False), plan, kernels)
    mono = simulate_moe(spec.replace(pipeline_number=1, overlap_enabled=False), plan, kernels)
    return overlapped.makespan, serial.makespan, mono.makespan
