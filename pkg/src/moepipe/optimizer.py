"""Resolution of the ``auto`` run knobs: GEMM kind, SM split and pipeline number.

Pipeline-number model: splitting the expert block into N chunks hides
``L(N) = C / N * (N - 1)`` of the shorter of communication and computation
(``C = min(T_comm, T_comp)``) and costs ``R(N) = k * N + b`` extra fixed
communication overhead.  The objective ``L - R`` peaks at ``N* = sqrt(C / k)``
with value ``C - b - 2 * sqrt(k * C)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .config import AUTO, RunSpec, experts_per_device
from .kernels import DENSE, GROUP_PINGPONG
from .routing import RoutingPlan, chunk, route

DEFAULT_THRESHOLDS = (2048, 3584)
COMM_TOLERANCE = 0.05


class SMAllocationError(ValueError):
    pass


@dataclass(frozen=True)
class OverheadModel:
    slope_k: float
    intercept_b: float

    def __post_init__(self):
        if self.slope_k < 0 or self.intercept_b < 0:
            raise ValueError("overhead slope and intercept must be >= 0")

    def __call__(self, N: int) -> float:
        return self.slope_k * N + self.intercept_b


@dataclass(frozen=True)
class PNDecision:
    n_star_closed: float
    n_star_int: int
    objective_values: tuple[float, ...]  # index i holds the objective at N = i + 1
    chosen_N: int
    C: float = 0.0

    def objective(self, N: int) -> float:
        return self.objective_values[N - 1]

    @property
    def gain(self) -> float:
        return self.objective(self.chosen_N)


def select_gemm_kind(m_per_expert: float, thresholds=DEFAULT_THRESHOLDS, kernels=None, *,
                     groups: int = 16, k_dim: int = 5120, n_dim: int = 1536, sms: int = 116) -> str:
    """GroupGemm for light per-expert loads, DenseGemm for heavy ones.

    With ``kernels`` the two are compared directly on the calibrated latency
    (one grouped call versus ``groups`` dense calls); ties go to GroupGemm.
    """
    lo, hi = thresholds
    if not lo < hi:
        raise ValueError("thresholds must satisfy lo < hi")
    if kernels is not None:
        group = kernels.gemm_latency(GROUP_PINGPONG, m_per_expert, groups, k_dim, n_dim, sms)
        dense = kernels.gemm_latency(DENSE, m_per_expert, groups, k_dim, n_dim, sms)
        return "DenseGemm" if dense < group else "GroupGemm"
    return "DenseGemm" if m_per_expert > hi else "GroupGemm"


def optimal_pn(T_comm: float, T_comp: float, overhead: OverheadModel, E_local: int) -> PNDecision:
    if T_comm < 0 or T_comp < 0:
        raise ValueError("times must be >= 0")
    if E_local < 1:
        raise ValueError("E_local must be >= 1")
    C = min(T_comm, T_comp)
    k, b = overhead.slope_k, overhead.intercept_b
    values = tuple(C / N * (N - 1) - (k * N + b) for N in range(1, E_local + 1))
    best = max(values)
    chosen = values.index(best) + 1  # first maximum, i.e. the smallest N
    if k == 0:
        closed = math.inf
        n_int = E_local
    else:
        closed = math.sqrt(C / k)
        n_int = int(min(max(round(closed), 1), E_local))
    return PNDecision(closed, n_int, values, chosen, C)


def gain_bound(C: float, overhead: OverheadModel) -> float:
    """Best achievable objective over real N."""
    return C - overhead.intercept_b - 2.0 * math.sqrt(overhead.slope_k * C)


def fit_overhead(points) -> OverheadModel:
    """Non-negative least squares fit of overhead = k * N + b over (N, overhead) points."""
    pts = [(float(n), float(r)) for n, r in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 (N, overhead) points")
    A = np.array([[n, 1.0] for n, _ in pts])
    y = np.array([r for _, r in pts])
    (k, b), _ = nnls(A, y)
    return OverheadModel(float(k), float(b))


def comm_overhead_points(kernels, volume: float, sms: int, max_N: int):
    """(N, extra ms) of splitting both all2all phases of ``volume`` bytes into N chunks."""
    fixed = kernels.all2all_latency(0.0, sms)
    transfer = kernels.all2all_latency(volume, sms) - fixed
    out = []
    for N in range(1, max_N + 1):
        chunked = N * kernels.all2all_latency(volume / N, sms)
        out.append((N, 2.0 * max(chunked - transfer, 0.0)))
    return out


def estimate_overhead(kernels, volume: float, sms: int, max_N: int) -> OverheadModel:
    pts = comm_overhead_points(kernels, volume, sms, max(max_N, 3))
    return fit_overhead(pts)


# ------------------------------------------------------------------------ SM split

def _mean_expert_load(spec: RunSpec, plan: RoutingPlan | None) -> float:
    if plan is not None:
        return float(plan.expert_loads.mean())
    m, wl = spec.model, spec.workload
    return wl.num_tokens * spec.hardware.num_devices * m.top_k / m.num_experts


def _dispatch_volume(spec: RunSpec, plan: RoutingPlan | None) -> float:
    if plan is not None and spec.hardware.num_devices > 1 and spec.parallel_strategy == "DP_EP":
        return float(chunk(plan, 1, spec).per_device_volume("dispatch")[0])
    from .analytic import comm_volume
    return comm_volume(spec).upper / 2.0 if spec.hardware.num_devices > 1 else 0.0


def _local_experts(spec: RunSpec) -> int:
    return experts_per_device(spec) if spec.parallel_strategy == "DP_EP" else spec.model.num_experts


def choose_comm_sms(kernels, volume: float, tolerance: float = COMM_TOLERANCE) -> int:
    """Smallest comm SM count whose all2all latency is within tolerance of the best."""
    grid = sorted(kernels.comm_sm_grid)
    lat = [kernels.all2all_latency(volume, s) for s in grid]
    best = min(lat)
    return next(s for s, t in zip(grid, lat) if t <= best * (1 + tolerance))


def resolve_sm_allocation(spec: RunSpec, kernels, plan: RoutingPlan | None = None) -> tuple[int, int]:
    """(compute_sms, comm_sms) for this scenario; explicit fields are kept."""
    total = spec.hardware.sms_per_device
    if total < 2:
        raise SMAllocationError(f"an SM pool of {total} cannot host compute and comm kernels")
    m = spec.model
    comm = spec.comm_sm_allocation
    if comm == AUTO:
        comm = choose_comm_sms(kernels, _dispatch_volume(spec, plan))
    compute = spec.compute_sm_allocation
    if compute == AUTO:
        kind = spec.gemm_kind if spec.gemm_kind != AUTO else GROUP_PINGPONG
        sat = kernels.gemm_saturation_sms(kind, _mean_expert_load(spec, plan),
                                          _local_experts(spec), m.hidden_dim,
                                          2 * m.expert_inter_dim)
        if sat + comm > total and spec.comm_sm_allocation == AUTO:
            share = comm / (sat + comm)
            comm = min(max(1, round(total * share)), total - 1)
            compute = total - comm
            warnings.warn(f"SM saturation points exceed the pool of {total}; "
                          f"falling back to a proportional split {compute}/{comm}", stacklevel=2)
        else:
            compute = min(sat, total - comm)
            if compute < 1:
                raise SMAllocationError(f"comm_sm_allocation={comm} leaves no SMs for compute")
    return int(compute), int(comm)


# ------------------------------------------------------------------------- resolve

@dataclass(frozen=True)
class DecisionReport:
    gemm_kind: str
    m_per_expert: float
    compute_sms: int
    comm_sms: int
    pipeline_number: int
    t_comm: float = 0.0
    t_comp: float = 0.0
    overhead: OverheadModel | None = None
    pn: PNDecision | None = None
    simulated: tuple[tuple[int, float], ...] = field(default=())  # (N, MoE makespan ms)

    def as_dict(self) -> dict:
        out = {
            "gemm_kind": self.gemm_kind,
            "m_per_expert": self.m_per_expert,
            "compute_sms": self.compute_sms,
            "comm_sms": self.comm_sms,
            "pipeline_number": self.pipeline_number,
            "t_comm_ms": self.t_comm,
            "t_comp_ms": self.t_comp,
        }
        if self.overhead is not None:
            out["overhead_slope_k"] = self.overhead.slope_k
            out["overhead_intercept_b"] = self.overhead.intercept_b
        if self.pn is not None:
            out["n_star_closed"] = self.pn.n_star_closed if math.isfinite(self.pn.n_star_closed) else None
            out["n_star_int"] = self.pn.n_star_int
            out["objective"] = list(self.pn.objective_values)
        if self.simulated:
            out["simulated_moe_ms"] = [[n, t] for n, t in self.simulated]
        return out


def format_decision(report: DecisionReport | dict) -> str:
    d = report.as_dict() if isinstance(report, DecisionReport) else report
    lines = [
        f"gemm_kind        {d['gemm_kind']} (mean load {d['m_per_expert']:.1f} tokens/expert)",
        f"sm split         compute={d['compute_sms']} comm={d['comm_sms']}",
        f"pipeline_number  {d['pipeline_number']}",
    ]
    if "objective" in d:
        closed = d["n_star_closed"]
        lines.append(f"T_comm={d['t_comm_ms']:.4f} ms  T_comp={d['t_comp_ms']:.4f} ms  "
                     f"k={d['overhead_slope_k']:.5f} ms  b={d['overhead_intercept_b']:.5f} ms  "
                     f"N*={'inf' if closed is None else f'{closed:.3f}'}")
        lines.append("N\tobjective_ms\tsimulated_ms")
        sim = {n: t for n, t in d.get("simulated_moe_ms", [])}
        for i, v in enumerate(d["objective"], 1):
            cell = f"{sim[i]:.6f}" if i in sim else "-"
            lines.append(f"{i}\t{v:.6f}\t{cell}")
    return "\n".join(lines) + "\n"


def _comp_and_comm_times(spec: RunSpec, plan: RoutingPlan, kernels) -> tuple[float, float, float]:
    """(T_comm transfer ms, T_comp ms, per-device dispatch volume) of the monolithic layer."""
    from .sim import KIND_CLASS, build_schedule

    probe = spec.replace(pipeline_number=1, overlap_enabled=False)
    chunking = chunk(plan, 1, probe)
    events = build_schedule(chunking, probe, kernels)
    comp = np.zeros(chunking.num_devices)
    for ev in events:
        if KIND_CLASS[ev.kind] != "comm" and ev.kind != "shared_expert_gemm":
            comp[ev.device] += ev.duration
    volume = float(chunking.per_device_volume("dispatch")[0])
    sms = spec.comm_sm_allocation
    fixed = kernels.all2all_latency(0.0, sms)
    t_comm = (kernels.all2all_latency(volume, sms) - fixed
              + kernels.all2all_latency(float(chunking.per_device_volume("combine")[0]), sms) - fixed)
    return t_comm, float(comp.max()), volume


def resolve_auto_report(spec: RunSpec, plan: RoutingPlan | None, kernels,
                        overhead: OverheadModel | None = None, *, refine: bool = True
                        ) -> tuple[RunSpec, DecisionReport]:
    """Fill every ``auto`` field of ``spec`` and explain the choices.

    Order: SM split, then GEMM kind from the realized mean expert load, then
    pipeline number.  The closed-form optimum screens out loads where no
    N > 1 pays off; otherwise every N is simulated and the fastest kept.
    """
    plan = plan if plan is not None else route(spec)
    m = spec.model
    e_local = _local_experts(spec)
    load = _mean_expert_load(spec, plan)

    compute_sms, comm_sms = resolve_sm_allocation(spec, kernels, plan)
    resolved = spec.replace(compute_sm_allocation=compute_sms, comm_sm_allocation=comm_sms)

    kind = spec.gemm_kind
    if kind == AUTO:
        kind = select_gemm_kind(load, kernels=kernels, groups=e_local, k_dim=m.hidden_dim,
                                n_dim=m.expert_inter_dim, sms=compute_sms)
        resolved = resolved.replace(gemm_kind=kind)

    N = spec.pipeline_number
    pn = None
    simulated: list[tuple[int, float]] = []
    t_comm = t_comp = 0.0
    if N == AUTO:
        probe = resolved.replace(pipeline_number=1)
        if spec.parallel_strategy != "DP_EP" or e_local == 1 or spec.hardware.num_devices == 1:
            N = 1
        else:
            t_comm, t_comp, volume = _comp_and_comm_times(probe, plan, kernels)
            if overhead is None:
                overhead = estimate_overhead(kernels, volume, comm_sms, e_local)
            pn = optimal_pn(t_comm, t_comp, overhead, e_local)
            if max(pn.objective_values[1:], default=0.0) <= 0.0:
                N = 1
            elif not refine:
                N = pn.chosen_N
            else:
                from .sim import simulate_moe
                for n in range(1, e_local + 1):
                    sim = simulate_moe(resolved.replace(pipeline_number=n), plan, kernels)
                    simulated.append((n, sim.makespan))
                N = min(simulated, key=lambda p: (p[1], p[0]))[0]
        resolved = resolved.replace(pipeline_number=N)

    report = DecisionReport(kind, load, compute_sms, comm_sms, N, t_comm, t_comp,
                            overhead, pn, tuple(simulated))
    return resolved, report


def resolve_auto(spec: RunSpec, plan: RoutingPlan | None, kernels,
                 overhead: OverheadModel | None = None) -> RunSpec:
    """``spec`` with every ``auto`` field resolved; explicit fields are kept."""
    if spec.is_resolved:
        return spec
    return resolve_auto_report(spec, plan, kernels, overhead)[0]
