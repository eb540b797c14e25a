"""Closed-form cost model of one MoE layer under TP+TP and DP+EP."""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunSpec

WEIGHT_BYTES_PER_PARAM = 2
ACT_BYTES = 2


@dataclass(frozen=True)
class LayerCostBreakdown:
    t_attn: float
    t_moe: float
    t_comm: float
    w_attn: float
    w_moe: float
    f_attn: float
    f_moe: float
    comm_volume: float
    # Components of w_moe, kept so the activation/weight split is inspectable.
    w_moe_act: float = 0.0
    w_moe_weight: float = 0.0

    @property
    def total(self) -> float:
        return self.t_attn + self.t_moe + self.t_comm


@dataclass(frozen=True)
class CommVolumeBound:
    lower: float
    upper: float
    worst_case_equals_tp: bool


def activated_experts(E: int, k: int, m: int) -> float:
    """Expected number of distinct experts hit by ``m`` tokens routing top-``k`` of ``E``."""
    if not 1 <= k <= E:
        raise ValueError("need 1 <= k <= E")
    if m < 0:
        raise ValueError("need m >= 0")
    return (1.0 - (1.0 - k / E) ** m) * E


def activation_bytes(spec: RunSpec) -> float:
    """P: activation bytes of the tokens resident on one device."""
    return spec.workload.num_tokens * spec.model.hidden_dim * spec.hardware.bytes_per_element


def effective_device_limit(spec: RunSpec) -> int:
    m, d = spec.model, spec.hardware.num_devices
    g = min(m.top_k, d)
    if m.device_limit_g is not None:
        g = min(g, m.device_limit_g)
    return g


def comm_volume(spec: RunSpec, strategy: str | None = None) -> CommVolumeBound:
    """Per-device communication bytes of one MoE layer (both all2all phases)."""
    strategy = strategy or spec.parallel_strategy
    p = activation_bytes(spec)
    d = spec.hardware.num_devices
    if strategy == "TP_TP":
        v = 2.0 * p * (d - 1)
        return CommVolumeBound(v, v, True)
    if strategy != "DP_EP":
        raise ValueError(f"unknown strategy {strategy!r}")
    g = effective_device_limit(spec)
    base = 2.0 * p / d * (d - 1)
    return CommVolumeBound(base, g * base, g == d)


def split_io_volume(mode: str, m: float, p0: float, p1: float, E: int, w_exp: float, N: int) -> float:
    """Memory I/O of an expert block split into N pipelines.

    Horizontal (row) split writes each output once; vertical (column) split
    re-writes the output once per pipeline.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if mode == "horizontal":
        return m * p0 + E * w_exp + m * p1
    if mode == "vertical":
        return m * p0 + E * w_exp + N * m * p1
    raise ValueError(f"unknown split mode {mode!r}")


def layer_flops(spec: RunSpec) -> tuple[float, float]:
    """(attention FLOPs, MoE FLOPs) for the global batch of one layer."""
    m, wl = spec.model, spec.workload
    tokens = wl.num_tokens * spec.hardware.num_devices
    attn_params = m.attention_weight_bytes / WEIGHT_BYTES_PER_PARAM
    # Projections plus causal score/value products over the context.
    f_attn = 2.0 * tokens * attn_params + 2.0 * tokens * wl.context_len * m.hidden_dim
    per_expert = 2.0 * 3 * m.hidden_dim * m.expert_inter_dim
    f_moe = tokens * (m.top_k + m.num_shared_experts) * per_expert
    return f_attn, f_moe


def layer_cost(spec: RunSpec, strategy: str | None = None) -> LayerCostBreakdown:
    strategy = strategy or spec.parallel_strategy
    m, hw, wl = spec.model, spec.hardware, spec.workload
    d, k = hw.num_devices, m.top_k
    tokens = wl.num_tokens * d
    m_in = m_out = tokens * m.hidden_dim * ACT_BYTES
    kv = wl.kv_cache_bytes if wl.phase == "decode" else 0
    attn_weight = m.attention_weight_bytes
    moe_weight = (m.num_experts + m.num_shared_experts) * m.expert_weight_bytes

    if strategy == "TP_TP":
        w_attn = m_in + m_out + kv / d + attn_weight / d
        w_act = m_in * k + m_out * k
    elif strategy == "DP_EP":
        w_attn = (m_in + m_out + kv) / d + attn_weight
        w_act = (m_in * k + m_out * k) / d
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    w_weight = moe_weight / d
    w_moe = w_act + w_weight

    f_attn, f_moe = layer_flops(spec)
    t_attn = 1e3 * max(f_attn / (d * hw.compute_rate), w_attn / (d * hw.mem_bandwidth))
    t_moe = 1e3 * max(f_moe / (d * hw.compute_rate), w_moe / (d * hw.mem_bandwidth))

    if d == 1:
        volume, t_comm = 0.0, 0.0
    else:
        bound = comm_volume(spec, strategy)
        volume = bound.upper
        t_comm = 1e3 * volume / hw.interconnect_bandwidth + 2 * hw.comm_fixed_overhead_per_op
    return LayerCostBreakdown(t_attn, t_moe, t_comm, w_attn, w_moe, f_attn, f_moe, volume,
                              w_moe_act=w_act, w_moe_weight=w_weight)


def full_model_latency(spec: RunSpec, breakdown: LayerCostBreakdown) -> float:
    """Unoverlapped model latency: layers x (attention + MoE + communication)."""
    return spec.model.num_layers * (breakdown.t_attn + breakdown.t_moe + breakdown.t_comm)
