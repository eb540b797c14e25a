"""Simulated top-k routing and per-pipeline token dispatch accounting.

Tokens are numbered globally: device ``d`` owns tokens
``[d * num_tokens, (d + 1) * num_tokens)``.  Expert ``e`` lives on device
``e // experts_per_device``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .config import RunSpec, experts_per_device

_BATCH = 8192


@dataclass(frozen=True, eq=False)
class RoutingPlan:
    assignments: np.ndarray          # (tokens, k) expert ids, sorted per row
    token_home_device: np.ndarray    # (tokens,)
    expert_home_device: np.ndarray   # (experts,)

    @property
    def num_tokens(self) -> int:
        return self.assignments.shape[0]

    @property
    def top_k(self) -> int:
        return self.assignments.shape[1]

    @property
    def num_experts(self) -> int:
        return self.expert_home_device.shape[0]

    @cached_property
    def expert_token_lists(self) -> tuple[np.ndarray, ...]:
        flat = self.assignments.ravel()
        tokens = np.repeat(np.arange(self.num_tokens), self.top_k)
        order = np.lexsort((tokens, flat))
        counts = np.bincount(flat, minlength=self.num_experts)
        return tuple(np.split(tokens[order], np.cumsum(counts)[:-1]))

    @cached_property
    def expert_loads(self) -> np.ndarray:
        return np.bincount(self.assignments.ravel(), minlength=self.num_experts)

    def __eq__(self, other):
        if not isinstance(other, RoutingPlan):
            return NotImplemented
        return (np.array_equal(self.assignments, other.assignments)
                and np.array_equal(self.token_home_device, other.token_home_device)
                and np.array_equal(self.expert_home_device, other.expert_home_device))

    __hash__ = None


def _topk_by_keys(keys: np.ndarray, k: int) -> np.ndarray:
    idx = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    return np.sort(idx, axis=1)


def _expert_log_weights(spec: RunSpec) -> np.ndarray:
    E = spec.model.num_experts
    r = spec.workload.routing
    if r.kind == "zipf":
        return -r.s * np.log(np.arange(1, E + 1, dtype=float))
    return np.zeros(E)


def route(spec: RunSpec) -> RoutingPlan:
    """Assign every token a k-subset of experts, deterministically per seed.

    Sampling without replacement proportional to the expert weights is done
    with Gumbel top-k; uniform weights only need iid uniform keys.  With a device limit ``g``, a token first draws ``g``
    devices (weighted by their total expert weight), then its experts among
    those devices only.
    """
    m, hw, wl = spec.model, spec.hardware, spec.workload
    D, E, k = hw.num_devices, m.num_experts, m.top_k
    T = wl.num_tokens * D
    token_home = np.repeat(np.arange(D), wl.num_tokens)
    if spec.parallel_strategy == "DP_EP":
        e_local = experts_per_device(spec)
        expert_home = np.arange(E) // e_local
    else:
        # Tensor parallel: every device holds a slice of every expert.
        e_local, expert_home = E, np.zeros(E, dtype=np.int64)

    if wl.routing.kind == "explicit":
        assignments = np.array(wl.routing.assignments, dtype=np.int64).reshape(T, k)
        assignments = np.sort(assignments, axis=1)
        if np.any(assignments < 0) or np.any(assignments >= E):
            raise ValueError("explicit routing names an unknown expert")
        if k > 1 and np.any(np.diff(assignments, axis=1) == 0):
            raise ValueError("explicit routing repeats an expert within a token")
        return RoutingPlan(assignments, token_home, expert_home)

    g = m.device_limit_g
    limited = g is not None and g < D and spec.parallel_strategy == "DP_EP"
    if limited and k > g * e_local:
        raise ValueError(f"top_k={k} cannot fit on device_limit_g={g} devices of {e_local} experts")

    rng = np.random.default_rng(wl.random_seed)
    logw = _expert_log_weights(spec)
    weighted = wl.routing.kind != "uniform"
    if limited:
        device_logw = np.log(np.exp(logw).reshape(D, e_local).sum(axis=1))
    out = np.empty((T, k), dtype=np.int64)
    for lo in range(0, T, _BATCH):
        n = min(_BATCH, T - lo)
        keys = logw + rng.gumbel(size=(n, E)) if weighted else rng.random((n, E))
        if limited:
            dev_keys = device_logw + rng.gumbel(size=(n, D))
            chosen = np.zeros((n, D), dtype=bool)
            np.put_along_axis(chosen, _topk_by_keys(dev_keys, g), True, axis=1)
            keys = np.where(np.repeat(chosen, e_local, axis=1), keys, -np.inf)
        out[lo:lo + n] = _topk_by_keys(keys, k)
    return RoutingPlan(out, token_home, expert_home)


def imbalance_stats(plan: RoutingPlan) -> tuple[int, float, float]:
    """(max expert load, mean load, coefficient of variation)."""
    loads = plan.expert_loads.astype(float)
    mean = loads.mean()
    cv = float(loads.std() / mean) if mean > 0 else 0.0
    return int(loads.max()), float(mean), cv


def expert_groups(e_local: int, N: int) -> list[range]:
    """Contiguous local-expert groups, balanced, remainder to the earliest groups."""
    base, extra = divmod(e_local, N)
    groups, start = [], 0
    for i in range(N):
        size = base + (1 if i < extra else 0)
        groups.append(range(start, start + size))
        start += size
    return groups


@dataclass(frozen=True, eq=False)
class PipelineChunking:
    num_chunks: int
    chunk_expert_groups: tuple[range, ...]   # local expert indices per chunk
    # chunk_token_sets[c][(src, dst)] -> token ids sent src -> dst in chunk c (src != dst)
    chunk_token_sets: tuple[dict, ...]
    dispatch_volume: np.ndarray              # (N, D, D) bytes src -> dst
    combine_volume: np.ndarray               # (N, D, D) bytes src -> dst
    expert_chunk_loads: np.ndarray           # (N, D, experts per chunk max) tokens per expert
    chunk_pairs: np.ndarray                  # (N, D) token-expert pairs computed
    chunk_unique_tokens: np.ndarray          # (N, D) distinct tokens computed
    local_tokens: np.ndarray                 # (D,) tokens resident per device

    @property
    def num_devices(self) -> int:
        return self.chunk_pairs.shape[1]

    def per_device_volume(self, phase: str) -> np.ndarray:
        """(N,) max over devices of max(send, recv) bytes for a phase."""
        vol = self.dispatch_volume if phase == "dispatch" else self.combine_volume
        send = vol.sum(axis=2)
        recv = vol.sum(axis=1)
        return np.maximum(send, recv).max(axis=1)

    def total_sent(self, phase: str = "both") -> np.ndarray:
        """(D,) bytes each device sends over all chunks."""
        phases = ("dispatch", "combine") if phase == "both" else (phase,)
        total = np.zeros(self.num_devices)
        for ph in phases:
            vol = self.dispatch_volume if ph == "dispatch" else self.combine_volume
            total += vol.sum(axis=(0, 2))
        return total


def chunk(plan: RoutingPlan, N: int, spec: RunSpec) -> PipelineChunking:
    """Split the local experts of every device into N pipelines.

    Chunk ``c`` covers group ``c`` of every device.  A token is sent to a
    destination device once per chunk, however many of that device's chunk
    experts selected it.
    """
    e_local = experts_per_device(spec)
    if not 1 <= N <= e_local:
        raise ValueError(f"pipeline number {N} outside [1, {e_local}]")
    D = spec.hardware.num_devices
    bpe = spec.hardware.bytes_per_element
    row_bytes = spec.model.hidden_dim * bpe
    groups = expert_groups(e_local, N)
    local_chunk = np.empty(e_local, dtype=np.int64)
    for c, grp in enumerate(groups):
        local_chunk[list(grp)] = c

    T, k = plan.assignments.shape
    experts = plan.assignments.ravel()
    tokens = np.repeat(np.arange(T), k)
    dst = plan.expert_home_device[experts]
    chk = local_chunk[experts % e_local]
    src = plan.token_home_device[tokens]

    # Distinct (token, chunk, dst) triples are what crosses the wire.
    key = (tokens * N + chk) * D + dst
    ukey = np.unique(key)
    u_dst = ukey % D
    u_chk = (ukey // D) % N
    u_tok = ukey // (D * N)
    u_src = plan.token_home_device[u_tok]

    counts = np.bincount((u_chk * D + u_src) * D + u_dst, minlength=N * D * D).reshape(N, D, D)
    unique_tokens = counts.sum(axis=1)                     # (N, D) rows arriving at dst
    cross = counts.copy()
    idx = np.arange(D)
    cross[:, idx, idx] = 0
    dispatch_volume = cross * row_bytes
    combine_volume = np.transpose(dispatch_volume, (0, 2, 1)).copy()

    # One sort on a composite (chunk, src, dst, token) key groups the wire sets.
    remote = u_src != u_dst
    seg_key = (u_chk[remote] * D + u_src[remote]) * D + u_dst[remote]
    r_key = np.sort(seg_key * T + u_tok[remote])
    r_seg, r_tok = r_key // T, r_key % T
    token_sets = [dict() for _ in range(N)]
    if r_tok.size:
        starts = np.flatnonzero(np.r_[True, r_seg[1:] != r_seg[:-1]])
        ends = np.r_[starts[1:], r_tok.size]
        for a, b in zip(starts.tolist(), ends.tolist()):
            c, rest = divmod(int(r_seg[a]), D * D)
            token_sets[c][divmod(rest, D)] = r_tok[a:b]

    pairs = np.bincount(chk * D + dst, minlength=N * D).reshape(N, D)
    width = max(len(g) for g in groups)
    slot = np.empty(e_local, dtype=np.int64)
    for grp in groups:
        slot[list(grp)] = np.arange(len(grp))
    loads = np.bincount((chk * D + dst) * width + slot[experts % e_local],
                        minlength=N * D * width).reshape(N, D, width)

    return PipelineChunking(
        num_chunks=N,
        chunk_expert_groups=tuple(groups),
        chunk_token_sets=tuple(token_sets),
        dispatch_volume=dispatch_volume,
        combine_volume=combine_volume,
        expert_chunk_loads=loads,
        chunk_pairs=pairs,
        chunk_unique_tokens=unique_tokens,
        local_tokens=np.bincount(plan.token_home_device, minlength=D),
    )
