from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moepipe.analytic import (
    LayerCostBreakdown, activated_experts, comm_volume, full_model_latency, layer_cost,
    split_io_volume,
)
from moepipe.config import RoutingDistribution
from moepipe.kernels import RooflineKernels
from moepipe.routing import route
from moepipe.sim import simulate_moe

from conftest import make_spec, resolved, with_model

MB = 1 << 20


def mc_activated(E, k, m, trials, seed=0):
    """Independent oracle: random k-subsets via argsort of uniform keys."""
    rng = np.random.default_rng(seed)
    hits = np.zeros((trials, E), dtype=bool)
    for _ in range(m):
        picks = np.argsort(rng.random((trials, E)), axis=1)[:, :k]
        np.put_along_axis(hits, picks, True, axis=1)
    return hits.sum(axis=1).mean()


def test_activated_experts_examples():
    assert activated_experts(8, 2, 1) == 2.0
    assert activated_experts(16, 2, 8) == pytest.approx(16 * (1 - 0.875**8))
    assert activated_experts(16, 2, 8) == pytest.approx(10.502257, abs=1e-6)
    assert activated_experts(160, 6, 10000) == pytest.approx(160, abs=1e-6)
    assert activated_experts(16, 2, 0) == 0.0


def test_activated_experts_matches_independent_monte_carlo():
    assert mc_activated(16, 2, 8, 200_000) == pytest.approx(activated_experts(16, 2, 8), rel=0.005)


@given(E=st.integers(1, 300), k=st.integers(1, 300), m=st.integers(0, 5000), dk=st.integers(0, 5),
       dm=st.integers(0, 100))
def test_activated_experts_monotone_and_bounded(E, k, m, dk, dm):
    k = min(k, E)
    a = activated_experts(E, k, m)
    assert 0 <= a <= E + 1e-9
    assert activated_experts(E, k, m + dm) >= a - 1e-9
    assert activated_experts(E, min(k + dk, E), m) >= a - 1e-9


def test_comm_volume_examples():
    spec = make_spec(E=16, k=4, D=4, tokens=1024, hidden=4096)  # P = 8 MB per device
    assert comm_volume(spec, "TP_TP").upper == 48 * MB
    dp = comm_volume(spec, "DP_EP")
    assert dp.upper == comm_volume(spec, "TP_TP").upper and dp.worst_case_equals_tp
    assert dp.lower == pytest.approx(2 * 8 * MB / 4 * 3)
    limited = comm_volume(with_model(spec, device_limit_g=2), "DP_EP")
    assert limited.upper == 2 * dp.lower and not limited.worst_case_equals_tp
    one = make_spec(E=16, k=4, D=1, tokens=1024, hidden=4096)
    assert comm_volume(one, "TP_TP").upper == 0 and comm_volume(one, "DP_EP").upper == 0


@given(D=st.integers(1, 16), e_mult=st.integers(1, 8), k=st.integers(1, 8),
       g=st.one_of(st.none(), st.integers(1, 16)), tokens=st.integers(0, 8192))
def test_dp_ep_volume_never_exceeds_tp(D, e_mult, k, g, tokens):
    E = max(D * e_mult, k + (-k) % D)
    spec = make_spec(E=E, k=k, D=D, tokens=tokens, g=None if g is None else min(g, E))
    dp, tp = comm_volume(spec, "DP_EP"), comm_volume(spec, "TP_TP")
    assert dp.lower <= dp.upper <= tp.upper
    g_eff = min(k, D, spec.model.device_limit_g or D)
    if tokens > 0 and D > 1:
        assert (dp.upper == tp.upper) == (g_eff == D)


def test_split_io_examples():
    kb = 10 * 1000
    diff = split_io_volume("vertical", 1024, kb, kb, 16, 30e6, 5) - split_io_volume(
        "horizontal", 1024, kb, kb, 16, 30e6, 5)
    assert diff == pytest.approx(40.96e6)
    assert split_io_volume("vertical", 8, 1, 2, 4, 3, 1) == split_io_volume("horizontal", 8, 1, 2, 4, 3, 1)
    E, m, p1 = 16, 100, 7.0
    assert split_io_volume("vertical", m, 0, p1, E, 0, E) == E * m * p1
    with pytest.raises(ValueError):
        split_io_volume("diagonal", 1, 1, 1, 1, 1, 1)


@given(m=st.integers(0, 10**6), p0=st.integers(0, 10**5), p1=st.integers(0, 10**5),
       E=st.integers(1, 256), w=st.integers(0, 10**8), N=st.integers(1, 256))
def test_split_io_ordering(m, p0, p1, E, w, N):
    h = split_io_volume("horizontal", m, p0, p1, E, w, N)
    v = split_io_volume("vertical", m, p0, p1, E, w, N)
    assert h <= v
    assert v - h == (N - 1) * m * p1


def test_single_device_strategies_agree():
    spec = make_spec(E=8, k=2, D=1, tokens=512)
    assert layer_cost(spec, "TP_TP") == layer_cost(spec, "DP_EP")
    assert layer_cost(spec).t_comm == 0


@given(D=st.integers(2, 16), e_mult=st.integers(1, 8), k=st.integers(2, 8), tokens=st.integers(1, 8192),
       phase=st.sampled_from(["prefill", "decode"]))
def test_dp_ep_weight_traffic(D, e_mult, k, tokens, phase):
    E = max(D * e_mult, k + (-k) % D)
    spec = make_spec(E=E, k=k, D=D, tokens=tokens).with_workload(phase=phase, kv_cache_bytes=1 << 20)
    tp, dp = layer_cost(spec, "TP_TP"), layer_cost(spec, "DP_EP")
    assert dp.w_moe_act == pytest.approx(tp.w_moe_act / D)
    assert dp.w_moe_weight == tp.w_moe_weight
    assert dp.w_moe < tp.w_moe


def test_full_model_latency():
    spec = make_spec(layers=60)
    unit = LayerCostBreakdown(1.0, 1.0, 1.0, 0, 0, 0, 0, 0)
    assert full_model_latency(spec, unit) == 180.0
    one = make_spec(layers=1)
    bd = layer_cost(one)
    assert full_model_latency(one, bd) == bd.t_attn + bd.t_moe + bd.t_comm


def test_analytic_matches_serial_simulation_on_roofline_kernels():
    # Every token picks its local expert and the remote one, so the realized
    # volume hits the analytic upper bound and both GEMMs are compute bound.
    tokens, D = 4096, 2
    rows = [[0, 1]] * (tokens * D)
    spec = resolved(make_spec(E=2, k=2, D=D, tokens=tokens, hidden=4096, inter=2048, layers=60,
                              routing=RoutingDistribution.explicit(rows)),
                    overlap_enabled=False, compute_sm_allocation=132, comm_sm_allocation=16)
    kernels = RooflineKernels.from_hardware(spec.hardware, free_memory_kernels=True)
    bd = layer_cost(spec)
    assert bd.f_moe / (D * spec.hardware.compute_rate) > bd.w_moe / (D * spec.hardware.mem_bandwidth)
    sim = simulate_moe(spec, route(spec), kernels)
    simulated = spec.model.num_layers * (bd.t_attn + sim.makespan)
    assert simulated == pytest.approx(full_model_latency(spec, bd), rel=0.01)
    assert math.isclose(sim.trace.busy["comm"], bd.t_comm, rel_tol=1e-9)
