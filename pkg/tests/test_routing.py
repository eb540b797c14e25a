from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moepipe.analytic import activation_bytes, comm_volume
from moepipe.config import RoutingDistribution
from moepipe.routing import chunk, expert_groups, imbalance_stats, route

from conftest import make_spec, with_model


def test_six_experts_token_lists(six_experts):
    plan = route(six_experts)
    lists = [list(map(int, t)) for t in plan.expert_token_lists]
    assert lists[0] == [0, 1, 5, 9]
    assert lists[1] == [0, 2, 5, 6]
    assert sum(len(t) for t in lists) == 10 * 2


def test_six_experts_per_expert_chunk_sends_tokens_1_and_3(six_experts):
    chunking = chunk(route(six_experts), 3, six_experts)
    # Chunk 0 covers local expert 0 of each device; on device 1 that is expert 3.
    assert list(chunking.chunk_token_sets[0][(0, 1)]) == [1, 3]


def test_six_experts_imbalance(six_experts):
    max_load, mean, cv = imbalance_stats(route(six_experts))
    assert max_load == 4
    assert mean == pytest.approx(20 / 6)
    assert cv > 0


def test_k_equals_e_routes_every_token_everywhere():
    spec = make_spec(E=8, k=8, D=2, tokens=50)
    plan = route(spec)
    for tokens in plan.expert_token_lists:
        assert list(tokens) == list(range(100))
    assert imbalance_stats(plan)[2] == 0.0


def test_zipf_is_skewed():
    spec = make_spec(E=16, k=2, D=4, tokens=2048, routing=RoutingDistribution.zipf(1.2))
    plan = route(spec)
    assert imbalance_stats(plan)[2] > 0.3
    assert plan.expert_loads[0] > plan.expert_loads[-1]


@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8), tokens=st.integers(0, 300),
       g=st.one_of(st.none(), st.integers(1, 4)))
def test_conservation_and_determinism(seed, k, tokens, g):
    spec = make_spec(E=16, k=k, D=4, tokens=tokens, seed=seed, g=g)
    if g is not None and k > g * 4:
        with pytest.raises(ValueError):
            route(spec)
        return
    plan = route(spec)
    assert sum(len(t) for t in plan.expert_token_lists) == plan.num_tokens * k
    assert route(spec) == plan
    assert all(len(set(row)) == k for row in plan.assignments.tolist())
    # Both views agree: token t is in expert e's list iff e is in t's row.
    pairs = {(int(t), e) for e, ts in enumerate(plan.expert_token_lists) for t in ts}
    assert pairs == {(t, int(e)) for t, row in enumerate(plan.assignments) for e in row}
    if g is not None:
        spans = (plan.expert_home_device[plan.assignments])
        assert max((len(set(r)) for r in spans.tolist()), default=0) <= g


def test_different_seeds_differ():
    a = route(make_spec(tokens=256, seed=1))
    b = route(make_spec(tokens=256, seed=2))
    assert a != b


@given(e_local=st.integers(1, 64), n=st.integers(1, 64))
def test_expert_groups_partition(e_local, n):
    n = min(n, e_local)
    groups = expert_groups(e_local, n)
    flat = [e for g in groups for e in g]
    assert flat == list(range(e_local))
    sizes = [len(g) for g in groups]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


@given(seed=st.integers(0, 1000), N=st.integers(1, 8), k=st.integers(1, 6), tokens=st.integers(1, 200))
def test_chunk_cover_and_dedup(seed, N, k, tokens):
    spec = make_spec(E=32, k=k, D=4, tokens=tokens, seed=seed)
    plan = route(spec)
    c = chunk(plan, N, spec)
    row = spec.model.hidden_dim * spec.hardware.bytes_per_element
    assert c.chunk_pairs.sum() == plan.num_tokens * k
    assert c.expert_chunk_loads.sum() == plan.num_tokens * k
    # Union over chunks of transmitted (token, dst) pairs equals the remote dispatch set.
    sent = set()
    for c_idx in range(N):
        for (src, dst), toks in c.chunk_token_sets[c_idx].items():
            assert src != dst
            assert len(set(toks.tolist())) == len(toks)  # once per chunk per destination
            assert all(plan.token_home_device[t] == src for t in toks)
            assert c.dispatch_volume[c_idx, src, dst] == len(toks) * row
            sent |= {(int(t), dst) for t in toks}
    expected = {(t, int(plan.expert_home_device[e])) for t, r in enumerate(plan.assignments)
                for e in r if plan.expert_home_device[e] != plan.token_home_device[t]}
    assert sent == expected
    assert np.array_equal(c.combine_volume, np.transpose(c.dispatch_volume, (0, 2, 1)))


def test_single_chunk_volume_within_analytic_bounds():
    spec = make_spec(E=64, k=6, D=8, tokens=4096, hidden=1024)
    plan = route(spec)
    c = chunk(plan, 1, spec)
    bound = comm_volume(spec)
    per_device_total = c.total_sent("both").mean()
    assert bound.lower <= per_device_total <= bound.upper


def test_locality_gives_zero_volume():
    D, tokens = 2, 6
    rows = [[0, 1]] * tokens + [[2, 3]] * tokens  # device 0 owns experts 0-1, device 1 owns 2-3
    spec = make_spec(E=4, k=2, D=D, tokens=tokens, routing=RoutingDistribution.explicit(rows))
    for N in (1, 2):
        c = chunk(route(spec), N, spec)
        assert c.dispatch_volume.sum() == 0 and c.combine_volume.sum() == 0


def test_worst_case_volume_equals_tp_bound():
    # Every token touches every device once: realized volume equals the TP_TP volume.
    D, tokens = 4, 32
    rows = [[0, 2, 4, 6]] * (tokens * D)
    spec = make_spec(E=8, k=4, D=D, tokens=tokens, routing=RoutingDistribution.explicit(rows))
    c = chunk(route(spec), 1, spec)
    assert c.total_sent("both")[0] == comm_volume(spec, "TP_TP").upper
    assert c.total_sent("both")[0] == 2 * activation_bytes(spec) * (D - 1)


@given(seed=st.integers(0, 200))
def test_volume_non_increasing_as_device_limit_tightens(seed):
    base = make_spec(E=32, k=4, D=8, tokens=512, seed=seed)
    volumes = []
    for g in (8, 4, 2, 1):
        spec = with_model(base, device_limit_g=g)
        volumes.append(chunk(route(spec), 1, spec).total_sent("both").sum())
    assert all(a >= b for a, b in zip(volumes, volumes[1:]))


def test_chunk_rejects_bad_n():
    spec = make_spec(E=16, D=4)
    with pytest.raises(ValueError):
        chunk(route(spec), 5, spec)
    with pytest.raises(ValueError):
        chunk(route(spec), 0, spec)
