from __future__ import annotations

import textwrap

import pytest
import yaml
from hypothesis import given, strategies as st

from moepipe.config import (
    AUTO, RoutingDistribution, ScenarioError, experts_per_device, format_explicit_routing,
    load_scenario, parse_explicit_routing, parse_scenario, serialize_scenario,
)

from conftest import make_spec

MINIMAL = textwrap.dedent("""\
    schema_version: 1
    id: minimal
    model:
      num_layers: 2
      hidden_dim: 1024
      expert_inter_dim: 512
      num_experts: 16
      top_k: 2
      attention_weight_bytes: 8388608
      expert_weight_bytes: 3145728
    hardware:
      num_devices: 4
      sms_per_device: 132
      compute_rate: 9.89e14
      mem_bandwidth: 3.35e12
      interconnect_bandwidth: 1.6e11
    workload:
      num_tokens: 128
    """)


def test_minimal_document_echoes_values():
    spec = parse_scenario(MINIMAL)
    assert (spec.model.num_experts, spec.model.top_k, spec.hardware.num_devices) == (16, 2, 4)
    assert spec.hardware.compute_rate == 9.89e14
    assert spec.pipeline_number == AUTO and spec.gemm_kind == AUTO
    assert not spec.is_resolved


def test_top_k_above_num_experts_names_field_and_line():
    doc = MINIMAL.replace("top_k: 2", "top_k: 20")
    with pytest.raises(ScenarioError, match="top_k exceeds num_experts") as exc:
        parse_scenario(doc)
    assert exc.value.field == "model.top_k"
    assert exc.value.line == 8


@pytest.mark.parametrize("edit, field", [
    (("num_experts: 16", "num_experts: 18"), "model.num_experts"),          # not divisible by D
    (("num_tokens: 128", "num_tokens: -1"), "workload.num_tokens"),
    (("hidden_dim: 1024", "hidden_dim: 0"), "model.hidden_dim"),
    (("hidden_dim: 1024", "hidden_dim: wide"), "model.hidden_dim"),
    (("num_layers: 2", "num_layers: 2\n  bogus: 1"), "model.bogus"),
    (("schema_version: 1", "schema_version: 7"), "schema_version"),
    (("sms_per_device: 132", "sms_per_device: 0"), "hardware.sms_per_device"),
])
def test_invalid_documents_are_rejected_with_field(edit, field):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(MINIMAL.replace(*edit))
    assert exc.value.field == field
    assert exc.value.line is not None


def test_run_section_limits():
    bad_pn = MINIMAL + "run:\n  pipeline_number: 5\n"
    with pytest.raises(ScenarioError, match=r"\[1, 4\]"):
        parse_scenario(bad_pn)
    bad_sm = MINIMAL + "run:\n  comm_sm_allocation: 200\n"
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(bad_sm)
    assert exc.value.field == "run.comm_sm_allocation"
    tp = MINIMAL + "run:\n  parallel_strategy: TP_TP\n  pipeline_number: 2\n"
    with pytest.raises(ScenarioError):
        parse_scenario(tp)


def test_oversubscribed_split_is_allowed_and_flagged():
    spec = parse_scenario(MINIMAL + "run:\n  compute_sm_allocation: 132\n  comm_sm_allocation: 16\n")
    assert spec.sms_oversubscribed
    assert not parse_scenario(MINIMAL + "run:\n  compute_sm_allocation: 116\n"
                              "  comm_sm_allocation: 16\n").sms_oversubscribed


def test_syntax_error_reports_line():
    with pytest.raises(ScenarioError) as exc:
        parse_scenario("schema_version: 1\nmodel: [unclosed\n")
    assert exc.value.line is not None


def test_experts_per_device():
    assert experts_per_device(make_spec(E=160, k=6, D=8)) == 20
    assert experts_per_device(make_spec(E=8, D=8)) == 1
    assert experts_per_device(make_spec(E=6, D=2)) == 3


def test_full_model_fixture_dims(fixtures_dir):
    spec = load_scenario(fixtures_dir / "full_model_prefill.yaml")
    assert (spec.model.hidden_dim, spec.model.expert_inter_dim) == (5120, 1536)
    assert spec.model.num_shared_experts == 2
    assert spec.workload.context_len == 1024


def test_explicit_routing_file(six_experts):
    rows = six_experts.workload.routing.assignments
    assert len(rows) == 10 and rows[1] == (0, 3)


def test_explicit_routing_length_must_cover_all_devices():
    with pytest.raises(ScenarioError, match="num_tokens \\* num_devices"):
        make_spec(E=6, k=2, D=2, tokens=5, routing=RoutingDistribution.explicit([[0, 1]] * 5))
    with pytest.raises(ScenarioError, match="distinct"):
        make_spec(E=6, k=2, D=2, tokens=1, routing=RoutingDistribution.explicit([[0, 0], [1, 2]]))


def test_explicit_routing_text_round_trip():
    rows = [[0, 1], [2, 5], [3, 4]]
    assert parse_explicit_routing(format_explicit_routing(rows)) == rows
    assert parse_explicit_routing("# c\n1, 2\n\n3 4  # trailing\n") == [[1, 2], [3, 4]]
    with pytest.raises(ScenarioError):
        parse_explicit_routing("1 x\n")


@pytest.mark.parametrize("name", ["full_model_prefill", "full_model_decode", "layer_m3072",
                                  "layer_m256_wide", "six_experts"])
def test_fixture_round_trip(fixtures_dir, name):
    spec = load_scenario(fixtures_dir / f"{name}.yaml")
    assert parse_scenario(serialize_scenario(spec)) == spec


run_values = st.one_of(st.just(AUTO), st.integers(1, 4))


@given(E_mult=st.integers(1, 8), D=st.sampled_from([1, 2, 4]), k=st.integers(1, 4),
       tokens=st.integers(0, 4096), shared=st.integers(0, 2),
       g=st.one_of(st.none(), st.integers(1, 4)), zipf=st.one_of(st.none(), st.floats(0.1, 3.0)),
       pn=run_values, compute=st.one_of(st.just(AUTO), st.integers(1, 132)),
       comm=st.one_of(st.just(AUTO), st.integers(1, 132)),
       kind=st.sampled_from(["auto", "GroupGemm", "DenseGemm"]), overlap=st.booleans(),
       seed=st.integers(0, 2**31))
def test_parse_serialize_parse_identity(E_mult, D, k, tokens, shared, g, zipf, pn, compute, comm,
                                        kind, overlap, seed):
    E = max(E_mult * D, k)
    E += (-E) % D
    if pn != AUTO:
        pn = min(pn, E // D)
    if g is not None:
        g = min(g, E)
    routing = RoutingDistribution.zipf(zipf) if zipf else RoutingDistribution.uniform()
    spec = make_spec(E=E, k=k, D=D, tokens=tokens, shared=shared, g=g, routing=routing, seed=seed,
                     pipeline_number=pn, compute_sm_allocation=compute, comm_sm_allocation=comm,
                     gemm_kind=kind, overlap_enabled=overlap)
    assert parse_scenario(serialize_scenario(spec)) == spec


@given(st.dictionaries(st.sampled_from(["num_layers", "hidden_dim", "num_experts", "top_k",
                                        "expert_inter_dim"]),
                       st.one_of(st.integers(-5, 0), st.text(alphabet="abc_ ", max_size=3), st.none()), min_size=1))
def test_fuzzed_invalid_model_fields_never_parse(bad):
    doc = yaml.safe_load(MINIMAL)
    doc["model"].update(bad)
    with pytest.raises(ScenarioError):
        parse_scenario(yaml.safe_dump(doc))
