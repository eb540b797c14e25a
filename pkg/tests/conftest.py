from __future__ import annotations

import dataclasses
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from moepipe.config import (
    HardwareSpec, ModelSpec, RoutingDistribution, RunSpec, WorkloadSpec, load_scenario,
)
from moepipe.kernels import default_kernel_models

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_spec(*, E=16, k=2, D=4, tokens=64, hidden=1024, inter=512, shared=0, g=None,
              routing=None, seed=0, layers=1, sms=132, **run) -> RunSpec:
    model = ModelSpec(num_layers=layers, hidden_dim=hidden, expert_inter_dim=inter, num_experts=E,
                      top_k=k, num_shared_experts=shared, attention_weight_bytes=4 * hidden * hidden * 2,
                      expert_weight_bytes=3 * hidden * inter * 2, device_limit_g=g)
    hardware = HardwareSpec(num_devices=D, sms_per_device=sms, compute_rate=9.89e14,
                            mem_bandwidth=3.35e12, interconnect_bandwidth=1.6e11,
                            comm_fixed_overhead_per_op=0.025)
    workload = WorkloadSpec(num_tokens=tokens, routing=routing or RoutingDistribution.uniform(),
                            random_seed=seed)
    spec = RunSpec(model, hardware, workload, **run)
    spec.validate()
    return spec


def resolved(spec: RunSpec, **changes) -> RunSpec:
    base = dict(pipeline_number=1, gemm_kind="GroupGemm", compute_sm_allocation=116,
                comm_sm_allocation=16)
    base.update(changes)
    return spec.replace(**base)


def with_model(spec: RunSpec, **changes) -> RunSpec:
    return spec.replace(model=dataclasses.replace(spec.model, **changes))


@pytest.fixture(scope="session")
def kernels():
    return default_kernel_models()


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def six_experts():
    return load_scenario(FIXTURES / "six_experts.yaml")


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
