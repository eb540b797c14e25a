"""Discrete-event simulator and cost model for expert-parallel MoE inference."""
from __future__ import annotations

from .analytic import LayerCostBreakdown, activated_experts, comm_volume, layer_cost
from .config import (
    HardwareSpec,
    ModelSpec,
    RoutingDistribution,
    RunSpec,
    ScenarioError,
    WorkloadSpec,
    load_scenario,
    parse_scenario,
)
from .kernels import KernelModels, RooflineKernels, default_kernel_models, load_kernel_models
from .optimizer import optimal_pn, resolve_auto, select_gemm_kind
from .report import ExperimentResult, emit_table, run_experiment
from .routing import chunk, route
from .sim import build_schedule, compare_overlap, simulate, simulate_moe, validate_trace

__version__ = "0.1.0"

__all__ = [
    "ExperimentResult", "HardwareSpec", "KernelModels", "LayerCostBreakdown", "ModelSpec",
    "RooflineKernels", "RoutingDistribution", "RunSpec", "ScenarioError", "WorkloadSpec",
    "activated_experts", "build_schedule", "chunk", "comm_volume", "compare_overlap",
    "default_kernel_models", "emit_table", "layer_cost", "load_kernel_models", "load_scenario",
    "optimal_pn", "parse_scenario", "resolve_auto", "route", "run_experiment", "select_gemm_kind",
    "simulate", "simulate_moe", "validate_trace",
]
