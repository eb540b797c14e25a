"""Experiment runner and result documents (text, csv, json)."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
from dataclasses import dataclass

from .analytic import LayerCostBreakdown, layer_cost
from .config import AUTO, RunSpec, scenario_from_dict, scenario_to_dict
from .optimizer import resolve_auto_report
from .routing import route
from .sim import MoESimulation, simulate_moe, validate_trace

FORMATS = ("text", "csv", "json")
SWEEP_KEYS = ("pn", "sm", "comm_sm", "gemm", "strategy", "tokens", "overlap")
SHARE_KEYS = ("all2all", "moe", "attn")


@dataclass(frozen=True)
class ExperimentResult:
    scenario_id: str
    sweep: tuple[tuple[str, str], ...]
    spec: RunSpec
    analytic: LayerCostBreakdown
    moe_makespan_ms: float
    layer_ms: float
    full_model_ms: float
    throughput: float  # tokens/s over all devices
    shares: tuple[float, float, float]  # all2all, moe, attn
    decision: dict

    @property
    def share_dict(self) -> dict[str, float]:
        return dict(zip(SHARE_KEYS, self.shares))


# --------------------------------------------------------------------------- running

def run_experiment(spec: RunSpec, kernels, *, sweep=(), validate: bool = True
                   ) -> tuple[ExperimentResult, MoESimulation]:
    """route -> resolve -> chunk -> schedule -> simulate -> aggregate."""
    plan = route(spec)
    resolved, decision = resolve_auto_report(spec, plan, kernels)
    sim = simulate_moe(resolved, plan, kernels)
    if validate:
        validate_trace(sim.trace, sim.events)
    analytic = layer_cost(resolved)
    layer_ms = analytic.t_attn + sim.makespan
    full_ms = resolved.model.num_layers * layer_ms
    tokens = resolved.workload.num_tokens * resolved.hardware.num_devices
    throughput = tokens / (full_ms / 1e3) if full_ms > 0 else 0.0
    busy = sim.trace.busy
    parts = (busy["comm"], busy["compute"] + busy["memory"], analytic.t_attn)
    total = sum(parts)
    shares = tuple(p / total for p in parts) if total > 0 else (0.0, 0.0, 1.0)
    result = ExperimentResult(
        scenario_id=resolved.scenario_id,
        sweep=tuple((str(k), str(v)) for k, v in sweep),
        spec=resolved,
        analytic=analytic,
        moe_makespan_ms=sim.makespan,
        layer_ms=layer_ms,
        full_model_ms=full_ms,
        throughput=throughput,
        shares=shares,
        decision=decision.as_dict(),
    )
    return result, sim


def _count(value: str) -> int | str:
    return AUTO if value == AUTO else int(value)


def apply_sweep(spec: RunSpec, key: str, value: str) -> RunSpec:
    """``spec`` with one sweep point applied."""
    if key == "pn":
        return spec.replace(pipeline_number=_count(value))
    if key == "sm":
        return spec.replace(compute_sm_allocation=_count(value))
    if key == "comm_sm":
        return spec.replace(comm_sm_allocation=_count(value))
    if key == "gemm":
        return spec.replace(gemm_kind=value)
    if key == "strategy":
        if value == "TP_TP":
            return spec.replace(parallel_strategy=value, pipeline_number=1)
        return spec.replace(parallel_strategy=value)
    if key == "tokens":
        return spec.with_workload(num_tokens=int(value))
    if key == "overlap":
        if value.lower() not in ("on", "off", "true", "false"):
            raise ValueError(f"overlap must be on/off, got {value!r}")
        return spec.replace(overlap_enabled=value.lower() in ("on", "true"))
    raise ValueError(f"unknown sweep key {key!r}; expected one of {', '.join(SWEEP_KEYS)}")


def parse_sweep(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    key = key.strip()
    if not sep or not values.strip():
        raise ValueError(f"sweep must look like key=v1,v2, got {text!r}")
    if key not in SWEEP_KEYS:
        raise ValueError(f"unknown sweep key {key!r}; expected one of {', '.join(SWEEP_KEYS)}")
    return key, [v.strip() for v in values.split(",") if v.strip()]


def sweep_points(spec: RunSpec, sweeps) -> list[tuple[tuple[tuple[str, str], ...], RunSpec]]:
    """Cartesian product of the sweeps, in flag order, as (labels, spec) pairs."""
    if not sweeps:
        return [((), spec)]
    keys = [k for k, _ in sweeps]
    out = []
    for combo in itertools.product(*[vals for _, vals in sweeps]):
        point = spec
        for key, value in zip(keys, combo):
            point = apply_sweep(point, key, value)
        out.append((tuple(zip(keys, combo)), point))
    return out


def run_sweep(spec: RunSpec, kernels, sweeps=()) -> list[ExperimentResult]:
    return [run_experiment(point, kernels, sweep=labels)[0] for labels, point in sweep_points(spec, sweeps)]


# --------------------------------------------------------------------------- emitting

COLUMNS = (
    "scenario_id", "sweep", "parallel_strategy", "pipeline_number", "gemm_kind", "overlap_enabled",
    "compute_sms", "comm_sms", "num_devices", "num_tokens", "seq_len", "random_seed",
    "t_attn_ms", "t_moe_ms", "t_comm_ms", "analytic_comm_bytes",
    "moe_makespan_ms", "layer_ms", "full_model_ms", "throughput_tokens_per_s",
    "share_all2all", "share_moe", "share_attn",
)


def _sweep_label(sweep) -> str:
    return ";".join(f"{k}={v}" for k, v in sweep)


def result_row(r: ExperimentResult) -> dict:
    s, wl = r.spec, r.spec.workload
    return {
        "scenario_id": r.scenario_id,
        "sweep": _sweep_label(r.sweep),
        "parallel_strategy": s.parallel_strategy,
        "pipeline_number": s.pipeline_number,
        "gemm_kind": s.gemm_kind,
        "overlap_enabled": s.overlap_enabled,
        "compute_sms": s.compute_sm_allocation,
        "comm_sms": s.comm_sm_allocation,
        "num_devices": s.hardware.num_devices,
        "num_tokens": wl.num_tokens,
        "seq_len": wl.context_len,
        "random_seed": wl.random_seed,
        "t_attn_ms": r.analytic.t_attn,
        "t_moe_ms": r.analytic.t_moe,
        "t_comm_ms": r.analytic.t_comm,
        "analytic_comm_bytes": r.analytic.comm_volume,
        "moe_makespan_ms": r.moe_makespan_ms,
        "layer_ms": r.layer_ms,
        "full_model_ms": r.full_model_ms,
        "throughput_tokens_per_s": r.throughput,
        "share_all2all": r.shares[0],
        "share_moe": r.shares[1],
        "share_attn": r.shares[2],
    }


def result_to_dict(r: ExperimentResult) -> dict:
    return {
        "scenario_id": r.scenario_id,
        "sweep": [list(p) for p in r.sweep],
        "scenario": scenario_to_dict(r.spec),
        "analytic": dataclasses.asdict(r.analytic),
        "moe_makespan_ms": r.moe_makespan_ms,
        "layer_ms": r.layer_ms,
        "full_model_ms": r.full_model_ms,
        "throughput_tokens_per_s": r.throughput,
        "shares": dict(zip(SHARE_KEYS, r.shares)),
        "decision": r.decision,
    }


def result_from_dict(d: dict) -> ExperimentResult:
    return ExperimentResult(
        scenario_id=d["scenario_id"],
        sweep=tuple((k, v) for k, v in d["sweep"]),
        spec=scenario_from_dict(d["scenario"]),
        analytic=LayerCostBreakdown(**d["analytic"]),
        moe_makespan_ms=d["moe_makespan_ms"],
        layer_ms=d["layer_ms"],
        full_model_ms=d["full_model_ms"],
        throughput=d["throughput_tokens_per_s"],
        shares=tuple(d["shares"][k] for k in SHARE_KEYS),
        decision=d["decision"],
    )


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_table(results, fmt: str = "text") -> str:
    results = list(results)
    if not results:
        raise ValueError("no results to emit")
    if fmt == "json":
        return json.dumps([result_to_dict(r) for r in results], indent=2, sort_keys=False) + "\n"
    rows = [result_row(r) for r in results]
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in COLUMNS])
        return out.getvalue()
    if fmt == "text":
        cols = ("scenario_id", "sweep", "pipeline_number", "gemm_kind", "compute_sms", "comm_sms",
                "moe_makespan_ms", "layer_ms", "full_model_ms", "throughput_tokens_per_s",
                "share_all2all", "share_moe", "share_attn")
        cells = [[c for c in cols]]
        for row in rows:
            cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) or "-"
                          for c in cols])
        widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
        return "".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() + "\n" for r in cells)
    raise ValueError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")


def parse_results_json(text: str) -> list[ExperimentResult]:
    return [result_from_dict(d) for d in json.loads(text)]


_INT_COLUMNS = {"pipeline_number", "compute_sms", "comm_sms", "num_devices", "num_tokens", "seq_len",
                "random_seed"}
_STR_COLUMNS = {"scenario_id", "sweep", "parallel_strategy", "gemm_kind"}


def parse_results_csv(text: str) -> list[dict]:
    """Typed rows of a csv document produced by :func:`emit_table`."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError("unexpected csv columns")
    rows = []
    for raw in reader:
        row = {}
        for c in COLUMNS:
            v = raw[c]
            if c in _STR_COLUMNS:
                row[c] = v
            elif c == "overlap_enabled":
                row[c] = v == "True"
            elif c in _INT_COLUMNS:
                row[c] = int(v)
            else:
                row[c] = float(v)
        rows.append(row)
    return rows
