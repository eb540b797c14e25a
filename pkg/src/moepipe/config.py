"""Scenario types and the YAML scenario document format.

A scenario describes one MoE inference setting: the model, the hardware, the
token workload and the run knobs (parallel strategy, pipeline number, GEMM
kind, SM split).  Knobs may be left as ``"auto"``; they are resolved later by
:mod:`moepipe.optimizer`, never here.

Units: bytes for sizes, milliseconds for times, FLOP/s and bytes/s for rates.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Union

import yaml

SCHEMA_VERSION = 1

AUTO = "auto"
Auto = Literal["auto"]

PHASES = ("prefill", "decode")
STRATEGIES = ("TP_TP", "DP_EP")
GEMM_KINDS = ("GroupGemm", "DenseGemm")
DISTRIBUTIONS = ("uniform", "zipf", "explicit")


class ScenarioError(ValueError):
    """Invalid scenario document.

    ``field`` is the dotted path of the offending key (when known) and
    ``line`` its 1-based line in the source document.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_dim: int
    expert_inter_dim: int
    num_experts: int
    top_k: int
    num_shared_experts: int
    attention_weight_bytes: int
    expert_weight_bytes: int
    device_limit_g: int | None = None  # None means unlimited

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "expert_inter_dim", "num_experts", "top_k",
                     "attention_weight_bytes", "expert_weight_bytes"):
            _require(getattr(self, name) > 0, f"{name} must be positive", f"model.{name}")
        _require(self.num_shared_experts >= 0, "num_shared_experts must be >= 0",
                 "model.num_shared_experts")
        _require(self.top_k <= self.num_experts, "top_k exceeds num_experts", "model.top_k")
        if self.device_limit_g is not None:
            _require(1 <= self.device_limit_g <= self.num_experts,
                     "device_limit_g must lie in [1, num_experts]", "model.device_limit_g")


@dataclass(frozen=True)
class HardwareSpec:
    num_devices: int
    sms_per_device: int
    compute_rate: float
    mem_bandwidth: float
    interconnect_bandwidth: float
    comm_fixed_overhead_per_op: float
    bytes_per_element: int = 2

    def validate(self) -> None:
        for name in ("num_devices", "sms_per_device", "compute_rate", "mem_bandwidth",
                     "interconnect_bandwidth", "bytes_per_element"):
            _require(getattr(self, name) > 0, f"{name} must be positive", f"hardware.{name}")
        _require(self.comm_fixed_overhead_per_op >= 0,
                 "comm_fixed_overhead_per_op must be >= 0", "hardware.comm_fixed_overhead_per_op")


@dataclass(frozen=True)
class RoutingDistribution:
    kind: str = "uniform"
    s: float | None = None
    assignments: tuple[tuple[int, ...], ...] | None = None

    @classmethod
    def uniform(cls) -> RoutingDistribution:
        return cls("uniform")

    @classmethod
    def zipf(cls, s: float) -> RoutingDistribution:
        return cls("zipf", s=float(s))

    @classmethod
    def explicit(cls, assignments) -> RoutingDistribution:
        return cls("explicit", assignments=tuple(tuple(int(e) for e in row) for row in assignments))


@dataclass(frozen=True)
class WorkloadSpec:
    num_tokens: int
    phase: str = "prefill"
    routing: RoutingDistribution = field(default_factory=RoutingDistribution)
    random_seed: int = 0
    # Attention context length per token; defaults to num_tokens (one sequence).
    seq_len: int | None = None
    kv_cache_bytes: int = 0

    @property
    def context_len(self) -> int:
        return self.seq_len if self.seq_len is not None else self.num_tokens


@dataclass(frozen=True)
class RunSpec:
    model: ModelSpec
    hardware: HardwareSpec
    workload: WorkloadSpec
    parallel_strategy: str = "DP_EP"
    pipeline_number: Union[int, Auto] = AUTO
    gemm_kind: str = AUTO
    overlap_enabled: bool = True
    compute_sm_allocation: Union[int, Auto] = AUTO
    comm_sm_allocation: Union[int, Auto] = AUTO
    scenario_id: str = "scenario"

    def replace(self, **changes) -> RunSpec:
        spec = dataclasses.replace(self, **changes)
        spec.validate()
        return spec

    def with_workload(self, **changes) -> RunSpec:
        return self.replace(workload=dataclasses.replace(self.workload, **changes))

    @property
    def is_resolved(self) -> bool:
        return AUTO not in (self.pipeline_number, self.gemm_kind,
                            self.compute_sm_allocation, self.comm_sm_allocation)

    def validate(self) -> None:
        self.model.validate()
        self.hardware.validate()
        m, hw, wl = self.model, self.hardware, self.workload

        _require(wl.num_tokens >= 0, "num_tokens must be >= 0", "workload.num_tokens")
        _require(wl.phase in PHASES, f"phase must be one of {PHASES}", "workload.phase")
        _require(wl.kv_cache_bytes >= 0, "kv_cache_bytes must be >= 0", "workload.kv_cache_bytes")
        if wl.seq_len is not None:
            _require(wl.seq_len > 0, "seq_len must be positive", "workload.seq_len")
        r = wl.routing
        _require(r.kind in DISTRIBUTIONS, f"distribution must be one of {DISTRIBUTIONS}",
                 "workload.routing.distribution")
        if r.kind == "zipf":
            _require(r.s is not None and r.s > 0, "zipf exponent s must be > 0", "workload.routing.s")
        if r.kind == "explicit":
            rows = r.assignments or ()
            # Assignments cover every device's tokens, device 0's first.
            _require(len(rows) == wl.num_tokens * hw.num_devices,
                     "explicit assignments length must equal num_tokens * num_devices",
                     "workload.routing.assignments")
            for i, row in enumerate(rows):
                _require(len(row) == m.top_k and len(set(row)) == m.top_k,
                         f"token {i} must list {m.top_k} distinct experts",
                         "workload.routing.assignments")
                _require(all(0 <= e < m.num_experts for e in row),
                         f"token {i} names an expert outside [0, {m.num_experts})",
                         "workload.routing.assignments")

        _require(self.parallel_strategy in STRATEGIES,
                 f"parallel_strategy must be one of {STRATEGIES}", "run.parallel_strategy")
        _require(self.gemm_kind in GEMM_KINDS + (AUTO,),
                 f"gemm_kind must be one of {GEMM_KINDS + (AUTO,)}", "run.gemm_kind")

        if self.parallel_strategy == "DP_EP":
            _require(m.num_experts % hw.num_devices == 0,
                     "num_experts must be divisible by num_devices", "model.num_experts")
        if self.pipeline_number != AUTO:
            n = self.pipeline_number
            _require(isinstance(n, int) and not isinstance(n, bool), "pipeline_number must be an integer or 'auto'",
                     "run.pipeline_number")
            limit = experts_per_device(self) if self.parallel_strategy == "DP_EP" else 1
            _require(1 <= n <= limit, f"pipeline_number must lie in [1, {limit}]",
                     "run.pipeline_number")

        # An explicit compute + comm sum above sms_per_device is allowed: the
        # two kernels then cannot co-reside and the simulator serializes them.
        for name in ("compute_sm_allocation", "comm_sm_allocation"):
            v = getattr(self, name)
            if v != AUTO:
                _require(isinstance(v, int) and not isinstance(v, bool)
                         and 1 <= v <= hw.sms_per_device,
                         f"{name} must lie in [1, sms_per_device]", f"run.{name}")

    @property
    def sms_oversubscribed(self) -> bool:
        c, k = self.compute_sm_allocation, self.comm_sm_allocation
        return AUTO not in (c, k) and c + k > self.hardware.sms_per_device


def _require(cond: bool, message: str, field: str) -> None:
    if not cond:
        raise ScenarioError(message, field)


def experts_per_device(spec: RunSpec) -> int:
    """Local expert count E/D under expert parallelism."""
    e, d = spec.model.num_experts, spec.hardware.num_devices
    if e % d:
        raise ScenarioError("num_experts must be divisible by num_devices", "model.num_experts")
    return e // d


# --------------------------------------------------------------------------- parsing

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelSpec)}
_HW_KEYS = {f.name for f in dataclasses.fields(HardwareSpec)}
_WL_KEYS = {"num_tokens", "phase", "routing", "random_seed", "seq_len", "kv_cache_bytes"}
_RUN_KEYS = {"parallel_strategy", "pipeline_number", "gemm_kind", "overlap_enabled",
             "compute_sm_allocation", "comm_sm_allocation"}
_TOP_KEYS = {"schema_version", "id", "model", "hardware", "workload", "run"}


def _line_index(node, prefix: str = "", out: dict[str, int] | None = None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_index(v, path, out)
    return out


def parse_scenario(text: str, base_dir: str | Path | None = None) -> RunSpec:
    """Parse and validate a scenario document.

    ``base_dir`` resolves relative ``routing.file`` paths for explicit routing.
    """
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ScenarioError(f"syntax error: {exc.problem}", line=line) from exc
    lines = _line_index(node) if node is not None else {}
    try:
        spec = _build(doc, base_dir)
        spec.validate()
    except ScenarioError as exc:
        if exc.line is None and exc.field:
            line = lines.get(exc.field)
            parent = exc.field
            while line is None and "." in parent:
                parent = parent.rsplit(".", 1)[0]
                line = lines.get(parent)
            raise ScenarioError(exc.message, exc.field, line) from None
        raise
    return spec


def load_scenario(path: str | Path) -> RunSpec:
    path = Path(path)
    return parse_scenario(path.read_text(), base_dir=path.parent)


def _section(doc: dict, name: str, keys: set[str], required: bool = True) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ScenarioError(f"missing section '{name}'", name)
        return {}
    if not isinstance(sec, dict):
        raise ScenarioError(f"section '{name}' must be a mapping", name)
    unknown = set(sec) - keys
    if unknown:
        key = sorted(unknown)[0]
        raise ScenarioError(f"unknown key '{key}'", f"{name}.{key}")
    return sec


def _get(sec: dict, key: str, path: str, kind, default: Any = ...):
    if key not in sec:
        if default is ...:
            raise ScenarioError(f"missing key '{key}'", f"{path}.{key}")
        return default
    value = sec[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind in (int, float) and isinstance(value, str):
        # PyYAML reads exponent literals such as 9.9e14 as strings.
        try:
            number = float(value)
        except ValueError:
            pass
        else:
            if kind is float:
                return number
            if number.is_integer():
                return int(number)
    if kind is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ScenarioError(f"'{key}' has wrong type {type(value).__name__}", f"{path}.{key}")
    return value


def _count_or_auto(sec: dict, key: str, path: str):
    value = sec.get(key, AUTO)
    if value == AUTO:
        return AUTO
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"'{key}' must be an integer or 'auto'", f"{path}.{key}")
    return value


def _build(doc: Any, base_dir: str | Path | None) -> RunSpec:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ScenarioError(f"unknown key '{key}'", key)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r}", "schema_version")

    ms = _section(doc, "model", _MODEL_KEYS)
    g = ms.get("device_limit_g", "unlimited")
    if g == "unlimited" or g is None:
        g = None
    elif isinstance(g, bool) or not isinstance(g, int):
        raise ScenarioError("device_limit_g must be an integer or 'unlimited'", "model.device_limit_g")
    model = ModelSpec(
        num_layers=_get(ms, "num_layers", "model", int),
        hidden_dim=_get(ms, "hidden_dim", "model", int),
        expert_inter_dim=_get(ms, "expert_inter_dim", "model", int),
        num_experts=_get(ms, "num_experts", "model", int),
        top_k=_get(ms, "top_k", "model", int),
        num_shared_experts=_get(ms, "num_shared_experts", "model", int, 0),
        attention_weight_bytes=_get(ms, "attention_weight_bytes", "model", int),
        expert_weight_bytes=_get(ms, "expert_weight_bytes", "model", int),
        device_limit_g=g,
    )

    hs = _section(doc, "hardware", _HW_KEYS)
    hardware = HardwareSpec(
        num_devices=_get(hs, "num_devices", "hardware", int),
        sms_per_device=_get(hs, "sms_per_device", "hardware", int),
        compute_rate=_get(hs, "compute_rate", "hardware", float),
        mem_bandwidth=_get(hs, "mem_bandwidth", "hardware", float),
        interconnect_bandwidth=_get(hs, "interconnect_bandwidth", "hardware", float),
        comm_fixed_overhead_per_op=_get(hs, "comm_fixed_overhead_per_op", "hardware", float, 0.0),
        bytes_per_element=_get(hs, "bytes_per_element", "hardware", int, 2),
    )

    ws = _section(doc, "workload", _WL_KEYS)
    routing = _parse_routing(ws.get("routing", {"distribution": "uniform"}), base_dir)
    seq_len = ws.get("seq_len")
    if seq_len is not None:
        seq_len = _get(ws, "seq_len", "workload", int)
    workload = WorkloadSpec(
        num_tokens=_get(ws, "num_tokens", "workload", int),
        phase=_get(ws, "phase", "workload", str, "prefill"),
        routing=routing,
        random_seed=_get(ws, "random_seed", "workload", int, 0),
        seq_len=seq_len,
        kv_cache_bytes=_get(ws, "kv_cache_bytes", "workload", int, 0),
    )

    rs = _section(doc, "run", _RUN_KEYS, required=False)
    return RunSpec(
        model=model,
        hardware=hardware,
        workload=workload,
        parallel_strategy=_get(rs, "parallel_strategy", "run", str, "DP_EP"),
        pipeline_number=_count_or_auto(rs, "pipeline_number", "run"),
        gemm_kind=_get(rs, "gemm_kind", "run", str, AUTO),
        overlap_enabled=_get(rs, "overlap_enabled", "run", bool, True),
        compute_sm_allocation=_count_or_auto(rs, "compute_sm_allocation", "run"),
        comm_sm_allocation=_count_or_auto(rs, "comm_sm_allocation", "run"),
        scenario_id=str(doc.get("id", "scenario")),
    )


def _parse_routing(sec: Any, base_dir: str | Path | None) -> RoutingDistribution:
    path = "workload.routing"
    if not isinstance(sec, dict):
        raise ScenarioError("routing must be a mapping", path)
    unknown = set(sec) - {"distribution", "s", "assignments", "file"}
    if unknown:
        key = sorted(unknown)[0]
        raise ScenarioError(f"unknown key '{key}'", f"{path}.{key}")
    kind = sec.get("distribution", "uniform")
    if kind == "uniform":
        return RoutingDistribution.uniform()
    if kind == "zipf":
        return RoutingDistribution.zipf(_get(sec, "s", path, float))
    if kind == "explicit":
        if "file" in sec:
            p = Path(sec["file"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            try:
                return RoutingDistribution.explicit(parse_explicit_routing(p.read_text()))
            except OSError as exc:
                raise ScenarioError(f"cannot read routing file: {exc}", f"{path}.file") from exc
        rows = sec.get("assignments")
        if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
            raise ScenarioError("assignments must be a list of expert-id lists", f"{path}.assignments")
        try:
            return RoutingDistribution.explicit(rows)
        except (TypeError, ValueError) as exc:
            raise ScenarioError("assignments must hold integer expert ids",
                                f"{path}.assignments") from exc
    raise ScenarioError(f"distribution must be one of {DISTRIBUTIONS}", f"{path}.distribution")


def parse_explicit_routing(text: str) -> list[list[int]]:
    """One line per token, whitespace or comma separated expert ids; '#' comments."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        try:
            rows.append([int(tok) for tok in line.split()])
        except ValueError:
            raise ScenarioError(f"non-integer expert id in routing file: {raw!r}", line=lineno) from None
    return rows


def format_explicit_routing(assignments) -> str:
    return "".join(" ".join(str(e) for e in row) + "\n" for row in assignments)


# ------------------------------------------------------------------------ serializing

def scenario_to_dict(spec: RunSpec) -> dict:
    m, hw, wl = spec.model, spec.hardware, spec.workload
    model = dataclasses.asdict(m)
    model["device_limit_g"] = "unlimited" if m.device_limit_g is None else m.device_limit_g
    routing: dict[str, Any] = {"distribution": wl.routing.kind}
    if wl.routing.kind == "zipf":
        routing["s"] = wl.routing.s
    elif wl.routing.kind == "explicit":
        routing["assignments"] = [list(r) for r in wl.routing.assignments]
    workload: dict[str, Any] = {
        "num_tokens": wl.num_tokens,
        "phase": wl.phase,
        "routing": routing,
        "random_seed": wl.random_seed,
        "kv_cache_bytes": wl.kv_cache_bytes,
    }
    if wl.seq_len is not None:
        workload["seq_len"] = wl.seq_len
    return {
        "schema_version": SCHEMA_VERSION,
        "id": spec.scenario_id,
        "model": model,
        "hardware": dataclasses.asdict(hw),
        "workload": workload,
        "run": {
            "parallel_strategy": spec.parallel_strategy,
            "pipeline_number": spec.pipeline_number,
            "gemm_kind": spec.gemm_kind,
            "overlap_enabled": spec.overlap_enabled,
            "compute_sm_allocation": spec.compute_sm_allocation,
            "comm_sm_allocation": spec.comm_sm_allocation,
        },
    }


def scenario_from_dict(doc: dict, base_dir: str | Path | None = None) -> RunSpec:
    """Inverse of :func:`scenario_to_dict`."""
    spec = _build(doc, base_dir)
    spec.validate()
    return spec


def serialize_scenario(spec: RunSpec) -> str:
    return yaml.safe_dump(scenario_to_dict(spec), sort_keys=False, default_flow_style=None)
