"""Calibrated latency models for GEMM, memory-bound and all2all kernels.

All three kernel classes are table driven.  A calibration document is plain
text with one section per table::

    [gemm]
    launch_overhead = 0.005
    kind,m_per_group,groups,k_dim,n_dim,sm_count,throughput
    GroupGemm-Pingpong,1024,16,5120,1536,132,5.6e14
    ...
    [comm]
    fixed_overhead = 0.025
    unit_scale = 0.001
    volume_per_device,sm_count,latency
    33554432,10,223.6
    ...
    [mem]
    effective_bandwidth = 3.0e12
    launch_overhead = 0.005
    tokens,saturation_sms
    64,40

``key = value`` lines set table parameters; the first other line of a section
is its header.  Units: bytes, milliseconds, FLOP/s.  Comm latencies are stored
in table units and multiplied by ``unit_scale`` to get milliseconds.
"""
from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

GROUP_PINGPONG = "GroupGemm-Pingpong"
GROUP_COOPERATIVE = "GroupGemm-Cooperative"
DENSE = "DenseGemm"
GEMM_TABLE_KINDS = (GROUP_PINGPONG, GROUP_COOPERATIVE, DENSE)
_KIND_ALIASES = {"GroupGemm": GROUP_PINGPONG}

DEFAULT_LAUNCH_OVERHEAD_MS = 0.005
MONOTONE_TOLERANCE = 0.10

GEMM_COLUMNS = ("kind", "m_per_group", "groups", "k_dim", "n_dim", "sm_count", "throughput")
COMM_COLUMNS = ("volume_per_device", "sm_count", "latency")
MEM_COLUMNS = ("tokens", "saturation_sms")


class CalibrationError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in GEMM_TABLE_KINDS:
        raise CalibrationError(f"unknown GEMM kind {kind!r}")
    return kind


def _nearest(grid: list, value: float):
    """Nearest grid point, ties toward the lower one; clamps at the edges."""
    i = bisect.bisect_left(grid, value)
    if i == 0:
        return grid[0]
    if i == len(grid):
        return grid[-1]
    lo, hi = grid[i - 1], grid[i]
    return lo if value - lo <= hi - value else hi


@dataclass(frozen=True)
class GemmEntry:
    kind: str
    m_per_group: int
    groups: int
    k_dim: int
    n_dim: int
    sm_count: int
    throughput: float


@dataclass(frozen=True)
class GemmCalibrationTable:
    entries: tuple[GemmEntry, ...]
    launch_overhead: float = DEFAULT_LAUNCH_OVERHEAD_MS

    def __post_init__(self):
        if not self.entries:
            raise CalibrationError("GEMM table is empty")

    @cached_property
    def _index(self):
        # kind -> {(k, n): {groups: {sms: (log_m array, throughput array)}}}
        raw: dict = {}
        for e in self.entries:
            (raw.setdefault(e.kind, {}).setdefault((e.k_dim, e.n_dim), {})
                .setdefault(e.groups, {}).setdefault(e.sm_count, [])
                .append((e.m_per_group, e.throughput)))
        index = {}
        for kind, by_dims in raw.items():
            index[kind] = {}
            for dims, by_groups in by_dims.items():
                index[kind][dims] = {}
                for g, by_sms in by_groups.items():
                    index[kind][dims][g] = {}
                    for s, pts in by_sms.items():
                        pts.sort()
                        m = np.log([p[0] for p in pts])
                        t = np.array([p[1] for p in pts])
                        index[kind][dims][g][s] = (m, t)
        return index

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k in GEMM_TABLE_KINDS if k in self._index)

    def sm_grid(self, kind: str) -> list[int]:
        kind = canonical_kind(kind)
        return sorted({e.sm_count for e in self.entries if e.kind == kind})

    def _dims_key(self, kind: str, k_dim: int, n_dim: int):
        by_dims = self._index[kind]
        if (k_dim, n_dim) in by_dims:
            return (k_dim, n_dim)
        target = math.log(k_dim * n_dim)
        return min(by_dims, key=lambda d: (abs(math.log(d[0] * d[1]) - target), d))

    def throughput(self, kind: str, m_per_group: float, groups: int, k_dim: int, n_dim: int,
                   sms: int) -> float:
        """Interpolated FLOP/s: log-linear in m, nearest in groups and SMs, clamped."""
        kind = canonical_kind(kind)
        if kind not in self._index:
            raise CalibrationError(f"calibration has no rows for {kind}")
        by_groups = self._index[kind][self._dims_key(kind, k_dim, n_dim)]
        by_sms = by_groups[_nearest(sorted(by_groups), groups)]
        log_m, thr = by_sms[_nearest(sorted(by_sms), sms)]
        return float(np.interp(math.log(max(m_per_group, 1e-12)), log_m, thr))

    def validate(self, tolerance: float = MONOTONE_TOLERANCE) -> None:
        problems = []
        for e in self.entries:
            if min(e.m_per_group, e.groups, e.k_dim, e.n_dim, e.sm_count) <= 0 or e.throughput <= 0:
                problems.append(f"non-positive field in {e}")
        for kind in self._index:
            ms = {e.m_per_group for e in self.entries if e.kind == kind}
            if len(ms) < 2:
                problems.append(f"{kind}: need at least 2 distinct m_per_group values")
        series: dict = {}
        for e in self.entries:
            series.setdefault((e.kind, e.groups, e.k_dim, e.n_dim, e.sm_count), []).append(e)
        for key, rows in series.items():
            rows.sort(key=lambda r: r.m_per_group)
            peak = rows[0]
            for r in rows[1:]:
                if r.throughput < (1 - tolerance) * peak.throughput:
                    problems.append(
                        f"throughput not monotone-saturating: {peak} -> {r} "
                        f"drops {1 - r.throughput / peak.throughput:.0%}")
                if r.throughput > peak.throughput:
                    peak = r
        if problems:
            raise CalibrationError("invalid GEMM table:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class CommEntry:
    volume_per_device: int
    sm_count: int
    latency: float


@dataclass(frozen=True)
class CommCalibrationTable:
    entries: tuple[CommEntry, ...]
    fixed_overhead: float = 0.0
    unit_scale: float = 1.0

    def __post_init__(self):
        if not self.entries:
            raise CalibrationError("comm table is empty")

    @cached_property
    def _index(self):
        by_sms: dict[int, list] = {}
        for e in self.entries:
            by_sms.setdefault(e.sm_count, []).append((e.volume_per_device, e.latency))
        out = {}
        for s, pts in by_sms.items():
            pts.sort()
            v = np.array([0.0] + [p[0] for p in pts])
            t = np.array([0.0] + [p[1] for p in pts])
            out[s] = (v, t)
        return out

    @property
    def sm_grid(self) -> list[int]:
        return sorted(self._index)

    def transfer_time(self, volume: float, sms: int) -> float:
        """Transfer time in table units, piecewise linear in volume through the origin.

        Beyond the last grid point the last segment's slope is extended.
        """
        v, t = self._index[_nearest(self.sm_grid, sms)]
        if volume <= v[-1]:
            return float(np.interp(volume, v, t))
        slope = (t[-1] - t[-2]) / (v[-1] - v[-2])
        return float(t[-1] + slope * (volume - v[-1]))

    def validate(self) -> None:
        problems = []
        for e in self.entries:
            if e.volume_per_device <= 0 or e.sm_count <= 0 or e.latency < 0:
                problems.append(f"invalid row {e}")
        for s, (v, t) in self._index.items():
            for i in range(1, len(v)):
                if t[i] < t[i - 1]:
                    problems.append(f"latency decreases with volume at sm_count={s}, volume={v[i]:.0f}")
        by_volume: dict = {}
        for e in self.entries:
            by_volume.setdefault(e.volume_per_device, []).append(e)
        for vol, rows in by_volume.items():
            rows.sort(key=lambda r: r.sm_count)
            for a, b in zip(rows, rows[1:]):
                if b.latency > a.latency:
                    problems.append(f"latency increases with SMs at volume={vol}: {a} -> {b}")
        if self.fixed_overhead < 0 or self.unit_scale <= 0:
            problems.append("fixed_overhead must be >= 0 and unit_scale > 0")
        if problems:
            raise CalibrationError("invalid comm table:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class MemKernelModel:
    effective_bandwidth: float
    saturation: tuple[tuple[int, int], ...]  # (tokens, saturation_sms)
    launch_overhead: float = DEFAULT_LAUNCH_OVERHEAD_MS
    bytes_per_element: int = 2

    def __post_init__(self):
        if not self.saturation:
            raise CalibrationError("mem saturation table is empty")
        if self.effective_bandwidth <= 0:
            raise CalibrationError("effective_bandwidth must be positive")

    def bytes_moved(self, tokens: float, dims: int) -> float:
        # One read and one write of a [tokens, dims] activation.
        return 2.0 * tokens * dims * self.bytes_per_element

    def saturation_sms(self, tokens: float) -> int:
        pts = sorted(self.saturation)
        x = np.log([max(p[0], 1) for p in pts])
        y = [p[1] for p in pts]
        return int(math.ceil(np.interp(math.log(max(tokens, 1)), x, y)))

    def bandwidth_at(self, tokens: float, sms: int) -> float:
        per_sm = self.effective_bandwidth / self.saturation_sms(tokens)
        return min(self.effective_bandwidth, per_sm * sms)

    def latency(self, tokens: float, dims: int, sms: int) -> float:
        if tokens <= 0:
            return self.launch_overhead
        return self.launch_overhead + 1e3 * self.bytes_moved(tokens, dims) / self.bandwidth_at(tokens, sms)


@dataclass(frozen=True)
class KernelModels:
    """The three calibrated kernel classes behind one query interface.

    The simulator and optimizer only call the methods below, so any object
    with the same methods (see :class:`RooflineKernels`) can stand in.
    """

    gemm: GemmCalibrationTable
    comm: CommCalibrationTable
    mem: MemKernelModel
    saturation_tolerance: float = 0.01

    def gemm_latency(self, kind: str, m_per_group: float, groups: int, k_dim: int, n_dim: int,
                     sms: int, *, include_overhead: bool = True) -> float:
        return gemm_latency(self.gemm, kind, m_per_group, groups, k_dim, n_dim, sms,
                            include_overhead=include_overhead)

    def all2all_latency(self, volume_per_device: float, sms: int) -> float:
        return all2all_latency(self.comm, volume_per_device, sms)

    def mem_kernel_latency(self, tokens: float, dims: int, sms: int) -> float:
        return self.mem.latency(tokens, dims, sms)

    @property
    def comm_sm_grid(self) -> list[int]:
        return self.comm.sm_grid

    def gemm_saturation_sms(self, kind: str, m_per_group: float, groups: int, k_dim: int,
                            n_dim: int) -> int:
        """Smallest SM grid point whose latency is within tolerance of the best."""
        grid = self.gemm.sm_grid(kind)
        lat = [self.gemm_latency(kind, m_per_group, groups, k_dim, n_dim, s, include_overhead=False)
               for s in grid]
        best = min(lat)
        return next(s for s, t in zip(grid, lat) if t <= best * (1 + self.saturation_tolerance))


def gemm_flops(m_per_group: float, groups: int, k_dim: int, n_dim: int) -> float:
    return 2.0 * m_per_group * groups * k_dim * n_dim


def gemm_latency(table: GemmCalibrationTable, kind: str, m_per_group: float, groups: int,
                 k_dim: int, n_dim: int, sms: int, *, include_overhead: bool = True) -> float:
    """Latency in ms of one GEMM call over ``groups`` experts of ``m_per_group`` rows.

    DenseGemm runs groups as serial launches, so it pays the launch overhead
    once per group; grouped kernels pay it once.
    """
    kind = canonical_kind(kind)
    if min(groups, k_dim, n_dim, sms) <= 0 or m_per_group < 0:
        raise ValueError("GEMM arguments must be positive")
    launches = groups if kind == DENSE else 1
    overhead = table.launch_overhead * launches if include_overhead else 0.0
    if m_per_group == 0:
        return overhead
    thr = table.throughput(kind, m_per_group, groups, k_dim, n_dim, sms)
    return overhead + 1e3 * gemm_flops(m_per_group, groups, k_dim, n_dim) / thr


def gemm_group_split_invariance(table: GemmCalibrationTable, kind: str, m_per_group: float,
                                groups: int, k_dim: int, n_dim: int, sms: int,
                                split: int) -> tuple[float, float]:
    """(one call over all groups, ``split`` serial calls of groups/split), overhead excluded."""
    if split < 1 or groups % split:
        raise ValueError(f"groups={groups} is not divisible by split={split}")
    whole = gemm_latency(table, kind, m_per_group, groups, k_dim, n_dim, sms, include_overhead=False)
    part = gemm_latency(table, kind, m_per_group, groups // split, k_dim, n_dim, sms,
                        include_overhead=False)
    return whole, split * part


def all2all_latency(table: CommCalibrationTable, volume_per_device: float, sms: int) -> float:
    if volume_per_device < 0:
        raise ValueError("volume must be >= 0")
    if volume_per_device == 0:
        return table.fixed_overhead
    return table.fixed_overhead + table.unit_scale * table.transfer_time(volume_per_device, sms)


def mem_kernel_latency(model: MemKernelModel, tokens: float, dims: int, sms: int) -> float:
    if dims <= 0:
        raise ValueError("dims must be positive")
    return model.latency(tokens, dims, sms)


# ----------------------------------------------------------------------------- loading

def _parse_sections(text: str) -> dict[str, tuple[dict[str, str], list[dict[str, str]], int]]:
    sections: dict[str, tuple[dict, list, int]] = {}
    current = None
    header = None
    params: dict = {}
    rows: list = []
    start = 0

    def close():
        if current is not None:
            sections[current] = (params, rows, start)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            close()
            current, header, params, rows, start = line[1:-1].strip().lower(), None, {}, [], lineno
            if current in sections:
                raise CalibrationError(f"line {lineno}: duplicate section [{current}]")
            continue
        if current is None:
            raise CalibrationError(f"line {lineno}: content before the first [section]")
        if header is None and "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            params[key] = value
            continue
        cells = next(csv.reader(io.StringIO(line)))
        cells = [c.strip() for c in cells]
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            raise CalibrationError(
                f"line {lineno}: expected {len(header)} columns in [{current}], got {len(cells)}")
        row = dict(zip(header, cells))
        row["__line__"] = lineno
        rows.append(row)
    close()
    return sections


def _check_header(name: str, rows: list, expected: tuple[str, ...]) -> None:
    if rows and set(rows[0]) - {"__line__"} != set(expected):
        raise CalibrationError(f"[{name}] header must name columns {', '.join(expected)}")


def _num(row: dict, key: str, kind=float):
    try:
        value = float(row[key])
    except (KeyError, ValueError):
        raise CalibrationError(f"line {row.get('__line__')}: bad value for {key!r}") from None
    if kind is int:
        if not value.is_integer():
            raise CalibrationError(f"line {row['__line__']}: {key} must be an integer")
        return int(value)
    return value


def load_calibration(text: str, tolerance: float = MONOTONE_TOLERANCE
                     ) -> tuple[GemmCalibrationTable, CommCalibrationTable, MemKernelModel]:
    """Parse and validate a calibration document."""
    sections = _parse_sections(text)
    for name in ("gemm", "comm", "mem"):
        if name not in sections or not sections[name][1]:
            raise CalibrationError(f"calibration section [{name}] is missing or empty")

    params, rows, _ = sections["gemm"]
    _check_header("gemm", rows, GEMM_COLUMNS)
    entries = []
    for r in rows:
        try:
            kind = canonical_kind(r["kind"])
        except CalibrationError as exc:
            raise CalibrationError(f"line {r['__line__']}: {exc}") from None
        entries.append(GemmEntry(kind, _num(r, "m_per_group", int), _num(r, "groups", int),
                                 _num(r, "k_dim", int), _num(r, "n_dim", int),
                                 _num(r, "sm_count", int), _num(r, "throughput")))
    gemm = GemmCalibrationTable(tuple(entries),
                                float(params.get("launch_overhead", DEFAULT_LAUNCH_OVERHEAD_MS)))
    gemm.validate(tolerance)

    params, rows, _ = sections["comm"]
    _check_header("comm", rows, COMM_COLUMNS)
    comm = CommCalibrationTable(
        tuple(CommEntry(_num(r, "volume_per_device", int), _num(r, "sm_count", int),
                        _num(r, "latency")) for r in rows),
        fixed_overhead=float(params.get("fixed_overhead", 0.0)),
        unit_scale=float(params.get("unit_scale", 1.0)),
    )
    comm.validate()

    params, rows, _ = sections["mem"]
    _check_header("mem", rows, MEM_COLUMNS)
    if "effective_bandwidth" not in params:
        raise CalibrationError("[mem] needs an effective_bandwidth parameter")
    mem = MemKernelModel(
        effective_bandwidth=float(params["effective_bandwidth"]),
        saturation=tuple((_num(r, "tokens", int), _num(r, "saturation_sms", int)) for r in rows),
        launch_overhead=float(params.get("launch_overhead", DEFAULT_LAUNCH_OVERHEAD_MS)),
        bytes_per_element=int(float(params.get("bytes_per_element", 2))),
    )
    return gemm, comm, mem


def format_calibration(gemm: GemmCalibrationTable, comm: CommCalibrationTable,
                       mem: MemKernelModel) -> str:
    out = io.StringIO()
    out.write("[gemm]\n")
    out.write(f"launch_overhead = {gemm.launch_overhead!r}\n")
    out.write(",".join(GEMM_COLUMNS) + "\n")
    for e in gemm.entries:
        out.write(f"{e.kind},{e.m_per_group},{e.groups},{e.k_dim},{e.n_dim},{e.sm_count},"
                  f"{e.throughput:.6g}\n")
    out.write("\n[comm]\n")
    out.write(f"fixed_overhead = {comm.fixed_overhead!r}\nunit_scale = {comm.unit_scale!r}\n")
    out.write(",".join(COMM_COLUMNS) + "\n")
    for e in comm.entries:
        out.write(f"{e.volume_per_device},{e.sm_count},{e.latency:.6g}\n")
    out.write("\n[mem]\n")
    out.write(f"effective_bandwidth = {mem.effective_bandwidth!r}\n"
              f"launch_overhead = {mem.launch_overhead!r}\n"
              f"bytes_per_element = {mem.bytes_per_element}\n")
    out.write(",".join(MEM_COLUMNS) + "\n")
    for tokens, sat in mem.saturation:
        out.write(f"{tokens},{sat}\n")
    return out.getvalue()


def load_kernel_models(text: str) -> KernelModels:
    return KernelModels(*load_calibration(text))


def default_calibration_text() -> str:
    return resources.files("moepipe").joinpath("data/default_calibration.txt").read_text()


_DEFAULT: KernelModels | None = None


def default_kernel_models() -> KernelModels:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_kernel_models(default_calibration_text())
    return _DEFAULT


# --------------------------------------------------------------------------- roofline

@dataclass(frozen=True)
class RooflineKernels:
    """Kernel latencies from the hardware roofline instead of measured tables.

    GEMMs cost max(FLOPs / F, bytes / B); memory-bound kernels cost bytes / B
    (zero when ``free_memory_kernels``); all2all costs volume over the
    interconnect bandwidth plus a fixed per-operation overhead.  SM counts are
    ignored.
    """

    compute_rate: float
    mem_bandwidth: float
    interconnect_bandwidth: float
    comm_fixed_overhead: float = 0.0
    launch_overhead: float = 0.0
    weight_bytes_per_param: int = 2
    act_bytes: int = 2
    free_memory_kernels: bool = False
    comm_sm_grid: list = field(default_factory=lambda: [16])

    @classmethod
    def from_hardware(cls, hw, **kw) -> RooflineKernels:
        return cls(hw.compute_rate, hw.mem_bandwidth, hw.interconnect_bandwidth,
                   hw.comm_fixed_overhead_per_op, **kw)

    def gemm_latency(self, kind, m_per_group, groups, k_dim, n_dim, sms, *, include_overhead=True):
        launches = groups if canonical_kind(kind) == DENSE else 1
        overhead = self.launch_overhead * launches if include_overhead else 0.0
        if m_per_group == 0:
            return overhead
        flops = gemm_flops(m_per_group, groups, k_dim, n_dim)
        moved = (groups * k_dim * n_dim * self.weight_bytes_per_param
                 + m_per_group * groups * (k_dim + n_dim) * self.act_bytes)
        return overhead + 1e3 * max(flops / self.compute_rate, moved / self.mem_bandwidth)

    def all2all_latency(self, volume_per_device, sms):
        return self.comm_fixed_overhead + 1e3 * volume_per_device / self.interconnect_bandwidth

    def mem_kernel_latency(self, tokens, dims, sms):
        if self.free_memory_kernels:
            return 0.0
        return self.launch_overhead + 1e3 * 2.0 * tokens * dims * self.act_bytes / self.mem_bandwidth

    def gemm_saturation_sms(self, kind, m_per_group, groups, k_dim, n_dim):
        return 1
