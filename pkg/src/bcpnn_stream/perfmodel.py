"""Roofline performance model of the FPGA accelerator.

Peak compute is limited by whichever of LUTs or DSPs runs out first when the
fabric is filled with floating-point operators. Memory bandwidth is the HBM
clock times transfer width times channel count. Their ratio, the machine
balance, separates memory-bound kernels from compute-bound ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from bcpnn_stream import counting
from bcpnn_stream.config import ModelConfig, check_config
from bcpnn_stream.errors import AccountingError, ConfigError

COMPOSITIONS = ("mac", "independent")
INTENSITY_MODES = ("inference", "unsupervised", "supervised", "struct")

# Points may exceed the roof by this fraction before it counts as a bug.
ROOF_SLACK = 0.01


@dataclass(frozen=True)
class ResourceBudget:
    """FPGA resources available for floating-point operators.

    ``composition`` selects how operator costs combine into slots. ``mac``
    (default) builds fused multiply-accumulate units from one adder and one
    multiplier, two FLOPs per slot. ``independent`` gives adders and
    multipliers half of each resource and counts one FLOP per operator.
    """

    lut_available: float = 1_146_240
    dsp_available: float = 8_376
    lut_per_add: float = 192
    dsp_per_add: float = 2
    lut_per_mul: float = 74
    dsp_per_mul: float = 3
    utilization_lut: float = 0.8
    utilization_dsp: float = 0.8
    f_impl: float = 100e6
    composition: str = "mac"

    def __post_init__(self):
        for f in fields(self):
            if f.name == "composition":
                continue
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{f.name} must be positive (got {v})")
        for name in ("utilization_lut", "utilization_dsp"):
            if getattr(self, name) > 1.0:
                raise ConfigError(f"{name} must lie in (0, 1] (got {getattr(self, name)})")
        if self.composition not in COMPOSITIONS:
            raise ConfigError(f"composition must be one of {COMPOSITIONS} (got {self.composition!r})")


@dataclass(frozen=True)
class MemorySystem:
    f_mem: float = 450e6
    width_bytes: float = 32
    channels: float = 32

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{f.name} must be positive (got {v})")


U55C_BUDGET = ResourceBudget()
U55C_MEMORY = MemorySystem()


def _slots(lut, dsp, lut_cost, dsp_cost):
    return min(lut / lut_cost, dsp / dsp_cost)


def peak_compute(rb: ResourceBudget) -> float:
    """Peak FLOP/s the budget supports."""
    lut = rb.lut_available * rb.utilization_lut
    dsp = rb.dsp_available * rb.utilization_dsp
    if rb.composition == "mac":
        slots = _slots(lut, dsp, rb.lut_per_add + rb.lut_per_mul, rb.dsp_per_add + rb.dsp_per_mul)
        return rb.f_impl * slots * 2.0
    adders = _slots(lut / 2, dsp / 2, rb.lut_per_add, rb.dsp_per_add)
    multipliers = _slots(lut / 2, dsp / 2, rb.lut_per_mul, rb.dsp_per_mul)
    return rb.f_impl * (adders + multipliers)


def hbm_bandwidth(ms: MemorySystem) -> float:
    """Bytes per second."""
    return ms.f_mem * ms.width_bytes * ms.channels


def machine_balance(rb: ResourceBudget, ms: MemorySystem) -> float:
    """FLOP per byte at which the two roofs meet."""
    return peak_compute(rb) / hbm_bandwidth(ms)


def is_memory_bound(intensity: float, rb: ResourceBudget, ms: MemorySystem) -> bool:
    return intensity < machine_balance(rb, ms)


def attainable(intensity: float, rb: ResourceBudget, ms: MemorySystem) -> float:
    return min(peak_compute(rb), intensity * hbm_bandwidth(ms))


# --- analytic operation counts ---------------------------------------------------

def image_counts(cfg: ModelConfig, mode: str, costs: counting.CostModel = counting.DEFAULT_COSTS):
    """``(flops, bytes)`` that one image costs in ``mode``.

    Mirrors the kernel invocations the engines make, so it equals the
    instrumented count of either engine exactly.
    """
    if mode not in INTENSITY_MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(INTENSITY_MODES)}")
    check_config(cfg)
    c = counting.OpCounter(costs)
    H, M, C = cfg.hidden_hc, cfg.hidden_mc, cfg.n_classes
    K, P = cfg.rf_len, cfg.packet_ih
    structural = mode == "struct"
    c.add(counting.fetch_input(cfg.n_input))
    if structural:
        c.add(counting.fetch_receptive_field(H, cfg.nact_hi))
    c.add(counting.support_packet(P, M), H * (K // P))
    c.add(counting.support_finalize(K // P, M), H)
    if mode in ("unsupervised", "struct"):
        c.add(counting.noise(M), H)
    c.add(counting.softmax(M, costs), H)
    if mode in ("unsupervised", "struct"):
        c.add(counting.unit_trace(cfg.n_input, costs))
        c.add(counting.unit_trace(M, costs), H)
        c.add(counting.bias_write(M), H)
        c.add(counting.joint_block(K, M, costs), H)
        if structural:
            c.add(counting.silent_block(cfg.n_input, M), H)
    elif mode == "supervised":
        n_h = cfg.n_hidden
        c.add(counting.unit_trace(n_h, costs))
        c.add(counting.unit_trace(C, costs))
        c.add(counting.bias_write(C))
        c.add(counting.joint_block(n_h, C, costs))
    else:
        Q = cfg.packet_ho
        c.add(counting.support_packet(Q, C), cfg.n_hidden // Q)
        c.add(counting.support_finalize(cfg.n_hidden // Q, C))
        c.add(counting.softmax(C, costs))
    return c.snapshot()


def arithmetic_intensity(cfg: ModelConfig, mode: str, costs: counting.CostModel = counting.DEFAULT_COSTS) -> float:
    flops, nbytes = image_counts(cfg, mode, costs)
    return flops / nbytes


# --- report ----------------------------------------------------------------------

@dataclass(frozen=True)
class RooflinePoint:
    label: str
    arithmetic_intensity: float
    achieved: float  # FLOP/s; NaN when only the analytic position is known
    roof: float

    @property
    def fraction_of_roof(self) -> float:
        return self.achieved / self.roof


def make_point(label, intensity, achieved, rb, ms) -> RooflinePoint:
    return RooflinePoint(label, intensity, achieved, attainable(intensity, rb, ms))


def roof_polyline(rb, ms, lo=1e-3, hi=1e3, n=61):
    """Sample points of ``min(C, I * B)`` on a log grid, plus the ridge point."""
    ridge = machine_balance(rb, ms)
    xs = [lo * (hi / lo) ** (k / (n - 1)) for k in range(n)]
    xs = sorted(set(xs + [ridge]))
    return [(x, attainable(x, rb, ms)) for x in xs]


def roofline_report(points, rb: ResourceBudget, ms: MemorySystem):
    """Validate points against the roof; returns ``(point rows, polyline)``.

    Raises ``AccountingError`` for a point more than 1% above its roof.
    """
    rows = []
    for p in points:
        roof = attainable(p.arithmetic_intensity, rb, ms)
        if not math.isnan(p.achieved) and p.achieved > roof * (1.0 + ROOF_SLACK):
            raise AccountingError(
                f"{p.label}: achieved {p.achieved:.4g} FLOP/s exceeds the roof {roof:.4g} FLOP/s "
                f"at intensity {p.arithmetic_intensity:.4g}; an operation or byte counter is wrong"
            )
        rows.append(replace(p, roof=roof))
    return rows, roof_polyline(rb, ms)


def report_csv(rows, polyline, rb, ms) -> str:
    lines = [
        "kind,label,arithmetic_intensity,achieved_flops,roof_flops",
        f"summary,peak_compute,,,{peak_compute(rb):.6g}",
        f"summary,hbm_bandwidth_bytes,,,{hbm_bandwidth(ms):.6g}",
        f"summary,machine_balance,{machine_balance(rb, ms):.6g},,",
    ]
    for r in rows:
        achieved = "" if math.isnan(r.achieved) else f"{r.achieved:.6g}"
        lines.append(f"point,{r.label},{r.arithmetic_intensity:.6g},{achieved},{r.roof:.6g}")
    for x, y in polyline:
        lines.append(f"roof,,{x:.6g},,{y:.6g}")
    return "\n".join(lines) + "\n"


def achieved_from_stats_csv(path) -> tuple[float, float]:
    """``(intensity, achieved FLOP/s)`` from a pipeline stats CSV."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ConfigError(f"{path}: empty stats file")
    header = text[0].split(",")
    try:
        i_lat, i_f, i_b = header.index("latency_us"), header.index("flops"), header.index("bytes")
    except ValueError:
        raise ConfigError(f"{path}: not a pipeline stats CSV (header {header[:4]})") from None
    lat = flops = nbytes = 0.0
    for line in text[1:]:
        cols = line.split(",")
        lat += float(cols[i_lat])
        flops += float(cols[i_f])
        nbytes += float(cols[i_b])
    if lat <= 0 or nbytes <= 0:
        raise ConfigError(f"{path}: no timed images")
    return flops / nbytes, flops / (lat * 1e-6)


# --- resource file -----------------------------------------------------------------

def loads_resources(text: str, source: str = "<string>"):
    """``key = value`` lines setting any ResourceBudget or MemorySystem field.

    Unset keys keep the Alveo U55C defaults.
    """
    rb_keys = {f.name for f in fields(ResourceBudget)}
    ms_keys = {f.name for f in fields(MemorySystem)}
    rb_vals, ms_vals = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in rb_vals or key in ms_vals:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if key == "composition":
            rb_vals[key] = value
            continue
        try:
            number = float(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad number for {key}: {value!r}") from None
        if key in rb_keys:
            rb_vals[key] = number
        elif key in ms_keys:
            ms_vals[key] = number
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return ResourceBudget(**rb_vals), MemorySystem(**ms_vals)


def load_resources(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read resource file {path}: {exc}") from exc
    return loads_resources(text, source=str(path))


def dumps_resources(rb: ResourceBudget, ms: MemorySystem) -> str:
    lines = [f"{f.name} = {getattr(rb, f.name)}" for f in fields(ResourceBudget)]
    lines += [f"{f.name} = {getattr(ms, f.name)}" for f in fields(MemorySystem)]
    return "\n".join(lines) + "\n"
