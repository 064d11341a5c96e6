"""Analytical area and throughput/latency models.

Area: a hardened conv costs ``alpha`` um^2 per full-adder bit of its adder
trees and bias adders, plus a fixed cost per ReLU gate. ``alpha`` is fitted
to synthesized reference rows (TABLE4).

Throughput: ``k`` copies of the accelerator tile the reticle; each copy is
fed by an interconnect whose bandwidth scales with its area. The flexible
variant is pipelined behind a fixed NPU cycle budget, the fixed variant only
waits on data loading.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .model_ir import ConvSpec, ModelIR, QuantConv, Conv, ReLU, input_shapes

# -- adder trees ------------------------------------------------------------


def adder_tree_bits(leaves: int, act_bits: int = 8):
    """Full-adder bits of a balanced reduction tree, plus its width histogram.

    Adjacent operands are paired each level; an odd one is passed up unchanged.
    An adder's cost is its operand width; its result is one bit wider.
    Returns ``(total_bits, {cell_width: count})``.
    """
    if leaves < 1:
        raise ValueError("leaves must be >= 1")
    widths = [act_bits] * leaves
    hist = {}
    total = 0
    while len(widths) > 1:
        nxt = []
        for j in range(0, len(widths) - 1, 2):
            w = max(widths[j], widths[j + 1])
            hist[w] = hist.get(w, 0) + 1
            total += w
            nxt.append(w + 1)
        if len(widths) % 2:
            nxt.append(widths[-1])
        widths = nxt
    return total, hist


def adder_tree_bits_closed(leaves: int, act_bits: int = 8) -> int:
    """Closed form for power-of-two leaf counts: level i has leaves/2^(i+1) adders of act_bits+i bits."""
    depth = int(round(math.log2(leaves)))
    if 1 << depth != leaves:
        raise ValueError("closed form needs a power-of-two leaf count")
    return sum((leaves >> (i + 1)) * (act_bits + i) for i in range(depth))


def tree_depth(leaves: int) -> int:
    return math.ceil(math.log2(leaves)) if leaves > 1 else 0


# -- calibration data ---------------------------------------------------------

# (label, kernel, in_channels, {act_bits: um^2}) from ASAP7 synthesis
TABLE4 = [
    ("3x3x3", 3, 3, {5: 27.3, 6: 35.9, 7: 43.5, 8: 50.0}),
    ("3x3 (pw)", 3, 1, {5: 1.0, 6: 1.0, 7: 1.0, 8: 1.0}),
    ("1x1x16", 1, 16, {5: 16.4, 6: 21.0, 7: 25.0, 8: 29.4}),
    ("1x1x32", 1, 32, {5: 33.3, 6: 43.7, 7: 50.0, 8: 61.0}),
    ("1x1x64", 1, 64, {5: 72.6, 6: 88.2, 7: 106.4, 8: 126.0}),
    ("1x1x320", 1, 320, {5: 362.9, 6: 450.7, 7: 543.2, 8: 632.6}),
]


def table4_rows(labels=None, bits=(8,)):
    """``(leaves, act_bits, um2)`` reference rows for ``calibrate_alpha``."""
    out = []
    for label, kern, cin, by_bits in TABLE4:
        if labels is not None and label not in labels:
            continue
        for b in bits:
            out.append((kern * kern * cin, b, by_bits[b]))
    return out


def calibrate_alpha(rows) -> float:
    """Least-squares ``area ~ alpha * tree_bits`` through the origin.

    ``rows`` holds ``(leaves, act_bits, um2)`` tuples.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("calibrate_alpha needs at least one reference row")
    bits = np.array([adder_tree_bits(n, b)[0] for n, b, _ in rows], dtype=float)
    area = np.array([a for _, _, a in rows], dtype=float)
    if not np.any(bits):
        raise ValueError("reference rows have no adder bits")
    return float(bits @ area / (bits @ bits))


ALPHA_1x1x16 = 29.4 / 131.0


@dataclass(frozen=True)
class AreaParams:
    alpha: float = ALPHA_1x1x16  # um^2 per full-adder bit
    relu_um2: float = 0.1
    mac_um2: float = 31.2
    npu_mm2: float = 0.24
    buffers_mm2: float = 0.42
    a0_mm2: float = 549.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"AreaParams.{k} must be positive")


def tree_area(leaves: int, act_bits: int, params: AreaParams = AreaParams()) -> float:
    return params.alpha * adder_tree_bits(leaves, act_bits)[0]


@dataclass
class LayerArea:
    outputs: int
    leaves: int
    tree_bits: int
    bias_bits: int
    relu_gates: int
    um2: float


def layer_area(spec: ConvSpec, inp, sparsity: float = 0.0, act_bits: int = 8,
               params: AreaParams = AreaParams(), prunable: bool = True, relu: bool = True) -> LayerArea:
    """Area of one hardened conv: PQM trees, PQM bias adders and PQM ReLU gates.

    Each tree keeps ``ceil((1 - s) * RSC)`` leaves. Unprunable layers (first
    conv, depthwise) keep all of them. The bias adder is as wide as the
    accumulator (activation bits + ceil(log2 RSC)).
    """
    out = spec.output_shape(inp)
    n_out = out.size
    fan_in = spec.fan_in
    s = sparsity if prunable else 0.0
    leaves = max(1, math.ceil((1.0 - s) * fan_in - 1e-9))
    tbits = adder_tree_bits(leaves, act_bits)[0]
    bbits = act_bits + tree_depth(fan_in)
    gates = n_out if relu else 0
    um2 = n_out * params.alpha * (tbits + bbits) + gates * params.relu_um2
    return LayerArea(n_out, leaves, tbits * n_out, bbits * n_out, gates, um2)


@dataclass
class AreaReport:
    extractor_mm2: float
    npu_mm2: float
    buffers_mm2: float
    sparsity: float
    mode: str
    layers: list = field(default_factory=list)

    @property
    def total_mm2(self) -> float:
        return self.extractor_mm2 + self.npu_mm2 + self.buffers_mm2

    def as_dict(self):
        d = {
            "mode": self.mode,
            "sparsity": self.sparsity,
            "extractor_mm2": self.extractor_mm2,
            "npu_mm2": self.npu_mm2,
            "buffers_mm2": self.buffers_mm2,
            "total_mm2": self.total_mm2,
        }
        if self.layers:
            d["layers"] = [dict(index=i, **asdict(la)) for i, la in self.layers]
        return d


def model_area(ir: Optional[ModelIR], sparsity: float, params: AreaParams = AreaParams(),
               mode: str = "linear", act_bits: int = 8) -> AreaReport:
    """Chip area for one accelerator copy.

    ``linear`` scales the base extractor area by (1 - s). ``detailed`` sums
    ``layer_area`` over every conv of ``ir``.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must be in [0, 1)")
    if mode == "linear":
        return AreaReport(params.a0_mm2 * (1.0 - sparsity), params.npu_mm2, params.buffers_mm2, sparsity, mode)
    if mode != "detailed":
        raise ValueError(f"unknown area mode {mode!r}")
    if ir is None:
        raise ValueError("detailed area mode needs a model")
    rows = []
    first = None
    shapes = input_shapes(ir)
    layers = ir.layers
    for i, layer in enumerate(layers):
        if not isinstance(layer, (Conv, QuantConv)):
            continue
        if first is None:
            first = i
        prunable = i != first and not layer.spec.is_depthwise
        relu = _followed_by_relu(layers, i)
        rows.append((i, layer_area(layer.spec, shapes[i], sparsity, act_bits, params, prunable, relu)))
    um2 = sum(la.um2 for _, la in rows)
    return AreaReport(um2 * 1e-6, params.npu_mm2, params.buffers_mm2, sparsity, mode, rows)


def _followed_by_relu(layers, i):
    for nxt in layers[i + 1:i + 3]:
        if isinstance(nxt, ReLU):
            return True
        if isinstance(nxt, (Conv, QuantConv)):
            return False
    return False


# -- throughput / latency ---------------------------------------------------

PER_ACCELERATOR, DIE_SHARED = "per_accelerator", "die_shared"
VARIANTS = ("flex", "fix")


@dataclass(frozen=True)
class PerfParams:
    a0_mm2: float = 549.0
    reticle_mm2: float = 850.0
    bandwidth_gbps: float = 900.0  # reference interconnect
    ref_area_mm2: float = 814.0  # die area of the reference part
    clock_ghz: float = 1.0
    npu_cycles: int = 3300
    bytes_in: int = 224 * 224 * 3
    bytes_out: int = 1000 * 4
    bandwidth_mode: Optional[str] = None  # None: die_shared for flex, per_accelerator for fix

    def __post_init__(self):
        if self.reticle_mm2 <= 0 or self.clock_ghz <= 0:
            raise ValueError("reticle and clock must be positive")
        if self.bandwidth_mode not in (None, PER_ACCELERATOR, DIE_SHARED):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth_mode!r}")

    def mode_for(self, variant: str) -> str:
        if self.bandwidth_mode:
            return self.bandwidth_mode
        return DIE_SHARED if variant == "flex" else PER_ACCELERATOR


TABLE3_PRESET = PerfParams(reticle_mm2=880.0)


@dataclass
class PerfReport:
    variant: str
    sparsity: float
    a_mm2: float
    k: int
    load_cycles: int
    npu_cycles: int
    latency_cycles: int
    latency_us: float
    throughput_ips: float
    limiter: str
    bandwidth_mode: str
    feasible: bool = True

    def as_dict(self):
        return asdict(self)


def perf_model(sparsity: float, variant: str = "flex", params: PerfParams = PerfParams()) -> PerfReport:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must be in [0, 1)")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    a = params.a0_mm2 * (1.0 - sparsity)
    k = math.floor(params.reticle_mm2 / a + 1e-12)
    feasible = k >= 1
    k = max(k, 1)
    mode = params.mode_for(variant)
    bytes_per_cycle = params.bandwidth_gbps * a / params.ref_area_mm2 / params.clock_ghz
    traffic = (params.bytes_in + params.bytes_out) * (k if mode == DIE_SHARED else 1)
    load = math.ceil(traffic / bytes_per_cycle - 1e-9)
    if variant == "flex":
        lat = max(params.npu_cycles, load)
        limiter = "npu" if params.npu_cycles >= load else "load"
    else:
        lat, limiter = load, "load"
    latency_s = lat / (params.clock_ghz * 1e9)
    return PerfReport(variant, sparsity, a, k, load, params.npu_cycles if variant == "flex" else 0, lat,
                      latency_s * 1e6, k / latency_s, limiter, mode, feasible)


SWEEP_HEADER = ["sparsity", "a_mm2", "k", "load_cycles", "latency_us", "throughput_ips", "limiter"]


@dataclass
class SweepResult:
    rows: list

    def crossover(self):
        """``(last npu-bound s, first load-bound s)`` or None if the limiter never flips."""
        for prev, cur in zip(self.rows, self.rows[1:]):
            if prev.limiter == "npu" and cur.limiter == "load":
                return prev.sparsity, cur.sparsity
        return None

    def peak(self) -> PerfReport:
        return max(self.rows, key=lambda r: r.throughput_ips)

    def to_csv(self, header_comment: str = "") -> str:
        buf = io.StringIO()
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow([f"{r.sparsity:.4f}", f"{r.a_mm2:.4f}", r.k, r.load_cycles, f"{r.latency_us:.6f}",
                        f"{r.throughput_ips:.6g}", r.limiter])
        return buf.getvalue()


def sweep(start: float = 0.0, stop: float = 0.8, step: float = 0.01, variant: str = "flex",
          params: PerfParams = PerfParams()) -> SweepResult:
    if step <= 0 or stop < start:
        raise ValueError("need step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    pts = [round(start + i * step, 10) for i in range(n)]
    return SweepResult([perf_model(s, variant, params) for s in pts])


# -- reference table --------------------------------------------------------

TABLE3_REFERENCE = {
    "flex": {"throughput_ips": 1.21e6, "latency_us": 3.3, "area_mm2": 880.0, "sparsity": 0.6},
    "fix": {"throughput_ips": 4.0e6, "latency_us": 0.25, "area_mm2": 550.0, "sparsity": 0.0},
}


def table3(params: PerfParams = TABLE3_PRESET, area: AreaParams = AreaParams()):
    """Our flex and fix rows next to the published ones, with percent deviation."""
    if area.a0_mm2 != params.a0_mm2:
        area = replace(area, a0_mm2=params.a0_mm2)
    rows = []
    for variant, ref in TABLE3_REFERENCE.items():
        rep = perf_model(ref["sparsity"], variant, params)
        one = model_area(None, ref["sparsity"], area)
        chip = rep.k * (one.total_mm2 if variant == "flex" else one.extractor_mm2)
        ours = {"throughput_ips": rep.throughput_ips, "latency_us": rep.latency_us, "area_mm2": chip}
        dev = {k: 100.0 * (ours[k] - ref[k]) / ref[k] for k in ours}
        note = ""
        if variant == "flex" and rep.k != 4:
            note = (f"reticle {params.reticle_mm2:g} mm^2 fits k={rep.k} copies of {rep.a_mm2:.1f} mm^2; "
                    "the published row assumes k=4 (880 mm^2 total), which needs the 880 preset")
        rows.append({"variant": variant, "k": rep.k, "ours": ours, "reference": dict(ref), "deviation_pct": dev,
                     "note": note, "report": rep.as_dict()})
    return rows


def format_table3(rows) -> str:
    lines = [f"{'variant':8} {'k':>2} {'throughput (img/s)':>24} {'latency (us)':>22} {'area (mm^2)':>22}"]
    for r in rows:
        o, ref, d = r["ours"], r["reference"], r["deviation_pct"]
        lines.append(
            f"{r['variant']:8} {r['k']:>2} "
            f"{o['throughput_ips']:>10.4g} vs {ref['throughput_ips']:<8.3g}({d['throughput_ips']:+.1f}%) "
            f"{o['latency_us']:>6.3f} vs {ref['latency_us']:<5g}({d['latency_us']:+.1f}%) "
            f"{o['area_mm2']:>7.1f} vs {ref['area_mm2']:<5g}({d['area_mm2']:+.1f}%)"
        )
        if r["note"]:
            lines.append(f"  note: {r['note']}")
    return "\n".join(lines)


def dumps(obj, **extra) -> str:
    doc = dict(obj)
    doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True, default=str)
