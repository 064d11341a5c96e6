"""Bit-exact netlist simulation, a direct fixed-point oracle and a float reference.

``simulate`` evaluates the netlist level by level. ``oracle_forward``
recomputes the same fixed-point semantics straight from the folded IR with
a loop over kernel taps, without ever building a tree. The two must agree
code for code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import hardener as hw
from .model_ir import BatchNorm, Conv, EltwiseAdd, GlobalSumPool, Linear, ModelIR, QuantConv, ReLU, infer_shapes
from .quantizer import FixedPointFormat, quantize_fixed


class SimulationError(RuntimeError):
    pass


@dataclass
class FixedTensor:
    codes: np.ndarray
    fmt: FixedPointFormat

    def to_real(self) -> np.ndarray:
        return self.fmt.to_real(self.codes)

    @property
    def shape(self):
        return self.codes.shape


@dataclass
class SimTrace:
    features: FixedTensor
    layers: dict = field(default_factory=dict)  # IR index -> codes (H, W, C)
    masks: dict = field(default_factory=dict)  # IR index -> bool grid, False where eliminated
    values: Optional[np.ndarray] = None  # every node value, when requested

    def to_json(self, **extra) -> str:
        doc = {
            "feature_format": str(self.features.fmt),
            "features": _hex(self.features.codes),
            "layers": {
                str(k): {"shape": list(v.shape), "codes": _hex(v), "live": self.masks[k].ravel().astype(int).tolist()}
                for k, v in sorted(self.layers.items())
            },
        }
        doc.update(extra)
        return json.dumps(doc, sort_keys=True)


def _hex(codes):
    return [hex(int(c)) for c in np.asarray(codes).ravel()]


def _bounds(width):
    width = np.asarray(width, dtype=np.int64)
    return -(np.int64(1) << (width - 1)), (np.int64(1) << (width - 1)) - 1


def shift_saturate(x, shift, width):
    """Fixed shift of a ``width``-bit code: saturating left, flooring right."""
    x = np.asarray(x, dtype=np.int64)
    shift = np.asarray(shift, dtype=np.int64)
    lo, hi = _bounds(width)
    left = np.clip(np.left_shift(x, np.clip(shift, 0, 62)), lo, hi)
    right = np.right_shift(x, np.clip(-shift, 0, 62))
    return np.where(shift > 0, left, right)


def relu_gate(x, width):
    """ReLU as hardware does it: AND every bit with the inverted sign bit."""
    x = np.asarray(x, dtype=np.int64)
    width = np.asarray(width, dtype=np.int64)
    full = (np.int64(1) << width) - 1
    u = x & full
    msb = (u >> (width - 1)) & 1
    return u & ((msb ^ 1) * full)


def requantize(x, drop_bits, width):
    lo, hi = _bounds(width)
    return np.clip(np.right_shift(np.asarray(x, dtype=np.int64), drop_bits), lo, hi)


def _check_input(netlist, x):
    if isinstance(x, FixedTensor):
        if x.fmt != netlist.act_format:
            raise SimulationError(f"input format {x.fmt} != netlist format {netlist.act_format}")
        x = x.codes
    x = np.asarray(x)
    if x.shape != tuple(netlist.input_shape):
        raise SimulationError(f"input shape {x.shape} != netlist input {tuple(netlist.input_shape)}")
    if not np.issubdtype(x.dtype, np.integer):
        raise SimulationError("input must hold integer codes; use encode_input for real or RGB data")
    fmt = netlist.act_format
    if x.min(initial=0) < fmt.min_code or x.max(initial=0) > fmt.max_code:
        raise SimulationError(f"input codes outside {fmt}")
    return x.astype(np.int64)


def simulate(netlist, x, keep_values: bool = False) -> SimTrace:
    """Evaluate ``netlist`` on input codes ``x`` (H, W, C).

    Raises ``SimulationError`` if any node leaves its declared width.
    """
    x = _check_input(netlist, x).ravel()
    n = netlist
    v = np.zeros(len(n), dtype=np.int64)
    for kind, idx in n.schedule():
        a = n.a[idx]
        if kind == hw.INPUT:
            r = x[n.imm[idx]]
        elif kind == hw.REWIRE:
            r = shift_saturate(v[a], n.imm[idx], n.width[idx])
        elif kind in (hw.ADD, hw.ELTADD):
            vb = v[n.b[idx]]
            r = v[a] + np.where(n.flag[idx] != 0, -vb, vb)
        elif kind in (hw.PASS, hw.OUTPUT):
            r = v[a]
        elif kind == hw.BIAS:
            va = np.where(a >= 0, v[np.maximum(a, 0)], 0)
            r = n.imm[idx] + np.where(n.flag[idx] != 0, -va, va)
        elif kind == hw.RELU:
            r = relu_gate(v[a], n.width[idx])
        elif kind == hw.REQUANT:
            r = requantize(v[a], n.imm[idx], n.width[idx])
        else:
            raise SimulationError(f"unknown node kind {kind}")
        lo, hi = _bounds(n.width[idx])
        bad = (r < lo) | (r > hi)
        if bad.any():
            j = int(idx[np.argmax(bad)])
            raise SimulationError(f"node {j} ({hw.KIND_NAMES[kind]}) overflowed its {int(n.width[j])}-bit width")
        v[idx] = r
    trace = SimTrace(FixedTensor(v[n.outputs], n.feature_format))
    for k, grid in n.layer_grids.items():
        live = grid >= 0
        trace.layers[k] = np.where(live, v[np.maximum(grid, 0)], 0)
        trace.masks[k] = live
    if keep_values:
        trace.values = v
    return trace


# -- direct fixed-point oracle ---------------------------------------------


def _qconv_direct(layer: QuantConv, x, act: FixedPointFormat, out_shape):
    spec = layer.spec
    P, Q, M = out_shape
    pad = spec.padding
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    Mg = M // spec.groups
    Cg = spec.channels_per_group
    acc = np.zeros((P, Q, M), dtype=np.int64)
    group_base = (np.arange(M) // Mg) * Cg
    hs = spec.stride * (P - 1) + 1
    ws = spec.stride * (Q - 1) + 1
    for r in range(spec.kernel_h):
        for s in range(spec.kernel_w):
            window = xp[r:r + hs:spec.stride, s:s + ws:spec.stride, :]
            for cl in range(Cg):
                taps = window[:, :, group_base + cl]  # (P, Q, M)
                sign = layer.sign[:, r, s, cl].astype(np.int64)
                acc += sign * shift_saturate(taps, layer.exponent[:, r, s, cl], act.width)
    return acc + np.asarray(layer.bias, dtype=np.int64)


def oracle_forward(ir: ModelIR, x) -> SimTrace:
    """Fixed-point forward pass of a folded model, layer by layer in numpy.

    Fused conv+ReLU pairs report the post-ReLU tensor at both indices, as the
    netlist does.
    """
    act = ir.act_format
    if isinstance(x, FixedTensor):
        x = x.codes
    x = np.asarray(x, dtype=np.int64)
    if x.shape != ir.input_shape.as_tuple():
        raise SimulationError(f"input shape {x.shape} != model input {ir.input_shape.as_tuple()}")
    shapes = infer_shapes(ir)
    layers = ir.feature_layers()
    outs = {-1: x}
    trace_layers = {}
    cur, fmt = x, act
    for i, layer in enumerate(layers):
        if isinstance(layer, QuantConv):
            acc = _qconv_direct(layer, cur, act, shapes[i].as_tuple())
            if i + 1 < len(layers) and isinstance(layers[i + 1], ReLU):
                acc = np.maximum(acc, 0)
            drop = (layer.acc_format or act).frac_bits - act.frac_bits
            cur = np.clip(acc >> drop, act.min_code, act.max_code)
        elif isinstance(layer, ReLU):
            cur = np.maximum(cur, 0)
        elif isinstance(layer, EltwiseAdd):
            cur = np.clip(cur + outs[layer.source], act.min_code, act.max_code)
        elif isinstance(layer, GlobalSumPool):
            hw_ = cur.shape[0] * cur.shape[1]
            cur = cur.sum(axis=(0, 1), keepdims=True)
            depth = int(np.ceil(np.log2(hw_))) if hw_ > 1 else 0
            fmt = FixedPointFormat(fmt.int_bits + depth, fmt.frac_bits)
        else:
            raise SimulationError(f"layer {i}: oracle cannot run {layer.kind}")
        outs[i] = cur
        trace_layers[i] = cur
    trace = SimTrace(FixedTensor(cur.ravel(), fmt), trace_layers)
    trace.masks = {k: np.ones(v.shape, dtype=bool) for k, v in trace_layers.items()}
    return trace


def compare_traces(sim: SimTrace, ref: SimTrace):
    """First ``(layer, (h, w, c), sim code, ref code)`` mismatch over live nodes, or None."""
    for k in sorted(ref.layers):
        if k not in sim.layers:
            continue
        a, b, live = sim.layers[k], ref.layers[k], sim.masks[k]
        bad = live & (a != b)
        if bad.any():
            pos = tuple(int(t) for t in np.argwhere(bad)[0])
            return k, pos, int(a[pos]), int(b[pos])
    if not np.array_equal(sim.features.codes, ref.features.codes):
        j = int(np.argmax(sim.features.codes != ref.features.codes))
        return "features", (j,), int(sim.features.codes[j]), int(ref.features.codes[j])
    return None


# -- real-valued reference --------------------------------------------------


def conv_loopnest(x, weights, spec, bias=None):
    """Real-valued conv, looping over kernel taps."""
    x = np.asarray(x, dtype=np.float64)
    P, Q, M = spec.output_shape(_shape(x)).as_tuple()
    pad = spec.padding
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    Mg = M // spec.groups
    Cg = spec.channels_per_group
    base = (np.arange(M) // Mg) * Cg
    out = np.zeros((P, Q, M))
    hs, ws = spec.stride * (P - 1) + 1, spec.stride * (Q - 1) + 1
    for r in range(spec.kernel_h):
        for s in range(spec.kernel_w):
            window = xp[r:r + hs:spec.stride, s:s + ws:spec.stride, :]
            for cl in range(Cg):
                out += window[:, :, base + cl] * weights[:, r, s, cl]
    if bias is not None:
        out += bias
    return out


def im2col(x, spec):
    """Toeplitz (patch) matrix per group: shape (groups, P*Q, R*S*C/g)."""
    x = np.asarray(x, dtype=np.float64)
    P, Q, _ = spec.output_shape(_shape(x)).as_tuple()
    pad = spec.padding
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    R, S, g, Cg = spec.kernel_h, spec.kernel_w, spec.groups, spec.channels_per_group
    cols = np.empty((g, P * Q, R * S * Cg))
    hs, ws = spec.stride * (P - 1) + 1, spec.stride * (Q - 1) + 1
    for r in range(R):
        for s in range(S):
            window = xp[r:r + hs:spec.stride, s:s + ws:spec.stride, :].reshape(P * Q, g, Cg)
            for gi in range(g):
                j = (r * S + s) * Cg
                cols[gi, :, j:j + Cg] = window[:, gi, :]
    return cols


def conv_toeplitz(x, weights, spec, bias=None):
    """Same conv as a GEMM per group over the Toeplitz matrix."""
    P, Q, M = spec.output_shape(_shape(x)).as_tuple()
    cols = im2col(x, spec)
    Mg = M // spec.groups
    w = np.asarray(weights, dtype=np.float64).reshape(spec.groups, Mg, -1)
    out = np.einsum("gnk,gmk->ngm", cols, w).reshape(P, Q, M)
    if bias is not None:
        out = out + bias
    return out


def _shape(x):
    from .model_ir import TensorShape
    return TensorShape(*x.shape)


def float_reference(ir: ModelIR, x_real, with_logits: bool = False):
    """Double-precision forward of an unquantized model; exact batch-norm."""
    if ir.quantized:
        raise SimulationError("float_reference runs real-valued models; dequantize_model first")
    cur = np.asarray(x_real, dtype=np.float64)
    outs = {-1: cur}
    for i, layer in enumerate(ir.feature_layers()):
        if isinstance(layer, Conv):
            cur = conv_loopnest(cur, layer.weights, layer.spec, layer.bias)
        elif isinstance(layer, BatchNorm):
            bn = layer.bn
            cur = bn.gamma * (cur - bn.mean) / np.sqrt(bn.var + bn.eps) + bn.beta
        elif isinstance(layer, ReLU):
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, EltwiseAdd):
            cur = cur + outs[layer.source]
        elif isinstance(layer, GlobalSumPool):
            cur = cur.sum(axis=(0, 1), keepdims=True)
        else:
            raise SimulationError(f"layer {i}: float reference cannot run {layer.kind}")
        outs[i] = cur
    feats = cur.ravel()
    if with_logits:
        return feats, ir.classifier.weights @ feats
    return feats


# -- inputs and end-to-end ------------------------------------------------


def encode_input(x_real, fmt: FixedPointFormat) -> np.ndarray:
    return np.asarray(quantize_fixed(np.asarray(x_real, dtype=np.float64), fmt), dtype=np.int64)


def load_rgb(path, shape, fmt: FixedPointFormat, scale: float = 1.0 / 255.0) -> np.ndarray:
    """Raw interleaved 8-bit RGB file -> input codes (pixels scaled to [0, 1])."""
    raw = np.fromfile(path, dtype=np.uint8)
    need = int(np.prod(shape))
    if raw.size != need:
        raise SimulationError(f"{path}: {raw.size} bytes, expected {need} for shape {tuple(shape)}")
    return encode_input(raw.reshape(shape) * scale, fmt)


def end_to_end(netlist, classifier_weights, x, npu=None):
    """Hardened features, dequantized, then the classifier GEMV on the NPU."""
    from .npu import npu_execute

    trace = simulate(netlist, x)
    feats = trace.features.to_real()
    return npu_execute(np.asarray(classifier_weights), feats, npu), trace
