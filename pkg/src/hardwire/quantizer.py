"""Po2 weight codes, fixed-point activations, batch-norm folding and pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .model_ir import BatchNorm, Conv, EltwiseAdd, ModelError, ModelIR, QuantConv, _frozen


class CompressionError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed two's-complement ``Qm.n``; ``int_bits`` counts the sign bit.

    Q3.5 is therefore 8 bits wide with range [-4, 4 - 2**-5].
    """

    int_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.int_bits < 1 or self.frac_bits < 0:
            raise ValueError(f"invalid fixed-point format Q{self.int_bits}.{self.frac_bits}")
        if self.width > 32:
            raise ValueError(f"Q{self.int_bits}.{self.frac_bits} is wider than 32 bits")

    @property
    def width(self) -> int:
        return self.int_bits + self.frac_bits

    @property
    def min_code(self) -> int:
        return -(1 << (self.width - 1))

    @property
    def max_code(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.min_code * self.resolution

    @property
    def max_value(self) -> float:
        return self.max_code * self.resolution

    def widen(self, extra_int_bits: int) -> "FixedPointFormat":
        return FixedPointFormat(self.int_bits + extra_int_bits, self.frac_bits)

    def to_real(self, codes):
        return np.asarray(codes, dtype=np.float64) * self.resolution

    def __str__(self):
        return f"Q{self.int_bits}.{self.frac_bits}"

    @classmethod
    def parse(cls, text: str) -> "FixedPointFormat":
        t = text.strip().upper().lstrip("Q")
        m, n = t.split(".")
        return cls(int(m), int(n))


Q3_5 = FixedPointFormat(3, 5)


@dataclass(frozen=True)
class Po2Weight:
    """``sign * 2**exponent``; ``sign == 0`` is the Zero code."""

    sign: int
    exponent: int = 0

    @property
    def is_zero(self) -> bool:
        return self.sign == 0

    @property
    def value(self) -> float:
        return 0.0 if self.sign == 0 else self.sign * math.ldexp(1.0, self.exponent)

    def __repr__(self):
        return "Zero" if self.is_zero else f"NonZero({self.sign:+d}, {self.exponent})"


ZERO = Po2Weight(0, 0)


@dataclass(frozen=True)
class QuantConfig:
    act_format: FixedPointFormat = Q3_5
    weight_bits: int = 8
    p_min: int = -8
    p_max: int = 7
    zero_threshold: Optional[float] = None

    def __post_init__(self):
        if self.p_min >= self.p_max:
            raise ValueError(f"exponent range [{self.p_min}, {self.p_max}] is empty")
        if self.zero_threshold is None:
            object.__setattr__(self, "zero_threshold", math.ldexp(1.0, self.p_min - 1))

    @classmethod
    def from_mapping(cls, d) -> "QuantConfig":
        kw = {}
        if "act_format" in d:
            kw["act_format"] = FixedPointFormat.parse(str(d["act_format"]))
        elif "int_bits" in d or "frac_bits" in d:
            kw["act_format"] = FixedPointFormat(int(d.get("int_bits", 3)), int(d.get("frac_bits", 5)))
        for key in ("weight_bits", "p_min", "p_max"):
            if key in d:
                kw[key] = int(d[key])
        if d.get("zero_threshold") is not None:
            kw["zero_threshold"] = float(d["zero_threshold"])
        if "act_format" in kw and "weight_bits" not in kw:
            kw["weight_bits"] = kw["act_format"].width
        return cls(**kw)

    def as_dict(self):
        return {
            "act_format": str(self.act_format),
            "weight_bits": self.weight_bits,
            "p_min": self.p_min,
            "p_max": self.p_max,
            "zero_threshold": self.zero_threshold,
        }


# -- scalar / elementwise quantizers ----------------------------------------


def quantize_po2_array(w, cfg: QuantConfig):
    """Nearest power of two in linear distance, ties to the larger magnitude.

    Returns ``(sign, exponent)`` int8 arrays; sign 0 marks Zero.
    """
    w = np.asarray(w, dtype=np.float64)
    mag = np.abs(w)
    # |w| = m * 2**e with m in [0.5, 1); the interval midpoint 1.5 * 2**(e-1) is m = 0.75
    m, e = np.frexp(mag)
    p = np.where(m >= 0.75, e, e - 1)
    p = np.clip(p, cfg.p_min, cfg.p_max)
    zero = ~(mag >= cfg.zero_threshold)
    sign = np.where(zero, 0, np.sign(w)).astype(np.int8)
    exponent = np.where(zero, 0, p).astype(np.int8)
    return sign, exponent


def quantize_po2(w: float, cfg: QuantConfig = QuantConfig()) -> Po2Weight:
    sign, exponent = quantize_po2_array(w, cfg)
    s = int(sign)
    return ZERO if s == 0 else Po2Weight(s, int(exponent))


def po2_values(sign, exponent) -> np.ndarray:
    return np.asarray(sign, dtype=np.float64) * np.ldexp(1.0, np.asarray(exponent, dtype=np.int64))


def quantize_fixed(x, fmt: FixedPointFormat):
    """Round half-to-even at ``2**-n`` then saturate. Scalars give ints."""
    codes = np.rint(np.asarray(x, dtype=np.float64) * (1 << fmt.frac_bits))
    codes = np.clip(codes, fmt.min_code, fmt.max_code).astype(np.int64)
    return int(codes) if codes.ndim == 0 else codes


def accumulator_format(fmt: FixedPointFormat, fan_in: int) -> FixedPointFormat:
    """Activation format widened by the depth of a ``fan_in``-leaf adder tree."""
    depth = math.ceil(math.log2(fan_in)) if fan_in > 1 else 0
    return fmt.widen(depth)


# -- batch norm -------------------------------------------------------------


def bn_scale_offset(bn, conv_bias=None):
    """Real per-channel ``(scale, offset)`` of ``gamma*(x - mean)/sqrt(var+eps) + beta``."""
    std = np.sqrt(np.asarray(bn.var, dtype=np.float64) + bn.eps)
    if np.any(std <= 0):
        raise ValueError("batch-norm variance + eps must be positive")
    scale = np.asarray(bn.gamma, dtype=np.float64) / std
    mean = np.asarray(bn.mean, dtype=np.float64)
    if conv_bias is not None:
        mean = mean - conv_bias
    offset = np.asarray(bn.beta, dtype=np.float64) - scale * mean
    return scale, offset


def quantize_batchnorm(bn, cfg: QuantConfig = QuantConfig(), acc_format=None, conv_bias=None):
    """Po2 scale codes and fixed-point offset codes for one batch-norm.

    Returns ``(scale_sign, scale_exponent, offset_codes)``. Offsets use
    ``acc_format`` (defaults to the activation format).
    """
    scale, offset = bn_scale_offset(bn, conv_bias)
    sign, exponent = quantize_po2_array(scale, cfg)
    codes = quantize_fixed(offset, acc_format or cfg.act_format)
    return sign, exponent, np.atleast_1d(codes)


def fold_batchnorm(conv: QuantConv, scale_sign, scale_exponent, offset_codes, cfg: QuantConfig, acc_format=None) -> QuantConv:
    """Absorb a Po2 per-channel scale into the weight codes and attach the bias.

    Exponents add; anything leaving ``[p_min, p_max]`` is clamped and counted.
    """
    m = conv.spec.out_channels
    scale_sign = np.asarray(scale_sign).reshape(m, 1, 1, 1)
    scale_exp = np.asarray(scale_exponent, dtype=np.int64).reshape(m, 1, 1, 1)
    if len(offset_codes) != m:
        raise ValueError(f"bias length {len(offset_codes)} != {m} output channels")

    sign = (conv.sign.astype(np.int64) * scale_sign).astype(np.int8)
    raw = conv.exponent.astype(np.int64) + scale_exp
    exponent = np.clip(raw, cfg.p_min, cfg.p_max)
    live = sign != 0
    clamps = int(np.count_nonzero(live & (raw != exponent)))
    exponent = np.where(live, exponent, 0).astype(np.int8)
    return replace(
        conv,
        sign=_frozen(sign),
        exponent=_frozen(exponent),
        bias=_frozen(np.asarray(offset_codes, dtype=np.int64)),
        acc_format=acc_format or conv.acc_format,
        folded=True,
        clamp_events=conv.clamp_events + clamps,
    )


# -- pruning ----------------------------------------------------------------


def _prune_count(n: int, s_frac: float) -> int:
    return int(math.floor(s_frac * n + 0.5))


def _smallest_mask(mag: np.ndarray, n_prune: int) -> np.ndarray:
    flat = mag.reshape(-1)
    keep = np.ones(flat.shape, dtype=bool)
    if n_prune > 0:
        # stable sort: equal magnitudes are pruned lowest flat index first
        order = np.argsort(flat, kind="stable")
        keep[order[:n_prune]] = False
    return keep.reshape(mag.shape)


def _check_frac(s_frac):
    if not 0.0 <= s_frac < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {s_frac}")


def magnitude_prune(weights, s_frac: float, scope: str = "per_layer") -> np.ndarray:
    """Keep-mask that drops the ``s_frac`` smallest-magnitude weights.

    ``scope`` is ``per_layer`` (whole tensor) or ``per_channel`` (each slice
    along axis 0, i.e. each output channel, separately).
    """
    _check_frac(s_frac)
    mag = np.abs(np.asarray(weights, dtype=np.float64))
    if scope == "per_layer":
        return _smallest_mask(mag, _prune_count(mag.size, s_frac))
    if scope == "per_channel":
        rows = [_smallest_mask(ch, _prune_count(ch.size, s_frac)) for ch in mag]
        return np.stack(rows) if rows else np.ones(mag.shape, dtype=bool)
    raise ValueError(f"unknown pruning scope {scope!r}")


def default_skip(index: int, layer, first_conv: int) -> bool:
    """Depthwise convolutions and the first convolution are never pruned."""
    return index == first_conv or layer.spec.is_depthwise


def _magnitudes(layer):
    if isinstance(layer, QuantConv):
        return np.abs(layer.values()) * (layer.sign != 0)
    return np.abs(np.asarray(layer.weights, dtype=np.float64))


def prune_masks(ir: ModelIR, s_frac: float, scope: str = "per_channel", skip: Optional[Callable] = default_skip) -> dict:
    """Keep-masks for every conv layer, keyed by layer index.

    ``global`` ranks all prunable weights of the model together.
    """
    _check_frac(s_frac)
    convs = ir.conv_indices()
    first = convs[0] if convs else -1
    masks, prunable = {}, []
    for i in convs:
        layer = ir.layers[i]
        if skip is not None and skip(i, layer, first):
            masks[i] = np.ones(layer.spec.weight_shape, dtype=bool)
        else:
            prunable.append(i)
    if scope == "global":
        mags = [_magnitudes(ir.layers[i]) for i in prunable]
        if mags:
            flat = np.concatenate([m.reshape(-1) for m in mags])
            keep = _smallest_mask(flat, _prune_count(flat.size, s_frac))
            start = 0
            for i, m in zip(prunable, mags):
                masks[i] = keep[start:start + m.size].reshape(m.shape)
                start += m.size
    else:
        for i in prunable:
            masks[i] = magnitude_prune(_magnitudes(ir.layers[i]), s_frac, scope)
    return masks


def apply_masks(ir: ModelIR, masks: dict) -> ModelIR:
    layers = list(ir.layers)
    for i, keep in masks.items():
        layer = layers[i]
        if isinstance(layer, Conv):
            layers[i] = replace(layer, weights=_frozen(np.where(keep, layer.weights, 0.0)))
        else:
            layers[i] = replace(
                layer,
                sign=_frozen(np.where(keep, layer.sign, 0).astype(np.int8)),
                exponent=_frozen(np.where(keep, layer.exponent, 0).astype(np.int8)),
            )
    return ir.with_layers(layers)


def prune_model(ir: ModelIR, s_frac: float, scope: str = "per_channel", skip=default_skip):
    masks = prune_masks(ir, s_frac, scope, skip)
    return apply_masks(ir, masks), masks


def prunable_fraction(ir: ModelIR, masks: dict, skip=default_skip) -> float:
    convs = ir.conv_indices()
    first = convs[0] if convs else -1
    total = pruned = 0
    for i in convs:
        if skip is not None and skip(i, ir.layers[i], first):
            continue
        total += masks[i].size
        pruned += int(np.count_nonzero(~masks[i]))
    return pruned / total if total else 0.0


# -- 2:4 structured compression ---------------------------------------------


def compress_2to4(matrix):
    """Pack a 2:4-sparse matrix into half-width values plus 2-bit indices.

    Groups with fewer than two nonzeros are padded with their lowest zero
    positions, so an all-zero group encodes as indices ``[0, 1]``.
    """
    a = np.asarray(matrix)
    if a.ndim != 2 or a.shape[1] % 4:
        raise CompressionError(f"row length must be a multiple of 4, got shape {a.shape}")
    rows, cols = a.shape
    groups = a.reshape(rows, cols // 4, 4)
    nz = groups != 0
    counts = nz.sum(axis=-1)
    if np.any(counts > 2):
        r, g = np.argwhere(counts > 2)[0]
        raise CompressionError(f"group {g} of row {r} has {counts[r, g]} nonzeros (max 2)")
    # nonzero positions first, then zero positions, each ascending; take two and re-sort
    key = np.where(nz, 0, 4) + np.arange(4)
    pick = np.sort(np.argsort(key, axis=-1, kind="stable")[..., :2], axis=-1)
    values = np.take_along_axis(groups, pick, axis=-1).reshape(rows, cols // 2)
    return values, pick.astype(np.uint8).reshape(rows, cols // 2)


def decompress_2to4(values, indices):
    values = np.asarray(values)
    indices = np.asarray(indices, dtype=np.int64)
    rows, half = values.shape
    out = np.zeros((rows, half // 2, 4), dtype=values.dtype)
    np.put_along_axis(out, indices.reshape(rows, half // 2, 2), values.reshape(rows, half // 2, 2), axis=-1)
    return out.reshape(rows, half * 2)


def prune_2to4(matrix):
    """Zero the two smallest-magnitude entries of every group of four."""
    a = np.asarray(matrix, dtype=np.float64)
    rows, cols = a.shape
    g = a.reshape(rows, cols // 4, 4)
    order = np.argsort(np.abs(g), axis=-1, kind="stable")
    out = g.copy()
    np.put_along_axis(out, order[..., :2], 0.0, axis=-1)
    return out.reshape(rows, cols)


# -- model-level passes -----------------------------------------------------


def quantize_model(ir: ModelIR, cfg: QuantConfig = QuantConfig()) -> ModelIR:
    """Replace each real conv by Po2 codes; batch norms stay for ``fold_model``."""
    if ir.quantized:
        raise ModelError("model is already quantized")
    layers, real_bias = [], {}
    for i, layer in enumerate(ir.layers):
        if isinstance(layer, Conv):
            sign, exponent = quantize_po2_array(layer.weights, cfg)
            acc = accumulator_format(cfg.act_format, layer.spec.fan_in)
            layers.append(QuantConv(layer.spec, _frozen(sign), _frozen(exponent), acc_format=acc))
            if layer.bias is not None:
                real_bias[i] = np.asarray(layer.bias, dtype=np.float64)
        else:
            layers.append(layer)
    q = ir.with_layers(layers, act_format=cfg.act_format)
    q.meta.update(real_bias=real_bias, quant_config=cfg)
    return q


def fold_model(qir: ModelIR, cfg: Optional[QuantConfig] = None) -> ModelIR:
    """Fold every conv's trailing batch norm into Po2 codes plus a bias.

    Convs without a batch norm get their own bias (or zero). Batch-norm
    layers disappear and residual source ids are renumbered.
    """
    if not qir.quantized:
        raise ModelError("fold_model needs a quantized model (run quantize_model first)")
    cfg = cfg or qir.meta.get("quant_config") or QuantConfig(act_format=qir.act_format)
    real_bias = qir.meta.get("real_bias", {})
    layers = qir.layers
    out, remap = [], {}
    total_clamps = 0
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, BatchNorm):
            raise ModelError(f"layer {i}: batch-norm does not follow a convolution and cannot be folded")
        if isinstance(layer, QuantConv) and not layer.folded:
            acc = layer.acc_format or accumulator_format(qir.act_format, layer.spec.fan_in)
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            bias = real_bias.get(i)
            if isinstance(nxt, BatchNorm):
                s_sign, s_exp, codes = quantize_batchnorm(nxt.bn, cfg, acc, conv_bias=bias)
                folded = fold_batchnorm(layer, s_sign, s_exp, codes, cfg, acc)
                remap[i] = remap[i + 1] = len(out)
                i += 2
            else:
                m = layer.spec.out_channels
                codes = quantize_fixed(bias, acc) if bias is not None else np.zeros(m, dtype=np.int64)
                folded = fold_batchnorm(layer, np.ones(m, np.int8), np.zeros(m, np.int64), np.atleast_1d(codes), cfg, acc)
                remap[i] = len(out)
                i += 1
            total_clamps += folded.clamp_events
            out.append(folded)
            continue
        remap[i] = len(out)
        out.append(layer)
        i += 1
    out = [EltwiseAdd(remap[l.source] if l.source >= 0 else -1) if isinstance(l, EltwiseAdd) else l for l in out]
    folded_ir = qir.with_layers(out)
    folded_ir.meta.update(quant_config=cfg, clamp_events=total_clamps)
    return folded_ir


def dequantize_model(fir: ModelIR) -> ModelIR:
    """Real-valued model carrying exactly the folded Po2 weights and biases."""
    layers = []
    for i, layer in enumerate(fir.layers):
        if isinstance(layer, QuantConv):
            if not layer.folded:
                raise ModelError(f"layer {i}: dequantize_model needs folded convolutions")
            acc = layer.acc_format or fir.act_format
            layers.append(Conv(layer.spec, _frozen(layer.values()), _frozen(acc.to_real(layer.bias))))
        else:
            layers.append(layer)
    return fir.with_layers(layers, act_format=None)


def quantization_summary(ir: ModelIR) -> dict:
    rows = []
    for i, layer in enumerate(ir.layers):
        if isinstance(layer, QuantConv):
            nz = int(np.count_nonzero(layer.sign))
            rows.append({
                "layer": i,
                "weights": int(layer.sign.size),
                "nonzero": nz,
                "exp_min": int(layer.exponent[layer.sign != 0].min()) if nz else None,
                "exp_max": int(layer.exponent[layer.sign != 0].max()) if nz else None,
                "folded": layer.folded,
                "clamp_events": layer.clamp_events,
                "acc_format": str(layer.acc_format) if layer.acc_format else None,
            })
    return {"layers": rows, "clamp_events": sum(r["clamp_events"] for r in rows)}
