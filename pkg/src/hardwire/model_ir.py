"""Layer-graph IR for hardened CNN feature extractors.

A model is a flat, topologically ordered sequence of layers. Each layer
consumes the output of the layer before it; residual joins are explicit
``EltwiseAdd`` layers that name an earlier layer id as their second operand.
The last layer is always the ``Linear`` classifier that runs on the NPU.

On disk a model is a JSON manifest plus a little-endian sidecar blob::

    mobilenetv2.model      JSON text, ``format_version`` = 1
    mobilenetv2.weights    raw tensors referenced by (offset, length, dtype)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

FORMAT_VERSION = 1


class ModelError(ValueError):
    """Malformed model file or inconsistent layer graph."""


class ShapeError(ModelError):
    pass


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ShapeError(f"tensor dimensions must be >= 1, got {self}")

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels

    def as_tuple(self):
        return (self.height, self.width, self.channels)

    def __str__(self):
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass(frozen=True)
class ConvSpec:
    """Kernel ``R x S``, ``C`` input and ``M`` output channels.

    Depthwise convolution is ``groups == in_channels == out_channels``.
    """

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel must be >= 1x1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError(f"bad stride/padding/groups in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def channels_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def weight_shape(self):
        return (self.out_channels, self.kernel_h, self.kernel_w, self.channels_per_group)

    @property
    def fan_in(self) -> int:
        return self.kernel_h * self.kernel_w * self.channels_per_group

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    def output_shape(self, inp: TensorShape) -> TensorShape:
        if inp.channels != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {inp.channels}")
        dims = []
        for size, k in ((inp.height, self.kernel_h), (inp.width, self.kernel_w)):
            span = size + 2 * self.padding - k
            if span < 0:
                raise ShapeError(f"kernel {k} larger than padded input {size} + 2*{self.padding}")
            # floor division, as in the common frameworks; trailing rows a stride skips are unused
            dims.append(span // self.stride + 1)
        return TensorShape(dims[0], dims[1], self.out_channels)


@dataclass(frozen=True, eq=False)
class BatchNormSpec:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.mean) == len(self.var) == n):
            raise ShapeError("batch-norm parameter vectors differ in length")
        if np.any(np.asarray(self.var) < 0):
            raise ModelError("batch-norm variance must be non-negative")
        if not self.eps > 0:
            raise ModelError("batch-norm epsilon must be positive")

    @property
    def channels(self) -> int:
        return len(self.gamma)


# -- layer variants ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Conv:
    spec: ConvSpec
    weights: np.ndarray  # M x R x S x C/groups
    bias: Optional[np.ndarray] = None

    kind = "conv"

    def __post_init__(self):
        if tuple(self.weights.shape) != self.spec.weight_shape:
            raise ShapeError(f"conv weights {self.weights.shape} != {self.spec.weight_shape}")
        if self.bias is not None and len(self.bias) != self.spec.out_channels:
            raise ShapeError("conv bias length != out_channels")


@dataclass(frozen=True, eq=False)
class BatchNorm:
    bn: BatchNormSpec

    kind = "batchnorm"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class EltwiseAdd:
    source: int

    kind = "eltwise_add"


@dataclass(frozen=True)
class GlobalSumPool:
    kind = "global_sum_pool"


@dataclass(frozen=True, eq=False)
class Linear:
    weights: np.ndarray  # k x k_fe

    kind = "linear"

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class QuantConv:
    """Convolution with Po2 weight codes.

    ``sign`` is -1/0/+1 (0 marks a Zero code) and ``exponent`` is the shift.
    After folding, ``bias`` holds fixed-point codes in ``acc_format``.
    """

    spec: ConvSpec
    sign: np.ndarray
    exponent: np.ndarray
    bias: Optional[np.ndarray] = None
    acc_format: Optional[object] = None  # quantizer.FixedPointFormat
    folded: bool = False
    clamp_events: int = 0

    kind = "qconv"

    def __post_init__(self):
        if tuple(self.sign.shape) != self.spec.weight_shape or self.sign.shape != self.exponent.shape:
            raise ShapeError(f"po2 code shape {self.sign.shape} != {self.spec.weight_shape}")
        if self.bias is not None and len(self.bias) != self.spec.out_channels:
            raise ShapeError("bias length != out_channels")

    @property
    def nonzero(self) -> np.ndarray:
        return self.sign != 0

    def values(self) -> np.ndarray:
        return self.sign * np.ldexp(1.0, self.exponent.astype(np.int64))


LayerSpec = Union[Conv, BatchNorm, ReLU, EltwiseAdd, GlobalSumPool, Linear, QuantConv]
CONV_KINDS = (Conv, QuantConv)


@dataclass(frozen=True, eq=False)
class ModelIR:
    input_shape: TensorShape
    layers: tuple
    name: str = "model"
    act_format: Optional[object] = None  # set once quantized
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    @property
    def classifier(self) -> Linear:
        return self.layers[-1]

    @property
    def quantized(self) -> bool:
        return self.act_format is not None

    @property
    def k_fe(self) -> int:
        return self.classifier.in_features

    def feature_layers(self):
        return self.layers[:-1]

    def with_layers(self, layers, **kw) -> "ModelIR":
        kw.setdefault("meta", dict(self.meta))
        return replace(self, layers=tuple(layers), **kw)

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, CONV_KINDS)]


def _layer_output(layer, i, inp: TensorShape, shapes, net_input: TensorShape) -> TensorShape:
    if isinstance(layer, CONV_KINDS):
        return layer.spec.output_shape(inp)
    if isinstance(layer, BatchNorm):
        if layer.bn.channels != inp.channels:
            raise ShapeError(f"layer {i}: batch-norm has {layer.bn.channels} channels, input has {inp.channels}")
        return inp
    if isinstance(layer, ReLU):
        return inp
    if isinstance(layer, EltwiseAdd):
        if not -1 <= layer.source < i:
            raise ShapeError(f"layer {i}: eltwise source {layer.source} must be an earlier layer (or -1 for the input)")
        other = net_input if layer.source == -1 else shapes[layer.source]
        if other != inp:
            raise ShapeError(f"layer {i}: eltwise operands differ ({other} vs {inp})")
        return inp
    if isinstance(layer, GlobalSumPool):
        return TensorShape(1, 1, inp.channels)
    if isinstance(layer, Linear):
        if layer.in_features != inp.size:
            raise ShapeError(f"layer {i}: linear expects {layer.in_features} features, got {inp.size}")
        return TensorShape(1, 1, layer.out_features)
    raise ModelError(f"layer {i}: unknown layer type {type(layer).__name__}")


def infer_shapes(ir: ModelIR) -> list:
    """Output shape of every layer, in order."""
    shapes = []
    cur = ir.input_shape
    for i, layer in enumerate(ir.layers):
        try:
            cur = _layer_output(layer, i, cur, shapes, ir.input_shape)
        except ShapeError as e:
            msg = str(e)
            if not msg.startswith(f"layer {i}"):
                msg = f"layer {i} ({layer.kind}): {msg}"
            raise ShapeError(msg) from None
        shapes.append(cur)
    return shapes


def input_shapes(ir: ModelIR) -> list:
    out = infer_shapes(ir)
    return [ir.input_shape] + out[:-1]


def validate(ir: ModelIR):
    if not ir.layers:
        raise ModelError("model has no layers")
    linear = [i for i, l in enumerate(ir.layers) if isinstance(l, Linear)]
    if len(linear) != 1:
        raise ModelError(f"expected exactly one linear classifier, found {len(linear)}")
    if linear[0] != len(ir.layers) - 1:
        raise ModelError(f"linear classifier at layer {linear[0]} must be the last layer")
    infer_shapes(ir)


def toeplitz_dims(conv: ConvSpec, inp: TensorShape):
    """GEMM dimensions ``(M, RSC, PQ)`` of the flattened convolution."""
    out = conv.output_shape(inp)
    return conv.out_channels, conv.fan_in, out.height * out.width


# -- serialization ----------------------------------------------------------

_DTYPES = {"float32": "<f4", "int8": "<i1", "int32": "<i4"}


class _BlobWriter:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def put(self, arr, dtype):
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        raw = data.tobytes()
        ref = {"offset": self.offset, "length": len(raw), "dtype": dtype, "shape": list(data.shape)}
        self.chunks.append(raw)
        self.offset += len(raw)
        return ref


def _fmt_to_json(fmt):
    return None if fmt is None else {"int_bits": fmt.int_bits, "frac_bits": fmt.frac_bits}


def _fmt_from_json(d):
    from .quantizer import FixedPointFormat

    return None if d is None else FixedPointFormat(d["int_bits"], d["frac_bits"])


def _conv_json(spec: ConvSpec):
    return {
        "kernel": [spec.kernel_h, spec.kernel_w],
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "stride": spec.stride,
        "padding": spec.padding,
        "groups": spec.groups,
    }


def _layer_to_json(i, layer, blob: _BlobWriter):
    d = {"id": i, "type": layer.kind}
    if isinstance(layer, Conv):
        d.update(_conv_json(layer.spec))
        d["weights"] = blob.put(layer.weights, "float32")
        if layer.bias is not None:
            d["bias"] = blob.put(layer.bias, "float32")
    elif isinstance(layer, QuantConv):
        d.update(_conv_json(layer.spec))
        triples = np.stack([layer.sign, layer.exponent, (layer.sign == 0)], axis=-1)
        d["po2"] = blob.put(triples, "int8")
        d["folded"] = layer.folded
        d["clamp_events"] = int(layer.clamp_events)
        d["acc_format"] = _fmt_to_json(layer.acc_format)
        if layer.bias is not None:
            d["bias_codes"] = blob.put(layer.bias, "int32")
    elif isinstance(layer, BatchNorm):
        bn = layer.bn
        d["eps"] = float(bn.eps)
        for key in ("gamma", "beta", "mean", "var"):
            d[key] = blob.put(getattr(bn, key), "float32")
    elif isinstance(layer, EltwiseAdd):
        d["source"] = layer.source
    elif isinstance(layer, Linear):
        d["out_features"] = layer.out_features
        d["in_features"] = layer.in_features
        d["weights"] = blob.put(layer.weights, "float32")
    return d


def to_manifest(ir: ModelIR, blob_name: str):
    """Return ``(manifest dict, blob bytes)``."""
    blob = _BlobWriter()
    layers = [_layer_to_json(i, l, blob) for i, l in enumerate(ir.layers)]
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ir.name,
        "input": {"height": ir.input_shape.height, "width": ir.input_shape.width, "channels": ir.input_shape.channels},
        "quantized": ir.quantized,
        "activation_format": _fmt_to_json(ir.act_format),
        "classifier": ir.classifier_index,
        "blob": blob_name,
        "layers": layers,
    }
    return manifest, b"".join(blob.chunks)


def save_model(ir: ModelIR, path, provenance: Optional[dict] = None) -> None:
    """Write the manifest to ``path`` and the weights next to it (``.weights``).

    ``provenance`` (e.g. the producing command's config and seed) is stored
    verbatim; it defaults to whatever the model was loaded with.
    """
    path = os.fspath(path)
    stem = os.path.splitext(path)[0]
    blob_path = stem + ".weights"
    manifest, raw = to_manifest(ir, os.path.basename(blob_path))
    prov = provenance if provenance is not None else ir.meta.get("provenance")
    if prov is not None:
        manifest["provenance"] = prov
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(blob_path, "wb") as f:
        f.write(raw)


class _BlobReader:
    def __init__(self, raw: Optional[bytes], rng: Optional[np.random.Generator]):
        self.raw = raw
        self.rng = rng

    def get(self, ref, where, dtype=np.float64):
        if ref is None:
            raise ModelError(f"{where}: missing weight blob reference")
        if self.raw is None:
            raise ModelError(f"{where}: manifest references a weight blob but none was found")
        try:
            start, length = int(ref["offset"]), int(ref["length"])
            raw_dtype = np.dtype(_DTYPES[ref["dtype"]])
            shape = tuple(ref["shape"])
        except (KeyError, TypeError) as e:
            raise ModelError(f"{where}: bad blob reference {ref!r}") from e
        if start < 0 or start + length > len(self.raw):
            raise ModelError(f"{where}: blob range [{start}, {start + length}) outside blob of {len(self.raw)} bytes")
        count = int(np.prod(shape)) if shape else 1
        if count * raw_dtype.itemsize != length:
            raise ModelError(f"{where}: blob length {length} does not match shape {list(shape)}")
        arr = np.frombuffer(self.raw, dtype=raw_dtype, count=count, offset=start).reshape(shape)
        return arr.astype(dtype)


def _synth_conv(rng, spec):
    std = math.sqrt(2.0 / spec.fan_in)
    return rng.normal(0.0, std, size=spec.weight_shape)


def _synth_bn(rng, n):
    return BatchNormSpec(
        gamma=rng.uniform(0.5, 1.5, n),
        beta=rng.normal(0.0, 0.1, n),
        mean=rng.normal(0.0, 0.1, n),
        var=rng.uniform(0.5, 1.5, n),
    )


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def _layer_from_json(d, i, reader: _BlobReader, cur: TensorShape):
    kind = d.get("type")
    where = f"layer {i} ({kind})"
    synth = reader.rng
    if kind in ("conv", "qconv"):
        try:
            kh, kw = d["kernel"]
            spec = ConvSpec(kh, kw, d["in_channels"], d["out_channels"], d.get("stride", 1), d.get("padding", 0), d.get("groups", 1))
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"{where}: bad conv fields: {e}") from e
        if kind == "conv":
            if "weights" not in d and synth is not None:
                w = _synth_conv(synth, spec)
            else:
                w = reader.get(d.get("weights"), where)
            if tuple(w.shape) != spec.weight_shape:
                raise ShapeError(f"{where}: weight shape {list(w.shape)} != {list(spec.weight_shape)}")
            bias = reader.get(d["bias"], where) if "bias" in d else None
            return Conv(spec, _frozen(w), None if bias is None else _frozen(bias))
        triples = reader.get(d.get("po2"), where, dtype=np.int64)
        if tuple(triples.shape) != spec.weight_shape + (3,):
            raise ShapeError(f"{where}: po2 shape {list(triples.shape)} != {list(spec.weight_shape) + [3]}")
        sign = np.where(triples[..., 2] != 0, 0, triples[..., 0]).astype(np.int8)
        bias = reader.get(d["bias_codes"], where, dtype=np.int64) if "bias_codes" in d else None
        return QuantConv(
            spec,
            _frozen(sign),
            _frozen(triples[..., 1].astype(np.int8)),
            None if bias is None else _frozen(bias),
            _fmt_from_json(d.get("acc_format")),
            bool(d.get("folded", False)),
            int(d.get("clamp_events", 0)),
        )
    if kind == "batchnorm":
        if "gamma" not in d and synth is not None:
            return BatchNorm(_synth_bn(synth, cur.channels))
        vals = {k: _frozen(reader.get(d.get(k), where)) for k in ("gamma", "beta", "mean", "var")}
        return BatchNorm(BatchNormSpec(eps=float(d.get("eps", 1e-5)), **vals))
    if kind == "relu":
        return ReLU()
    if kind == "eltwise_add":
        if "source" not in d:
            raise ModelError(f"{where}: missing 'source'")
        return EltwiseAdd(int(d["source"]))
    if kind in ("global_sum_pool", "global_avg_pool"):
        return GlobalSumPool()
    if kind == "linear":
        if "weights" not in d and synth is not None:
            k, kfe = int(d["out_features"]), int(d["in_features"])
            w = synth.normal(0.0, 1.0 / math.sqrt(kfe), size=(k, kfe))
        else:
            w = reader.get(d.get("weights"), where)
        if w.ndim != 2:
            raise ShapeError(f"{where}: linear weights must be 2-D")
        return Linear(_frozen(w))
    raise ModelError(f"{where}: unknown layer type {kind!r}")


def from_manifest(manifest: dict, blob: Optional[bytes]) -> ModelIR:
    if not isinstance(manifest, dict):
        raise ModelError("model manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        inp = TensorShape(**manifest["input"])
        layer_defs = manifest["layers"]
    except (KeyError, TypeError) as e:
        raise ModelError(f"manifest missing input/layers: {e}") from e
    synth = manifest.get("synthetic_weights")
    rng = np.random.default_rng(int(synth["seed"])) if synth else None
    reader = _BlobReader(blob, rng)

    layers, shapes = [], []
    avg_pool_divisor = None
    cur = inp
    for i, d in enumerate(layer_defs):
        if d.get("id", i) != i:
            raise ModelError(f"layer ids must be sequential: position {i} has id {d.get('id')}")
        layer = _layer_from_json(d, i, reader, cur)
        if d.get("type") == "global_avg_pool":
            avg_pool_divisor = cur.height * cur.width
        try:
            cur = _layer_output(layer, i, cur, shapes, inp)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
        shapes.append(cur)
        layers.append(layer)

    if avg_pool_divisor is not None and layers and isinstance(layers[-1], Linear):
        # the hardened datapath has no divider; the full-precision classifier absorbs 1/(H*W)
        layers[-1] = Linear(_frozen(layers[-1].weights / avg_pool_divisor))

    fmt = _fmt_from_json(manifest.get("activation_format"))
    if manifest.get("quantized") and fmt is None:
        raise ModelError("quantized model without activation_format")
    meta = {"provenance": manifest["provenance"]} if "provenance" in manifest else {}
    ir = ModelIR(inp, tuple(layers), name=manifest.get("name", "model"), act_format=fmt, meta=meta)
    if "classifier" in manifest and manifest["classifier"] != ir.classifier_index:
        raise ModelError(f"classifier index {manifest['classifier']} does not point at the last layer")
    return ir


def load_model(path) -> ModelIR:
    path = os.fspath(path)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: not a valid model manifest: {e}") from e
    blob = None
    blob_name = manifest.get("blob") if isinstance(manifest, dict) else None
    if blob_name:
        blob_path = os.path.join(os.path.dirname(path), blob_name)
        if os.path.exists(blob_path):
            with open(blob_path, "rb") as f:
                blob = f.read()
        elif not manifest.get("synthetic_weights"):
            raise ModelError(f"{path}: weight blob {blob_name!r} not found")
    return from_manifest(manifest, blob)


def describe(ir: ModelIR) -> list:
    """Rows of (id, kind, output shape, detail) for inspection."""
    rows = []
    for i, (layer, shape) in enumerate(zip(ir.layers, infer_shapes(ir))):
        detail = ""
        if isinstance(layer, CONV_KINDS):
            s = layer.spec
            detail = f"{s.kernel_h}x{s.kernel_w} {s.in_channels}->{s.out_channels} s{s.stride} p{s.padding} g{s.groups}"
        elif isinstance(layer, EltwiseAdd):
            detail = f"+ layer {layer.source}"
        elif isinstance(layer, Linear):
            detail = f"{layer.out_features}x{layer.in_features}"
        rows.append((i, layer.kind, str(shape), detail))
    return rows
