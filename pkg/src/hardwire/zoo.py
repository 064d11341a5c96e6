"""Bundled MobileNetV2 layer table and seeded desk-scale random models."""

from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np

from .model_ir import (
    BatchNorm,
    BatchNormSpec,
    Conv,
    ConvSpec,
    EltwiseAdd,
    GlobalSumPool,
    Linear,
    ModelIR,
    ReLU,
    TensorShape,
    _frozen,
    from_manifest,
    infer_shapes,
    input_shapes,
    toeplitz_dims,
)

# (expansion t, output channels c, repeats n, first stride s)
MOBILENETV2_BLOCKS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def mobilenetv2_manifest(seed: int = 0, num_classes: int = 1000, resolution: int = 224) -> dict:
    """Manifest with shapes only; weights are drawn from ``seed`` at load."""
    layers = []

    def add(kind, **kw):
        layers.append({"id": len(layers), "type": kind, **kw})
        return len(layers) - 1

    def conv(cin, cout, k=1, stride=1, groups=1, relu=True):
        add("conv", kernel=[k, k], in_channels=cin, out_channels=cout, stride=stride, padding=k // 2, groups=groups)
        last = add("batchnorm", eps=1e-5)
        if relu:
            last = add("relu")
        return last

    cin = 32
    last = conv(3, cin, k=3, stride=2)
    for t, c, n, s in MOBILENETV2_BLOCKS:
        for i in range(n):
            stride = s if i == 0 else 1
            block_in = last
            hidden = cin * t
            if t != 1:
                conv(cin, hidden)
            conv(hidden, hidden, k=3, stride=stride, groups=hidden)
            last = conv(hidden, c, relu=False)
            if stride == 1 and cin == c:
                last = add("eltwise_add", source=block_in)
            cin = c
    conv(cin, 1280)
    add("global_avg_pool")
    add("linear", out_features=num_classes, in_features=1280)
    return {
        "format_version": 1,
        "name": "mobilenetv2",
        "input": {"height": resolution, "width": resolution, "channels": 3},
        "quantized": False,
        "activation_format": None,
        "classifier": len(layers) - 1,
        "synthetic_weights": {"seed": seed},
        "layers": layers,
    }


def mobilenetv2(seed: int = 0) -> ModelIR:
    """The bundled MobileNetV2 IR (224x224x3 input, 1000x1280 classifier)."""
    path = resources.files("hardwire").joinpath("data/mobilenetv2.model")
    manifest = json.loads(path.read_text())
    manifest["synthetic_weights"] = {"seed": seed}
    return from_manifest(manifest, None)


def conv_gemm_dims(ir: ModelIR, include_depthwise: bool = True):
    """``(layer index, M, K, N)`` for every conv, via its Toeplitz form."""
    rows = []
    for i, (layer, inp) in enumerate(zip(ir.layers, input_shapes(ir))):
        if hasattr(layer, "spec"):
            if layer.spec.is_depthwise and not include_depthwise:
                continue
            m, rsc, pq = toeplitz_dims(layer.spec, inp)
            rows.append((i, m, rsc, pq))
    return rows


def conv_label(spec) -> str:
    if spec.is_depthwise:
        return f"{spec.kernel_h}x{spec.kernel_w} (dw) x{spec.out_channels}"
    return f"{spec.kernel_h}x{spec.kernel_w}x{spec.in_channels}->{spec.out_channels}"


# -- desk-scale random models ---------------------------------------------


def _bn(rng, n):
    return BatchNorm(BatchNormSpec(
        gamma=_frozen(rng.uniform(0.5, 1.5, n) * rng.choice([-1.0, 1.0], n, p=[0.1, 0.9])),
        beta=_frozen(rng.normal(0.0, 0.25, n)),
        mean=_frozen(rng.normal(0.0, 0.25, n)),
        var=_frozen(rng.uniform(0.25, 2.0, n)),
        eps=1e-5,
    ))


def _conv(rng, cin, cout, k, stride, pad, groups):
    spec = ConvSpec(k, k, cin, cout, stride, pad, groups)
    w = rng.normal(0.0, 1.0 / math.sqrt(spec.fan_in), size=spec.weight_shape)
    return Conv(spec, _frozen(w))


def random_model(seed: int, max_hw: int = 16, max_c: int = 8, max_convs: int = 4, num_classes: int = 4) -> ModelIR:
    """A small random CNN mixing conv, depthwise, BN, ReLU, residual and sum-pool.

    Inputs are at most ``max_hw x max_hw x max_c``; at most ``max_convs``
    convolutions. The model always ends in a linear classifier.
    """
    rng = np.random.default_rng(seed)
    h = int(rng.integers(3, max_hw + 1))
    w = int(rng.integers(3, max_hw + 1))
    c = int(rng.integers(1, max_c + 1))
    inp = TensorShape(h, w, c)
    layers = []
    shape = inp
    n_convs = int(rng.integers(1, max_convs + 1))
    for _ in range(n_convs):
        block_in = len(layers) - 1
        in_shape = shape
        kind = rng.choice(["pointwise", "full", "depthwise"], p=[0.35, 0.4, 0.25])
        if kind == "depthwise":
            k, groups, cout = 3, shape.channels, shape.channels
        elif kind == "pointwise":
            k, groups, cout = 1, 1, int(rng.integers(1, max_c + 1))
        else:
            k = int(rng.choice([1, 3]))
            groups, cout = 1, int(rng.integers(1, max_c + 1))
        pad = k // 2 if rng.random() < 0.8 else 0
        stride = 1
        if rng.random() < 0.3:
            for cand in (2,):
                if (shape.height + 2 * pad - k) % cand == 0 and (shape.width + 2 * pad - k) % cand == 0 \
                        and shape.height + 2 * pad - k >= 0 and shape.width + 2 * pad - k >= 0:
                    stride = cand
        if shape.height + 2 * pad < k or shape.width + 2 * pad < k:
            pad = k // 2
        conv = _conv(rng, shape.channels, cout, k, stride, pad, groups)
        layers.append(conv)
        shape = conv.spec.output_shape(shape)
        if rng.random() < 0.85:
            layers.append(_bn(rng, cout))
        relu = rng.random() < 0.7
        if relu:
            layers.append(ReLU())
        if shape == in_shape and rng.random() < 0.5:
            layers.append(EltwiseAdd(block_in))
            if rng.random() < 0.5:
                layers.append(ReLU())
    if rng.random() < 0.5:
        layers.append(GlobalSumPool())
        shape = TensorShape(1, 1, shape.channels)
    k_fe = shape.size
    layers.append(Linear(_frozen(rng.normal(0.0, 1.0 / math.sqrt(k_fe), size=(num_classes, k_fe)))))
    return ModelIR(inp, tuple(layers), name=f"random-{seed}")


def random_input_codes(shape: TensorShape, fmt, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(fmt.min_code, fmt.max_code + 1, size=shape.as_tuple(), dtype=np.int64)
