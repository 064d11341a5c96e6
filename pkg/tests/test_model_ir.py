import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hardwire.model_ir import (
    Conv, ConvSpec, EltwiseAdd, GlobalSumPool, Linear, ModelError, ModelIR, ReLU, ShapeError, TensorShape,
    from_manifest, infer_shapes, load_model, save_model, to_manifest, toeplitz_dims,
)
from hardwire.quantizer import fold_model, quantize_model
from hardwire.zoo import conv_gemm_dims, mobilenetv2_manifest, random_model


def single_conv_model(w=2.0):
    spec = ConvSpec(1, 1, 1, 1)
    return ModelIR(TensorShape(1, 1, 1), (Conv(spec, np.full((1, 1, 1, 1), w)), Linear(np.ones((1, 1)))))


def test_bundled_mobilenetv2_shapes(mbv2):
    assert mbv2.input_shape == TensorShape(224, 224, 3)
    assert mbv2.classifier.weights.shape == (1000, 1280)
    assert mbv2.k_fe == 1280
    shapes = infer_shapes(mbv2)
    assert shapes[0] == TensorShape(112, 112, 32)
    pool = [i for i, l in enumerate(mbv2.layers) if isinstance(l, GlobalSumPool)][0]
    assert shapes[pool - 1] == TensorShape(7, 7, 1280)
    assert shapes[pool] == TensorShape(1, 1, 1280)


def test_mobilenetv2_has_52_convs(mbv2):
    rows = conv_gemm_dims(mbv2)
    assert len(rows) == 52
    assert len(conv_gemm_dims(mbv2, include_depthwise=False)) == 35


def test_avg_pool_divisor_folded_into_classifier():
    spec = ConvSpec(1, 1, 2, 3)
    w = np.arange(6.0).reshape(spec.weight_shape)
    lin = np.arange(12.0).reshape(4, 3)
    ir = ModelIR(TensorShape(5, 4, 2), (Conv(spec, w), GlobalSumPool(), Linear(lin)))
    man, blob = to_manifest(ir, "x.weights")
    assert from_manifest(man, blob).classifier.weights.tolist() == lin.tolist()
    man["layers"][1]["type"] = "global_avg_pool"
    avg = from_manifest(man, blob)
    assert isinstance(avg.layers[1], GlobalSumPool)
    np.testing.assert_allclose(avg.classifier.weights, lin / 20.0)


def test_single_layer_identity_shape():
    ir = single_conv_model()
    assert infer_shapes(ir)[0] == TensorShape(1, 1, 1)


def test_linear_not_last_rejected():
    spec = ConvSpec(1, 1, 1, 1)
    with pytest.raises(ModelError, match="last"):
        ModelIR(TensorShape(1, 1, 1), (Linear(np.ones((1, 1))), Conv(spec, np.ones((1, 1, 1, 1)))))


def test_two_linears_rejected():
    with pytest.raises(ModelError):
        ModelIR(TensorShape(1, 1, 1), (Linear(np.ones((1, 1))), Linear(np.ones((1, 1)))))


def test_first_layer_stride2():
    spec = ConvSpec(3, 3, 3, 32, stride=2, padding=1)
    assert spec.output_shape(TensorShape(224, 224, 3)) == TensorShape(112, 112, 32)


def test_pool_and_pointwise_shapes():
    spec = ConvSpec(1, 1, 8, 4)
    assert spec.output_shape(TensorShape(9, 5, 8)) == TensorShape(9, 5, 4)


def test_toeplitz_examples():
    assert toeplitz_dims(ConvSpec(1, 1, 320, 1280), TensorShape(7, 7, 320)) == (1280, 320, 49)
    assert toeplitz_dims(ConvSpec(3, 3, 3, 32, 2, 1), TensorShape(224, 224, 3)) == (32, 27, 12544)
    assert toeplitz_dims(ConvSpec(1, 1, 1, 5), TensorShape(1, 1, 1)) == (5, 1, 1)


def test_toeplitz_consistency(mbv2):
    shapes = infer_shapes(mbv2)
    for i, m, k, n in conv_gemm_dims(mbv2):
        spec = mbv2.layers[i].spec
        assert m * k == int(np.prod(spec.weight_shape))
        assert n == shapes[i].height * shapes[i].width


def test_kernel_larger_than_input_is_error():
    with pytest.raises(ShapeError):
        ConvSpec(5, 5, 1, 1).output_shape(TensorShape(3, 3, 1))


def test_bad_groups_rejected():
    with pytest.raises(ModelError):
        ConvSpec(1, 1, 3, 4, groups=2)


def test_eltwise_shape_mismatch_named():
    spec = ConvSpec(1, 1, 2, 3)
    layers = (Conv(spec, np.ones(spec.weight_shape)), EltwiseAdd(-1), Linear(np.ones((1, 12))))
    with pytest.raises(ShapeError, match="layer 1"):
        ModelIR(TensorShape(2, 2, 2), layers)


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_roundtrip_byte_identical(tmp_path, seed):
    ir = random_model(seed)
    (tmp_path / "1").mkdir()
    (tmp_path / "2").mkdir()
    p1, p2 = tmp_path / "1" / "m.model", tmp_path / "2" / "m.model"
    save_model(ir, p1)
    save_model(load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "1" / "m.weights").read_bytes() == (tmp_path / "2" / "m.weights").read_bytes()


def test_roundtrip_quantized(tmp_path):
    ir = fold_model(quantize_model(random_model(4)))
    save_model(ir, tmp_path / "q.model")
    back = load_model(tmp_path / "q.model")
    assert back.quantized and back.act_format == ir.act_format
    for a, b in zip(ir.layers, back.layers):
        if a.kind == "qconv":
            assert np.array_equal(a.sign, b.sign) and np.array_equal(a.exponent, b.exponent)
            assert np.array_equal(a.bias, b.bias) and a.folded == b.folded
    man = json.loads((tmp_path / "q.model").read_text())
    assert man["quantized"] is True
    assert any("po2" in l for l in man["layers"])


def test_missing_blob_errors(tmp_path):
    save_model(random_model(2), tmp_path / "m.model")
    (tmp_path / "m.weights").unlink()
    with pytest.raises(ModelError, match="not found"):
        load_model(tmp_path / "m.model")


def test_bad_json(tmp_path):
    p = tmp_path / "x.model"
    p.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(p)


def test_wrong_version():
    man, blob = to_manifest(random_model(1), "x.weights")
    man["format_version"] = 99
    with pytest.raises(ModelError, match="format_version"):
        from_manifest(man, blob)


def test_shape_mismatch_names_layer():
    man, blob = to_manifest(random_model(1), "x.weights")
    man["layers"][0]["in_channels"] += 1
    with pytest.raises(ModelError, match="layer 0"):
        from_manifest(man, blob)


def test_weights_read_only():
    ir = random_model(0)
    with pytest.raises(ValueError):
        ir.layers[0].weights[...] = 0


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 5), st.integers(0, 2), st.integers(1, 3))
def test_shape_inference_formula(h, w, k, pad, stride):
    spec = ConvSpec(k, k, 2, 3, stride, pad)
    if h + 2 * pad < k or w + 2 * pad < k:
        with pytest.raises(ShapeError):
            spec.output_shape(TensorShape(h, w, 2))
        return
    out = spec.output_shape(TensorShape(h, w, 2))
    assert out.height == (h + 2 * pad - k) // stride + 1
    assert out.width == (w + 2 * pad - k) // stride + 1
