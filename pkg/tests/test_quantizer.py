import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hardwire.model_ir import BatchNormSpec, ConvSpec, QuantConv
from hardwire.quantizer import (
    Q3_5, ZERO, CompressionError, FixedPointFormat, Po2Weight, QuantConfig, accumulator_format, compress_2to4,
    decompress_2to4, fold_batchnorm, magnitude_prune, po2_values, prunable_fraction, prune_2to4, prune_masks,
    quantize_batchnorm, quantize_fixed, quantize_po2, quantize_po2_array,
)

CFG = QuantConfig()


def po2_oracle(w, p_min=-8, p_max=7, thresh=2.0 ** -9):
    """Brute force: scan every candidate exponent, pick the closest, ties to the larger."""
    if abs(w) < thresh:
        return ZERO
    best = None
    for p in range(p_min, p_max + 1):
        d = abs(abs(w) - 2.0 ** p)
        if best is None or d < best[0] or (d == best[0] and p > best[1]):
            best = (d, p)
    return Po2Weight(1 if w > 0 else -1, best[1])


def fixed_oracle(x, fmt):
    v = Fraction(x) * (1 << fmt.frac_bits)
    fl = math.floor(v)
    rem = v - fl
    code = fl + 1 if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and fl % 2) else fl
    return max(fmt.min_code, min(fmt.max_code, code))


# -- formats ------------------------------------------------------------------

def test_q35_layout():
    assert Q3_5.width == 8
    assert (Q3_5.min_code, Q3_5.max_code) == (-128, 127)
    assert Q3_5.max_value == 3.96875 and Q3_5.min_value == -4.0
    assert FixedPointFormat.parse("Q3.5") == Q3_5


@pytest.mark.parametrize("m,n", [(0, 4), (3, -1), (20, 20)])
def test_bad_formats(m, n):
    with pytest.raises(ValueError):
        FixedPointFormat(m, n)


def test_accumulator_format_widens_by_depth():
    assert accumulator_format(Q3_5, 16).width == 12
    assert accumulator_format(Q3_5, 27).width == 13
    assert accumulator_format(Q3_5, 1) == Q3_5


# -- Po2 ----------------------------------------------------------------------

def test_po2_examples():
    assert quantize_po2(0.3) == Po2Weight(1, -2)
    assert quantize_po2(0.75) == Po2Weight(1, 0)
    assert quantize_po2(-2.0 ** -12) == ZERO
    assert quantize_po2(-0.3) == Po2Weight(-1, -2)


def test_po2_clamps_range():
    assert quantize_po2(1000.0) == Po2Weight(1, 7)
    assert quantize_po2(2.0 ** -8.9) == Po2Weight(1, -8)


@given(st.floats(-20, 20, allow_nan=False))
def test_po2_matches_bruteforce(w):
    assert quantize_po2(w) == po2_oracle(w)


def test_po2_relative_error_grid():
    grid = np.geomspace(2.0 ** -8, 2.0 ** 7, 200001)
    grid = np.concatenate([grid, -grid, 1.5 * 2.0 ** np.arange(-8, 7)])
    s, e = quantize_po2_array(grid, CFG)
    rel = np.abs(grid - po2_values(s, e)) / np.abs(grid)
    assert rel.max() <= 1 / 3 + 1e-12
    # worst case sits at the interval midpoint 1.5 * 2^p
    assert rel.max() == pytest.approx(1 / 3)


def test_po2_vector_matches_scalar(rng):
    w = rng.normal(0, 0.5, 500)
    s, e = quantize_po2_array(w, CFG)
    for wi, si, ei in zip(w, s, e):
        q = quantize_po2(wi)
        assert (q.sign, q.exponent if q.sign else 0) == (si, ei)


# -- fixed point ----------------------------------------------------------------

def test_fixed_examples():
    assert quantize_fixed(1.5, Q3_5) == 48
    assert quantize_fixed(100.0, Q3_5) == 127
    assert quantize_fixed(2.0 ** -6, Q3_5) == 0
    assert quantize_fixed(3 * 2.0 ** -6, Q3_5) == 2  # 1.5 -> even
    assert quantize_fixed(-100.0, Q3_5) == -128


@given(st.floats(-10, 10, allow_nan=False), st.integers(1, 6), st.integers(0, 8))
def test_fixed_matches_fraction_oracle(x, m, n):
    fmt = FixedPointFormat(m, n)
    assert quantize_fixed(x, fmt) == fixed_oracle(x, fmt)


@given(st.integers(-128, 127))
def test_fixed_idempotent(code):
    assert quantize_fixed(Q3_5.to_real(code), Q3_5) == code


# -- batch norm -------------------------------------------------------------

def bn(gamma, beta, mean, var, eps=1e-5):
    a = lambda v: np.atleast_1d(np.asarray(v, dtype=float))
    return BatchNormSpec(a(gamma), a(beta), a(mean), a(var), eps)


def test_identity_batchnorm():
    s, e, b = quantize_batchnorm(bn(1.0, 0.0, 0.0, 1 - 1e-5))
    assert (s[0], e[0], b[0]) == (1, 0, 0)


def test_negative_gamma_batchnorm():
    s, e, b = quantize_batchnorm(bn(-2.0, 1.0, 0.0, 1 - 1e-5))
    assert (s[0], e[0]) == (-1, 1)
    assert Q3_5.to_real(b[0]) == 1.0


def test_batchnorm_scale_error_bound(rng):
    g = rng.uniform(-3, 3, 200)
    v = rng.uniform(0.01, 4, 200)
    s, e, _ = quantize_batchnorm(bn(g, np.zeros(200), np.zeros(200), v))
    true = g / np.sqrt(v + 1e-5)
    ok = np.abs(true) >= 2.0 ** -8
    rel = np.abs(po2_values(s, e) - true)[ok] / np.abs(true[ok])
    assert rel.max() <= 1 / 3 + 1e-12


def random_qconv(rng, m=4, c=3, k=3):
    spec = ConvSpec(k, k, c, m, padding=1)
    s, e = quantize_po2_array(rng.normal(0, 0.3, spec.weight_shape), CFG)
    return QuantConv(spec, s, e)


def test_fold_identity(rng):
    q = random_qconv(rng)
    f = fold_batchnorm(q, np.ones(4, np.int8), np.zeros(4), np.zeros(4, np.int64), CFG)
    assert np.array_equal(f.sign, q.sign) and np.array_equal(f.exponent, q.exponent)
    assert not f.bias.any() and f.clamp_events == 0


def test_fold_decrements_exponents(rng):
    q = random_qconv(rng)
    q = QuantConv(q.spec, q.sign, np.where(q.sign != 0, np.clip(q.exponent, -7, 7), 0).astype(np.int8))
    f = fold_batchnorm(q, np.ones(4, np.int8), -np.ones(4), np.zeros(4, np.int64), CFG)
    nz = q.sign != 0
    assert np.array_equal(f.exponent[nz], q.exponent[nz] - 1)
    assert np.array_equal(f.sign == 0, q.sign == 0)


def test_fold_value_product_exact(rng):
    for _ in range(20):
        q = random_qconv(rng)
        ss = rng.choice([-1, 1], 4).astype(np.int8)
        se = rng.integers(-2, 3, 4)
        f = fold_batchnorm(q, ss, se, np.zeros(4, np.int64), CFG)
        expect = q.values() * po2_values(ss, se).reshape(4, 1, 1, 1)
        raw = q.exponent.astype(int) + se.reshape(4, 1, 1, 1)
        clean = (q.sign == 0) | ((raw >= CFG.p_min) & (raw <= CFG.p_max))
        assert np.array_equal(f.values()[clean], expect[clean])
        assert f.clamp_events == int(np.count_nonzero(~clean))


def test_fold_counts_clamps():
    spec = ConvSpec(1, 1, 2, 1)
    q = QuantConv(spec, np.ones((1, 1, 1, 2), np.int8), np.array([[[[7, 0]]]], np.int8))
    f = fold_batchnorm(q, np.ones(1, np.int8), np.array([2]), np.zeros(1, np.int64), CFG)
    assert f.exponent.ravel().tolist() == [7, 2]
    assert f.clamp_events == 1


# -- pruning ----------------------------------------------------------------

def test_prune_example():
    keep = magnitude_prune(np.array([1, -0.1, 0.5, 0.01]), 0.5)
    assert keep.tolist() == [True, False, True, False]


def test_prune_zero_fraction():
    assert magnitude_prune(np.arange(10.0), 0.0).all()


def test_prune_ties_lowest_index():
    keep = magnitude_prune(np.array([0.5, 0.5, 0.5, 0.5]), 0.5)
    assert keep.tolist() == [False, False, True, True]


def test_prune_rejects_one():
    with pytest.raises(ValueError):
        magnitude_prune(np.ones(4), 1.0)


@given(st.integers(1, 200), st.floats(0, 0.99))
def test_prune_fraction_within_one_element(n, frac):
    w = np.random.default_rng(n).normal(size=n)
    keep = magnitude_prune(w, frac)
    assert abs((~keep).sum() - frac * n) <= 1


def test_prune_fold_commutation_50_layers(rng):
    for _ in range(50):
        m = int(rng.integers(1, 9))
        w = rng.normal(0, 1, (m, 3, 3, int(rng.integers(1, 9))))
        s = rng.uniform(0.1, 3, m) * rng.choice([-1, 1], m)
        frac = float(rng.uniform(0, 0.95))
        a = magnitude_prune(w, frac, "per_channel")
        b = magnitude_prune(w * s.reshape(m, 1, 1, 1), frac, "per_channel")
        assert np.array_equal(a, b)
        # Po2 form: scale exponents shift whole channels, order kept unless clamped
        sg, ex = quantize_po2_array(w, CFG)
        ex = np.clip(ex, -6, 5)
        shift = rng.integers(-2, 3, m).reshape(m, 1, 1, 1)
        mag = np.where(sg != 0, np.ldexp(1.0, ex.astype(int)), 0)
        mag_f = np.where(sg != 0, np.ldexp(1.0, ex.astype(int) + shift), 0)
        assert np.array_equal(magnitude_prune(mag, frac, "per_channel"), magnitude_prune(mag_f, frac, "per_channel"))


def test_mobilenet_prune_fraction(mbv2):
    masks = prune_masks(mbv2, 0.6, "per_layer")
    convs = mbv2.conv_indices()
    first = convs[0]
    total = pruned = n_layers = 0
    for i in convs:
        layer = mbv2.layers[i]
        if i == first or layer.spec.is_depthwise:
            assert masks[i].all()
            continue
        total += masks[i].size
        pruned += int((~masks[i]).sum())
        n_layers += 1
    assert abs(pruned - 0.6 * total) <= n_layers
    assert prunable_fraction(mbv2, masks) == pytest.approx(0.6, abs=1e-4)


def test_global_scope_hits_fraction(mbv2):
    masks = prune_masks(mbv2, 0.4, "global")
    assert prunable_fraction(mbv2, masks) == pytest.approx(0.4, abs=1e-6)


# -- 2:4 ----------------------------------------------------------------------

def test_2to4_examples():
    v, i = compress_2to4(np.array([[3.0, 0, 5.0, 0]]))
    assert v.tolist() == [[3.0, 5.0]] and i.tolist() == [[0, 2]]
    v, i = compress_2to4(np.zeros((1, 4)))
    assert v.tolist() == [[0, 0]] and i.tolist() == [[0, 1]]
    v, i = compress_2to4(np.array([[0, 0, 0, 7.0]]))
    assert i.tolist() == [[0, 3]] and v.tolist() == [[0, 7.0]]


def test_2to4_rejects_dense_group():
    with pytest.raises(CompressionError):
        compress_2to4(np.array([[1.0, 2.0, 3.0, 0.0]]))
    with pytest.raises(CompressionError):
        compress_2to4(np.ones((2, 6)))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10 ** 6))
def test_2to4_roundtrip(rows, groups, seed):
    r = np.random.default_rng(seed)
    m = prune_2to4(r.normal(size=(rows, groups * 4)) * (r.random((rows, groups * 4)) < 0.8))
    v, i = compress_2to4(m)
    assert v.shape == (rows, groups * 2)
    assert i.max(initial=0) <= 3
    assert np.array_equal(decompress_2to4(v, i), m)
