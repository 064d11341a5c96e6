"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
written straight to the terminal even under output capture.
"""

import time

import numpy as np
import pytest

from hardwire.cost_models import (PER_ACCELERATOR, TABLE3_PRESET, PerfParams, adder_tree_bits, adder_tree_bits_closed,
                                  calibrate_alpha, model_area, perf_model, sweep, table4_rows)
from hardwire.hardener import ADD, REWIRE, _Builder, build_netlist, emit_hdl, reduce_tree
from hardwire.model_ir import BatchNorm, BatchNormSpec, Conv, ConvSpec, Linear, ModelIR, TensorShape
from hardwire.npu import NPU_1000x1, GemmDims, mobilenetv2_gemms, sparsity_24_study, systolic_cycles
from hardwire.quantizer import (Q3_5, QuantConfig, bn_scale_offset, fold_model, magnitude_prune, po2_values,
                                prune_model, quantize_model, quantize_po2_array)
from hardwire.simulator import compare_traces, oracle_forward, relu_gate, simulate
from hardwire.zoo import random_input_codes, random_model


@pytest.fixture
def report(capsys):
    def emit(num, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {num:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return emit


def test_c01_flex_table_row(report):
    t0 = time.perf_counter()
    r = perf_model(0.60, "flex", TABLE3_PRESET)
    dt = time.perf_counter() - t0
    ok = r.latency_cycles == 3300 and abs(r.latency_us - 3.3) < 1e-12 and abs(r.throughput_ips - 1.21e6) / 1.21e6 <= 0.01
    report(1, "flex row", ok and r.k == 4,
           f"k={r.k} latency={r.latency_us:.3f}us throughput={r.throughput_ips:.4g}/s ({dt * 1e3:.2f} ms)")


def test_c02_fix_table_row(report):
    r = perf_model(0.0, "fix", PerfParams(bandwidth_mode=PER_ACCELERATOR, bytes_out=4000))
    ok = (250 <= r.load_cycles <= 260 and abs(r.latency_us - 0.25) / 0.25 <= 0.05
          and abs(r.throughput_ips - 4.0e6) / 4.0e6 <= 0.05)
    report(2, "fix row", ok, f"load={r.load_cycles} latency={r.latency_us:.3f}us throughput={r.throughput_ips:.4g}/s")


def test_c03_linear_area(report):
    want = {0.0: 549.0, 0.2: 439.2, 0.4: 329.4, 0.6: 219.6, 0.8: 109.8}
    got = {s: model_area(None, s).extractor_mm2 for s in want}
    ok = all(abs(got[s] - a) / a <= 1e-3 for s, a in want.items())
    total = model_area(None, 0.6).total_mm2
    ok = ok and abs(total - 220.0) / 220.0 <= 0.01
    report(3, "linear area", ok, ", ".join(f"{s:.0%}->{a:.1f}" for s, a in got.items()) + f"; total@60%={total:.2f}")


def test_c04_alpha_calibration(report):
    alpha = calibrate_alpha(table4_rows(["1x1x16"]))
    preds = {n: alpha * adder_tree_bits(n, 8)[0] for n in (32, 64, 320)}
    synth = {32: 61.0, 64: 126.0, 320: 632.6}
    errs = {n: abs(preds[n] - synth[n]) / synth[n] for n in synth}
    ratio = adder_tree_bits(16, 5)[0] / adder_tree_bits(16, 8)[0]
    ratios = [adder_tree_bits(n, 5)[0] / adder_tree_bits(n, 8)[0] for n in (16, 32, 64, 320)]
    ok = all(e <= 0.10 for e in errs.values()) and all(0.50 <= r <= 0.75 for r in ratios)
    report(4, "alpha calibration", ok,
           f"alpha={alpha:.5f} " + " ".join(f"{n}:{preds[n]:.1f}({errs[n]:+.1%})" for n in synth)
           + f" 5/8-bit ratio={ratio:.3f}")


def test_c05_bit_exact_equivalence(report):
    t0 = time.perf_counter()
    models = codes = bad = 0
    first = None
    for seed in range(100):
        fir = fold_model(quantize_model(random_model(seed, max_hw=16, max_c=8)))
        n = build_netlist(fir)
        x = random_input_codes(fir.input_shape, Q3_5, seed)
        sim, ref = simulate(n, x), oracle_forward(fir, x)
        d = compare_traces(sim, ref)
        models += 1
        codes += sum(v.size for v in ref.layers.values())
        if d is not None:
            bad += 1
            first = first or (seed, d)
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 300
    report(5, "bit-exact equivalence", ok,
           f"{models} models, {codes} codes compared, {bad} mismatching models, {dt:.1f}s" + (f" first={first}" if first else ""))


def test_c06_relu_gate(report):
    bad = []
    for width in range(4, 13):
        codes = np.arange(-(1 << (width - 1)), 1 << (width - 1))
        if not np.array_equal(relu_gate(codes, width), np.maximum(codes, 0)):
            bad.append(width)
    report(6, "relu gate", not bad, f"widths 4-12 exhaustive, failing widths={bad}")


def test_c07_npu_anchor(report):
    r = systolic_cycles(NPU_1000x1, GemmDims(1000, 1, 1280))
    err = (r.cycles - 2278) / 2278
    report(7, "npu cycle anchor", abs(err) <= 0.01, f"{r.cycles} cycles ({err:+.3%} vs 2278)")


def test_c08_sparsity_24_study(report, mbv2):
    res = sparsity_24_study(mobilenetv2_gemms(mbv2))
    ratios = [r.ratio for r in res.rows]
    ok = all(0.4 < r <= 1.0 for r in ratios) and abs(res.mean_ratio - 0.83) <= 0.07
    report(8, "2:4 study", ok, f"{len(ratios)} layers, ratios in [{min(ratios):.3f}, {max(ratios):.3f}], "
           f"mean={res.mean_ratio:.4f} total={res.total_ratio:.4f}")


def test_c09_sweep_crossover(report):
    res = sweep(0.0, 0.8, 0.01, "flex")
    cross = res.crossover()
    ok = cross is not None and 0.63 <= cross[0] and cross[1] <= 0.72
    report(9, "sweep crossover", ok, f"npu->load between s={cross[0]:.2f} and s={cross[1]:.2f}; "
           f"peak {res.peak().throughput_ips:.4g}/s at s={res.peak().sparsity:.2f}")


def _po2_grid():
    cfg = QuantConfig()
    grid = np.concatenate([np.linspace(2.0 ** p, 2.0 ** (p + 1), 257) for p in range(-8, 7)])
    grid = np.concatenate([grid, -grid])
    s, e = quantize_po2_array(grid, cfg)
    return float((np.abs(grid - po2_values(s, e)) / np.abs(grid)).max())


def _commutation_failures():
    rng = np.random.default_rng(10)
    fails = 0
    for _ in range(50):
        m, c, k = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.choice([1, 3]))
        spec = ConvSpec(k, k, c, m, padding=k // 2)
        w = rng.normal(0, 0.5, spec.weight_shape)
        bn = BatchNormSpec(rng.uniform(0.2, 2, m) * rng.choice([-1, 1], m), rng.normal(0, 0.2, m),
                           rng.normal(0, 0.2, m), rng.uniform(0.5, 2, m))
        frac = float(rng.uniform(0.05, 0.9))
        scale, _ = bn_scale_offset(bn)
        before = magnitude_prune(w, frac, "per_channel")
        after = magnitude_prune(w * scale.reshape(m, 1, 1, 1), frac, "per_channel")
        ir = ModelIR(TensorShape(4, 4, c), (Conv(spec, w), BatchNorm(bn), Linear(np.ones((1, 16 * m)))))
        pruned, masks = prune_model(ir, frac, "per_channel", skip=None)
        folded = fold_model(quantize_model(pruned)).layers[0]
        ok = np.array_equal(before, after) and np.array_equal(masks[0], before) and not folded.sign[~before].any()
        fails += not ok
    return fails


def _tree_failures():
    rng = np.random.default_rng(0)
    sizes = rng.integers(1, 400, 1000)
    groups = np.repeat(np.arange(1000), sizes)
    pols = rng.choice([-1, 1], len(groups))
    bld = _Builder()
    leaves = bld.add(REWIRE, len(groups), width=8, flag=pols < 0)
    reduce_tree(bld, leaves, np.full(len(leaves), 8), pols, groups)
    cols = bld.freeze()
    # every adder merges two subtrees, so a tree over L leaves needs exactly L - 1
    return int(np.count_nonzero(cols["kind"] == ADD) != int((sizes - 1).sum()))


def test_c10_property_suites(report):
    po2_worst = _po2_grid()
    comm = _commutation_failures()
    trees = _tree_failures()
    closed = [e for e in range(15) if adder_tree_bits_closed(1 << e) != adder_tree_bits(1 << e)[0]]
    fir = fold_model(quantize_model(random_model(12)))
    hdl_same = emit_hdl(build_netlist(fir)) == emit_hdl(build_netlist(fir))
    ok = po2_worst <= 1 / 3 + 1e-12 and comm == 0 and trees == 0 and not closed and hdl_same
    report(10, "property suites", ok,
           f"po2 worst rel err={po2_worst:.6f}; commutation fails={comm}/50; tree count fails={trees} (1000 trees); "
           f"closed-form mismatches={closed} (2^0..2^14); hdl deterministic={hdl_same}")
