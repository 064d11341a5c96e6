"""Command-line front end.

Models are given as a manifest path, ``mobilenetv2`` (bundled, seeded
weights) or ``random[:SEED]`` (a desk-scale random CNN). Every JSON/CSV
artifact embeds the effective configuration, where each value came from
(flag, config file or default) and the seed.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import cost_models as cm
from . import npu
from .hardener import build_netlist, emit_hdl, netlist_stats
from .model_ir import ModelIR, describe, load_model, save_model, toeplitz_dims, input_shapes
from .quantizer import QuantConfig, FixedPointFormat, fold_model, prune_model, quantize_model, quantization_summary, \
    prunable_fraction, prune_masks, apply_masks
from .simulator import compare_traces, encode_input, load_rgb, oracle_forward, simulate
from .zoo import mobilenetv2, random_input_codes, random_model

# option -> (type, default). Options default to None on the parser so we can
# tell an explicit flag from a fallback.
OPTIONS = {
    "seed": (int, 0),
    "act_format": (str, "Q3.5"),
    "p_min": (int, -8),
    "p_max": (int, 7),
    "sparsity": (float, 0.0),
    "scope": (str, "per_channel"),
    "variant": (str, "flex"),
    "a0": (float, 549.0),
    "reticle": (float, 850.0),
    "bandwidth": (float, 900.0),
    "ref_area": (float, 814.0),
    "clock_ghz": (float, 1.0),
    "npu_cycles": (int, 3300),
    "bytes_in": (int, 224 * 224 * 3),
    "bytes_out": (int, 4000),
    "bandwidth_mode": (str, None),
    "alpha": (float, cm.ALPHA_1x1x16),
    "act_bits": (int, 8),
    "area_mode": (str, "linear"),
    "start": (float, 0.0),
    "stop": (float, 0.8),
    "step": (float, 0.01),
    "inputs": (int, 32),
    "top": (str, "hardened_top"),
    "rows": (int, 1000),
    "cols": (int, 1),
    "dataflow": (str, npu.OS),
    "array": (int, 128),
}


class CliError(Exception):
    pass


def _read_config(path):
    if not path:
        return {}
    with open(path) as f:
        text = f.read()
    if not text.lstrip().startswith("["):
        text = "[hardwire]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    out = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            key = k.replace("-", "_")
            if key not in OPTIONS:
                raise CliError(f"config {path}: unknown key {k!r}")
            out[key] = v
    return out


def effective_config(args):
    """Resolve every option: flag > config file > default. Returns (values, sources)."""
    file_vals = _read_config(getattr(args, "config", None))
    vals, src = {}, {}
    for key, (typ, default) in OPTIONS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            vals[key], src[key] = flag, "flag"
        elif key in file_vals:
            vals[key], src[key] = typ(file_vals[key]), "file"
        else:
            vals[key], src[key] = default, "default"
    return vals, src


def _provenance(args, vals, src):
    return {
        "tool": f"hardwire {__version__}",
        "command": args.command,
        "model": getattr(args, "model", None),
        "seed": vals["seed"],
        "config": {k: vals[k] for k in sorted(vals)},
        "config_source": {k: src[k] for k in sorted(src)},
    }


def resolve_model(spec: str, seed: int) -> ModelIR:
    if spec == "mobilenetv2":
        return mobilenetv2(seed)
    if spec == "random" or spec.startswith("random:"):
        s = int(spec.split(":", 1)[1]) if ":" in spec else seed
        return random_model(s)
    if not os.path.exists(spec):
        raise CliError(f"model {spec!r}: no such file (use a path, 'mobilenetv2' or 'random[:SEED]')")
    return load_model(spec)


def quant_config(vals) -> QuantConfig:
    return QuantConfig.from_mapping({"act_format": vals["act_format"], "p_min": vals["p_min"], "p_max": vals["p_max"]})


def is_folded(ir: ModelIR) -> bool:
    return ir.quantized and all(getattr(l, "folded", True) for l in ir.layers) and \
        not any(l.kind == "batchnorm" for l in ir.layers)


def pipeline(ir: ModelIR, vals) -> ModelIR:
    """Prune (real weights) -> quantize -> fold, skipping stages already done."""
    if ir.quantized:
        if vals["sparsity"]:
            raise CliError("cannot prune an already quantized model; prune before quantizing")
        return ir if is_folded(ir) else fold_model(ir)
    if vals["sparsity"]:
        ir, _ = prune_model(ir, vals["sparsity"], vals["scope"])
    return fold_model(quantize_model(ir, quant_config(vals)))


def perf_params(vals) -> cm.PerfParams:
    return cm.PerfParams(
        a0_mm2=vals["a0"], reticle_mm2=vals["reticle"], bandwidth_gbps=vals["bandwidth"],
        ref_area_mm2=vals["ref_area"], clock_ghz=vals["clock_ghz"], npu_cycles=vals["npu_cycles"],
        bytes_in=vals["bytes_in"], bytes_out=vals["bytes_out"], bandwidth_mode=vals["bandwidth_mode"],
    )


def area_params(vals) -> cm.AreaParams:
    return cm.AreaParams(alpha=vals["alpha"], a0_mm2=vals["a0"])


def _emit(args, text: str):
    if args.output:
        d = os.path.dirname(args.output)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _json(args, prov, body: dict):
    doc = {"provenance": prov}
    doc.update(body)
    _emit(args, json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _csv_comment(prov) -> str:
    return "provenance: " + json.dumps(prov, sort_keys=True, default=str)


def _load_input(path, netlist_or_ir, fmt, seed, shape):
    if path is None:
        return random_input_codes(shape, fmt, seed)
    if path.endswith(".json"):
        with open(path) as f:
            d = json.load(f)
        if "codes" in d:
            return np.asarray(d["codes"], dtype=np.int64).reshape(shape.as_tuple())
        if "values" in d:
            return encode_input(np.asarray(d["values"], dtype=np.float64).reshape(shape.as_tuple()), fmt)
        raise CliError(f"{path}: tensor JSON needs 'codes' or 'values'")
    return load_rgb(path, shape.as_tuple(), fmt)


# -- subcommands ------------------------------------------------------------


def cmd_inspect(args, vals, prov):
    ir = resolve_model(args.model, vals["seed"])
    rows = [dict(id=i, kind=k, shape=s, detail=d) for i, k, s, d in describe(ir)]
    convs = []
    for i, inp in zip(ir.conv_indices(), [input_shapes(ir)[j] for j in ir.conv_indices()]):
        convs.append(dict(layer=i, toeplitz=list(toeplitz_dims(ir.layers[i].spec, inp))))
    body = {"name": ir.name, "input": str(ir.input_shape), "k_fe": ir.k_fe, "quantized": ir.quantized,
            "layers": rows, "convs": convs}
    if ir.quantized:
        body["quantization"] = quantization_summary(ir)
    _json(args, prov, body)


def _save(args, ir, prov):
    if not args.output:
        raise CliError(f"{args.command} writes a model; pass -o PATH")
    save_model(ir, args.output, provenance=prov)
    print(f"wrote {args.output}")


def cmd_quantize(args, vals, prov):
    ir = resolve_model(args.model, vals["seed"])
    _save(args, quantize_model(ir, quant_config(vals)), prov)


def cmd_fold(args, vals, prov):
    ir = resolve_model(args.model, vals["seed"])
    if not ir.quantized:
        ir = quantize_model(ir, quant_config(vals))
    out = fold_model(ir)
    _save(args, out, prov)
    print(f"clamp events: {out.meta.get('clamp_events', 0)}")


def cmd_prune(args, vals, prov):
    ir = resolve_model(args.model, vals["seed"])
    if ir.quantized:
        raise CliError("prune expects a real-valued model")
    masks = prune_masks(ir, vals["sparsity"], vals["scope"])
    out = apply_masks(ir, masks)
    _save(args, out, prov)
    print(f"pruned fraction of prunable weights: {prunable_fraction(ir, masks):.4f}")


def cmd_harden(args, vals, prov):
    ir = pipeline(resolve_model(args.model, vals["seed"]), vals)
    n = build_netlist(ir)
    st = netlist_stats(n)
    doc = json.loads(st.to_json())
    doc["warnings"] = n.warnings
    doc["k_fe"] = n.k_fe
    _json(args, prov, doc)


def cmd_emit(args, vals, prov):
    ir = pipeline(resolve_model(args.model, vals["seed"]), vals)
    text = emit_hdl(build_netlist(ir), vals["top"])
    _emit(args, f"// provenance: {json.dumps(prov, sort_keys=True, default=str)}\n" + text)


def cmd_sim(args, vals, prov):
    ir = pipeline(resolve_model(args.model, vals["seed"]), vals)
    n = build_netlist(ir)
    x = _load_input(args.input, n, ir.act_format, vals["seed"], ir.input_shape)
    trace = simulate(n, x)
    doc = json.loads(trace.to_json())
    if args.logits:
        logits = npu.npu_execute(ir.classifier.weights, trace.features.to_real())
        doc["logits"] = logits.tolist()
        doc["argmax"] = int(np.argmax(logits))
    _json(args, prov, doc)


def cmd_diff(args, vals, prov):
    ir = pipeline(resolve_model(args.model, vals["seed"]), vals)
    n = build_netlist(ir)
    rng = np.random.default_rng(vals["seed"])
    mismatches = []
    for t in range(vals["inputs"]):
        x = random_input_codes(ir.input_shape, ir.act_format, int(rng.integers(2**31)))
        d = compare_traces(simulate(n, x), oracle_forward(ir, x))
        if d:
            mismatches.append({"input": t, "layer": d[0], "index": list(d[1]), "sim": d[2], "oracle": d[3]})
    exact = not mismatches
    print(f"bit-exact: {'true' if exact else 'false'} ({vals['inputs']} inputs, {len(n)} nodes)", file=sys.stderr)
    _json(args, prov, {"bit_exact": exact, "inputs": vals["inputs"], "nodes": len(n), "mismatches": mismatches})
    return 0 if exact else 1


def cmd_area(args, vals, prov):
    mode = vals["area_mode"]
    ir = None
    if mode == "detailed":
        ir = resolve_model(args.model or "mobilenetv2", vals["seed"])
    rep = cm.model_area(ir, vals["sparsity"], area_params(vals), mode, vals["act_bits"])
    _json(args, prov, rep.as_dict())


def cmd_perf(args, vals, prov):
    rep = cm.perf_model(vals["sparsity"], vals["variant"], perf_params(vals))
    _json(args, prov, rep.as_dict())


def cmd_sweep(args, vals, prov):
    res = cm.sweep(vals["start"], vals["stop"], vals["step"], vals["variant"], perf_params(vals))
    cross = res.crossover()
    _emit(args, res.to_csv(_csv_comment(prov) + f"\ncrossover: {cross}"))


def cmd_table3(args, vals, prov):
    params = perf_params(vals)
    if getattr(args, "reticle", None) is None and prov["config_source"]["reticle"] == "default":
        params = replace(params, reticle_mm2=cm.TABLE3_PRESET.reticle_mm2)
        prov["config"]["reticle"] = params.reticle_mm2
        prov["config_source"]["reticle"] = "table3 preset"
    rows = cm.table3(params, area_params(vals))
    print(cm.format_table3(rows), file=sys.stderr)
    _json(args, prov, {"rows": rows})


def cmd_npu_cycles(args, vals, prov):
    cfg = npu.ArrayConfig(vals["rows"], vals["cols"], vals["dataflow"], not args.no_fill_drain)
    g = npu.GemmDims(args.M, args.N, args.K)
    rep = npu.systolic_cycles(cfg, g)
    _json(args, prov, {"array": vars(cfg), "gemm": vars(g), "cycles": rep.cycles, "tiles": rep.tiles,
                       "utilization": rep.utilization})


def cmd_study_24(args, vals, prov):
    ir = resolve_model(args.model or "mobilenetv2", vals["seed"])
    cfg = npu.ArrayConfig(vals["array"], vals["array"], npu.WS)
    res = npu.sparsity_24_study(npu.mobilenetv2_gemms(ir, not args.no_depthwise), cfg)
    comment = _csv_comment(prov) + f"\nmean_ratio: {res.mean_ratio:.6f}\ntotal_ratio: {res.total_ratio:.6f}"
    _emit(args, res.to_csv(comment))
    print(f"mean ratio {res.mean_ratio:.4f}, total-cycle ratio {res.total_ratio:.4f}", file=sys.stderr)


COMMANDS = {
    "inspect": (cmd_inspect, "describe a model's layers and GEMM dims"),
    "quantize": (cmd_quantize, "Po2-quantize conv weights (batch norms kept)"),
    "fold": (cmd_fold, "quantize if needed and fold batch norms into conv biases"),
    "prune": (cmd_prune, "magnitude-prune real conv weights"),
    "harden": (cmd_harden, "build the netlist and report adder statistics"),
    "emit": (cmd_emit, "write the netlist as structural HDL text"),
    "sim": (cmd_sim, "simulate the netlist on one input and dump a trace"),
    "diff": (cmd_diff, "compare netlist simulation with the fixed-point oracle"),
    "area": (cmd_area, "chip area estimate"),
    "perf": (cmd_perf, "throughput/latency for one sparsity point"),
    "sweep": (cmd_sweep, "throughput/latency over a sparsity range (CSV)"),
    "table3": (cmd_table3, "flex/fix rows next to the published reference"),
    "npu-cycles": (cmd_npu_cycles, "systolic-array cycle count for one GEMM"),
    "study-24": (cmd_study_24, "2:4 compression cycle study over MobileNetV2 (CSV)"),
}

MODEL_CMDS = {"inspect", "quantize", "fold", "prune", "harden", "emit", "sim", "diff"}


def build_parser():
    p = argparse.ArgumentParser(prog="hardwire", description="Compile CNNs into rewire-and-accumulate netlists "
                                "and evaluate area/throughput models.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file (flags override it)")
        sp.add_argument("--seed", type=int, help="seed for synthetic weights and inputs (default 0)")
        sp.add_argument("-o", "--output", help="output file (default: stdout)")

    def quant(sp):
        sp.add_argument("--act-format", dest="act_format", help="activation format, e.g. Q3.5")
        sp.add_argument("--p-min", dest="p_min", type=int)
        sp.add_argument("--p-max", dest="p_max", type=int)
        sp.add_argument("--sparsity", type=float, help="prune fraction before quantizing (default 0)")
        sp.add_argument("--scope", choices=["per_layer", "per_channel", "global"])

    def perf(sp):
        sp.add_argument("--variant", choices=cm.VARIANTS)
        sp.add_argument("--a0", type=float, help="dense extractor area, mm^2")
        sp.add_argument("--reticle", type=float)
        sp.add_argument("--bandwidth", type=float, help="reference interconnect, GB/s")
        sp.add_argument("--ref-area", dest="ref_area", type=float)
        sp.add_argument("--clock-ghz", dest="clock_ghz", type=float)
        sp.add_argument("--npu-cycles", dest="npu_cycles", type=int)
        sp.add_argument("--bytes-in", dest="bytes_in", type=int)
        sp.add_argument("--bytes-out", dest="bytes_out", type=int)
        sp.add_argument("--bandwidth-mode", dest="bandwidth_mode", choices=[cm.PER_ACCELERATOR, cm.DIE_SHARED])
        sp.add_argument("--alpha", type=float, help="um^2 per full-adder bit")

    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        common(sp)
        if name in MODEL_CMDS:
            sp.add_argument("model", help="manifest path, 'mobilenetv2' or 'random[:SEED]'")
            quant(sp)
        if name == "emit":
            sp.add_argument("--top", help="top module name")
        if name == "sim":
            sp.add_argument("--input", help="raw RGB file or tensor JSON ({codes|values}); default: random codes")
            sp.add_argument("--logits", action="store_true", help="also run the classifier on the NPU")
        if name == "diff":
            sp.add_argument("--inputs", type=int, help="number of random inputs (default 32)")
        if name in ("area", "perf", "sweep", "table3"):
            perf(sp)
            sp.add_argument("--sparsity", type=float)
        if name == "area":
            sp.add_argument("--mode", dest="area_mode", choices=["linear", "detailed"])
            sp.add_argument("--act-bits", dest="act_bits", type=int)
            sp.add_argument("--model", help="model for detailed mode (default mobilenetv2)")
        if name == "sweep":
            sp.add_argument("--start", type=float)
            sp.add_argument("--stop", type=float)
            sp.add_argument("--step", type=float)
        if name == "npu-cycles":
            sp.add_argument("--rows", type=int)
            sp.add_argument("--cols", type=int)
            sp.add_argument("--dataflow", choices=[npu.OS, npu.WS])
            sp.add_argument("--no-fill-drain", action="store_true")
            sp.add_argument("-M", type=int, default=1000)
            sp.add_argument("-N", type=int, default=1)
            sp.add_argument("-K", type=int, default=1280)
        if name == "study-24":
            sp.add_argument("--array", type=int, help="square weight-stationary array size (default 128)")
            sp.add_argument("--model", help="default mobilenetv2")
            sp.add_argument("--no-depthwise", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        vals, src = effective_config(args)
        prov = _provenance(args, vals, src)
        fn = COMMANDS[args.command][0]
        rc = fn(args, vals, prov)
        return int(rc or 0)
    except Exception as e:  # report module-qualified, never a bare traceback
        mod = type(e).__module__
        where = mod.replace("hardwire.", "") if mod.startswith("hardwire") else "io" if isinstance(e, OSError) else mod
        print(f"hardwire {args.command}: [{where}] {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
