# Walk a small random CNN through quantize -> fold -> harden -> simulate.
# Run: python3 demos/harden_tiny_model.py

import numpy as np

from hardwire.hardener import build_netlist, emit_hdl, netlist_stats
from hardwire.model_ir import describe
from hardwire.quantizer import Q3_5, fold_model, prune_model, quantize_model
from hardwire.simulator import compare_traces, end_to_end, oracle_forward, simulate
from hardwire.zoo import random_input_codes, random_model

# %% a toy model: conv / BN / ReLU / residual mixes, real weights
ir = random_model(7)
for row in describe(ir):
    print(row)

# %% prune 50% per output channel, then Po2-quantize and fold the batch norms
pruned, masks = prune_model(ir, 0.5)
fir = fold_model(quantize_model(pruned))
print("clamped exponents during folding:", fir.meta["clamp_events"])

# %% every weight is now a sign and a shift; the netlist only needs adders
net = build_netlist(fir)
stats = netlist_stats(net)
print(f"{len(net)} nodes, {stats.total.add_count} adders, {stats.total.total_bits} full-adder bits")
for idx, ls in stats.per_layer.items():
    print(f"  layer {idx}: rewires={ls.rewires} adders={ls.adders}")

# %% simulate and check against the direct loop-nest oracle
x = random_input_codes(fir.input_shape, Q3_5, seed=0)
sim = simulate(net, x)
print("first mismatch:", compare_traces(sim, oracle_forward(fir, x)))

# %% the classifier stays programmable: swap weights, features unchanged
rng = np.random.default_rng(0)
for trial in range(2):
    logits, tr = end_to_end(net, rng.normal(size=(4, fir.k_fe)), x)
    print(f"weights #{trial}: logits {np.round(logits, 3)} argmax {int(np.argmax(logits))}")

# %% structural HDL, first few lines of the top module
hdl = emit_hdl(net)
top = hdl[hdl.index("module hardened_top"):]
print("\n".join(top.splitlines()[:12]))
