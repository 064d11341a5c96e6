# Area from adder-tree bit counts, then throughput/latency vs sparsity.
# Run: python3 demos/area_and_throughput.py

from hardwire.cost_models import (PerfParams, adder_tree_bits, calibrate_alpha, format_table3, model_area, perf_model,
                                  sweep, table3, table4_rows)
from hardwire.zoo import mobilenetv2

# %% fit um^2 per full-adder bit on one synthesized row, predict the others
alpha = calibrate_alpha(table4_rows(["1x1x16"]))
print(f"alpha = {alpha:.4f} um^2/bit")
for leaves, area in [(32, 61.0), (64, 126.0), (320, 632.6)]:
    pred = alpha * adder_tree_bits(leaves, 8)[0]
    print(f"  1x1x{leaves}: predicted {pred:6.1f} vs synthesized {area}")

# %% chip area: linear shortcut vs per-layer sum over MobileNetV2
mb = mobilenetv2()
for s in (0.0, 0.2, 0.4, 0.6, 0.8):
    lin = model_area(None, s)
    det = model_area(mb, s, mode="detailed")
    print(f"s={s:.1f}  linear {lin.extractor_mm2:6.1f} mm^2   detailed {det.extractor_mm2:6.1f} mm^2")

# %% a few operating points
for s, variant in [(0.0, "flex"), (0.6, "flex"), (0.0, "fix")]:
    r = perf_model(s, variant)
    print(f"{variant} s={s}: k={r.k} load={r.load_cycles} latency={r.latency_us:.3f}us "
          f"throughput={r.throughput_ips:.3g}/s ({r.limiter}-bound)")

# %% sweep: npu-bound until the load time catches up
res = sweep(0.0, 0.8, 0.01, "flex")
print("crossover:", res.crossover(), " peak:", res.peak().sparsity, f"{res.peak().throughput_ips:.3g}/s")

# %% published comparison, with the 880 mm^2 reticle and with the stock 850
print(format_table3(table3()))
print(format_table3(table3(PerfParams())))
