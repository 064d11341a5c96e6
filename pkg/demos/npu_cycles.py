# Systolic-array cycle counts and the 2:4 compression study.
# Run: python3 demos/npu_cycles.py

import numpy as np

from hardwire.npu import NPU_1000x1, OS, WS, ArrayConfig, GemmDims, mobilenetv2_gemms, sparsity_24_study, \
    stepped_gemm, systolic_cycles

# %% the classifier GEMV on a 1000x1 output-stationary column
rep = systolic_cycles(NPU_1000x1, GemmDims(1000, 1, 1280))
print(f"1000x1x1280: {rep.cycles} cycles, utilization {rep.utilization:.3f}")

# %% the event model against a register-by-register stepping of the array
rng = np.random.default_rng(1)
for df in (OS, WS):
    cfg = ArrayConfig(3, 4, df)
    W, X = rng.normal(size=(5, 7)), rng.normal(size=(7, 6))
    prod, cyc = stepped_gemm(cfg, W, X)
    print(f"{df}: stepped {cyc} vs event {systolic_cycles(cfg, GemmDims(5, 6, 7)).cycles} cycles, "
          f"product ok {np.allclose(prod, W @ X)}")

# %% halve every reduction dim (2 of 4 weights kept) on a 128x128 weight-stationary array
res = sparsity_24_study(mobilenetv2_gemms())
print(f"mean ratio {res.mean_ratio:.3f}, total-cycle ratio {res.total_ratio:.3f}")
worst = sorted(res.rows, key=lambda r: r.ratio)
for r in worst[:3] + worst[-3:]:
    print(f"  {r.layer:28s} K={r.dims.K:5d}  {r.cycles_full:6d} -> {r.cycles_half:6d}  ({r.ratio:.3f})")
