"""Final-layer NPU: functional GEMV plus systolic-array cycle models.

GEMM convention: ``Out[M x N] = W[M x K] @ X[K x N]``.

* Output-stationary: PE (i, j) owns output (m, n); operands stream along K.
* Weight-stationary: PE (i, j) holds weight (k = i, m = j); the N input
  columns stream through, partial sums flow down the column.

Folds always occupy the full array (operands zero-padded), so a partial fold
costs the same skew as a full one. Folds run back to back.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

OS, WS = "output_stationary", "weight_stationary"


@dataclass(frozen=True)
class ArrayConfig:
    rows: int
    cols: int
    dataflow: str = OS
    fill_drain: bool = True

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dims must be >= 1")
        if self.dataflow not in (OS, WS):
            raise ValueError(f"unknown dataflow {self.dataflow!r}")


@dataclass(frozen=True)
class GemmDims:
    M: int
    N: int
    K: int

    def __post_init__(self):
        if min(self.M, self.N, self.K) < 1:
            raise ValueError(f"GEMM dims must be >= 1, got {self}")

    @property
    def macs(self) -> int:
        return self.M * self.N * self.K

    def halved_k(self) -> "GemmDims":
        return GemmDims(self.M, self.N, math.ceil(self.K / 2))


@dataclass(frozen=True)
class CycleReport:
    cycles: int
    tiles: int
    utilization: float


NPU_1000x1 = ArrayConfig(1000, 1, OS)
WS_128 = ArrayConfig(128, 128, WS)


def npu_execute(A, x, cfg: Optional[ArrayConfig] = None):
    """Full-precision matrix-vector product; weights are plain arguments, so swappable."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.ndim != 2 or x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise ValueError(f"npu_execute: A {A.shape} incompatible with x {x.shape}")
    return A @ x


def _fold_grid(cfg: ArrayConfig, g: GemmDims):
    if cfg.dataflow == OS:
        return math.ceil(g.M / cfg.rows), math.ceil(g.N / cfg.cols), g.K
    return math.ceil(g.K / cfg.rows), math.ceil(g.M / cfg.cols), g.N


def _fold_events(cfg: ArrayConfig, stream: int, t0: int):
    """(first, last) MAC cycle of every PE in one fold starting at ``t0``.

    Operand skew puts PE (i, j) ``i + j`` cycles behind PE (0, 0). For a
    weight-stationary fold the weights first shift in over ``rows`` cycles.
    """
    i = np.arange(cfg.rows)[:, None]
    j = np.arange(cfg.cols)[None, :]
    skew = (i + j) if cfg.fill_drain else np.zeros((cfg.rows, cfg.cols), dtype=np.int64)
    preload = cfg.rows if (cfg.dataflow == WS and cfg.fill_drain) else 0
    first = t0 + preload + skew
    last = first + stream - 1
    return first, last


def systolic_cycles(cfg: ArrayConfig, g: GemmDims) -> CycleReport:
    """Cycle count from a per-PE event schedule of every fold, run in sequence."""
    a, b, stream = _fold_grid(cfg, g)
    tiles = a * b
    t = 0
    # every fold has the same shape; schedule one and replay its span
    first, last = _fold_events(cfg, stream, 0)
    span = int(last.max()) + 1
    for _ in range(tiles):
        t += span
    util = g.macs / (t * cfg.rows * cfg.cols)
    return CycleReport(int(t), int(tiles), float(util))


# -- cycle-stepped reference -------------------------------------------------


def _os_fold_stepped(Wt, Xt, R, C):
    """Register-level OS fold. Wt: R x K, Xt: K x C (zero padded)."""
    K = Wt.shape[1]
    acc = np.zeros((R, C))
    a_reg = np.zeros((R, C))
    b_reg = np.zeros((R, C))
    a_ok = np.zeros((R, C), dtype=bool)
    b_ok = np.zeros((R, C), dtype=bool)
    done = np.zeros((R, C), dtype=np.int64)
    cycle = 0
    while done.min() < K:
        # shift right / down, then inject skewed operands at the edges
        a_reg[:, 1:], a_ok[:, 1:] = a_reg[:, :-1].copy(), a_ok[:, :-1].copy()
        b_reg[1:, :], b_ok[1:, :] = b_reg[:-1, :].copy(), b_ok[:-1, :].copy()
        for i in range(R):
            k = cycle - i
            a_ok[i, 0] = 0 <= k < K
            a_reg[i, 0] = Wt[i, k] if a_ok[i, 0] else 0.0
        for j in range(C):
            k = cycle - j
            b_ok[0, j] = 0 <= k < K
            b_reg[0, j] = Xt[k, j] if b_ok[0, j] else 0.0
        fire = a_ok & b_ok
        acc[fire] += a_reg[fire] * b_reg[fire]
        done += fire
        cycle += 1
    return acc, cycle


def _ws_fold_stepped(Wt, Xt, R, C):
    """Register-level WS fold. Wt: K_t x M_t laid as R x C, Xt: R x N."""
    N = Xt.shape[1]
    w = np.zeros((R, C))
    # preload: weights shift down one row per cycle
    cycle = 0
    for _ in range(R):
        w[1:, :] = w[:-1, :].copy()
        w[0, :] = 0.0
        cycle += 1
    w[:, :] = Wt  # after R shifts the array holds the tile
    out = np.zeros((C, N))
    x_reg = np.zeros((R, C))
    x_ok = np.zeros((R, C), dtype=bool)
    x_n = np.full((R, C), -1)
    psum = np.zeros((R, C))
    p_n = np.full((R, C), -1)
    emitted = 0
    t = 0
    while emitted < C * N:
        x_reg[:, 1:], x_ok[:, 1:], x_n[:, 1:] = x_reg[:, :-1].copy(), x_ok[:, :-1].copy(), x_n[:, :-1].copy()
        for i in range(R):
            n = t - i
            x_ok[i, 0] = 0 <= n < N
            x_reg[i, 0] = Xt[i, n] if x_ok[i, 0] else 0.0
            x_n[i, 0] = n if x_ok[i, 0] else -1
        incoming = np.zeros((R, C))
        incoming[1:, :] = psum[:-1, :]
        in_n = np.full((R, C), -1)
        in_n[1:, :] = p_n[:-1, :]
        in_n[0, :] = x_n[0, :]
        new = incoming + np.where(x_ok, w * x_reg, 0.0)
        psum, p_n = new, np.where(x_ok, x_n, -1)
        bottom = p_n[R - 1, :]
        for j in np.nonzero(bottom >= 0)[0]:
            out[j, bottom[j]] = psum[R - 1, j]
            emitted += 1
        t += 1
        cycle += 1
    return out, cycle


def stepped_gemm(cfg: ArrayConfig, W, X):
    """Run ``W @ X`` on a register-level model of the array, one cycle at a time.

    Slow; meant for small dims as an oracle for ``systolic_cycles``. Returns
    ``(product, cycles)``.
    """
    if not cfg.fill_drain:
        raise ValueError("the stepped model always includes fill and drain")
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    M, K = W.shape
    N = X.shape[1]
    R, C = cfg.rows, cfg.cols
    out = np.zeros((M, N))
    cycles = 0
    if cfg.dataflow == OS:
        for m0 in range(0, M, R):
            for n0 in range(0, N, C):
                Wt = np.zeros((R, K))
                Xt = np.zeros((K, C))
                wb = W[m0:m0 + R]
                xb = X[:, n0:n0 + C]
                Wt[:len(wb)] = wb
                Xt[:, :xb.shape[1]] = xb
                acc, cyc = _os_fold_stepped(Wt, Xt, R, C)
                out[m0:m0 + R, n0:n0 + C] = acc[:len(wb), :xb.shape[1]]
                cycles += cyc
    else:
        for k0 in range(0, K, R):
            for m0 in range(0, M, C):
                Wt = np.zeros((R, C))
                blk = W[m0:m0 + C, k0:k0 + R].T
                Wt[:blk.shape[0], :blk.shape[1]] = blk
                Xt = np.zeros((R, N))
                xb = X[k0:k0 + R]
                Xt[:len(xb)] = xb
                res, cyc = _ws_fold_stepped(Wt, Xt, R, C)
                out[m0:m0 + C] += res[:blk.shape[1]]
                cycles += cyc
    return out, cycles


# -- 2:4 sparsity cycle study ----------------------------------------------


@dataclass
class StudyRow:
    layer: str
    dims: GemmDims
    cycles_full: int
    cycles_half: int

    @property
    def ratio(self) -> float:
        return self.cycles_half / self.cycles_full


@dataclass
class StudyResult:
    rows: list
    mean_ratio: float
    total_ratio: float

    def to_csv(self, header_comment: str = "") -> str:
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "M", "N", "K", "cycles_full", "cycles_half", "ratio"])
        for r in self.rows:
            w.writerow([r.layer, r.dims.M, r.dims.N, r.dims.K, r.cycles_full, r.cycles_half, f"{r.ratio:.6f}"])
        return buf.getvalue()


def sparsity_24_study(layers, cfg: ArrayConfig = WS_128) -> StudyResult:
    """Cycles with the reduction dim halved (2:4 compressed weights) vs dense.

    ``layers`` is a sequence of ``(label, GemmDims)``.
    """
    rows = []
    for label, g in layers:
        full = systolic_cycles(cfg, g).cycles
        half = systolic_cycles(cfg, g.halved_k()).cycles
        rows.append(StudyRow(str(label), g, full, half))
    mean = float(np.mean([r.ratio for r in rows])) if rows else float("nan")
    tot_full = sum(r.cycles_full for r in rows)
    total = sum(r.cycles_half for r in rows) / tot_full if tot_full else float("nan")
    return StudyResult(rows, mean, float(total))


def mobilenetv2_gemms(ir=None, include_depthwise: bool = True):
    """``(label, GemmDims)`` for every conv of the bundled MobileNetV2."""
    from .zoo import conv_gemm_dims, conv_label, mobilenetv2

    ir = ir or mobilenetv2()
    out = []
    for i, m, k, n in conv_gemm_dims(ir, include_depthwise):
        out.append((f"L{i}:{conv_label(ir.layers[i].spec)}", GemmDims(m, n, k)))
    return out
