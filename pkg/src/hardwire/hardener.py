"""Rewire-and-accumulate netlist construction and structural HDL emission.

Every nonzero Po2 weight becomes a ``Rewire`` leaf (a fixed shift, no logic).
The leaves of one output element are reduced by a balanced binary tree whose
adders grow one bit per level, then a bias adder, an optional ReLU gate and a
requantizer back to the activation format.

Negative weights never negate a leaf. Each partial sum carries a build-time
polarity instead; mixed-polarity pairs become subtractors and a negative root
is subtracted from the bias. This keeps the first tree level at exactly the
activation width.

Node semantics (the simulator and the fixed-point oracle share them):

* Rewire: ``x << p`` saturated to the activation range for ``p > 0``,
  arithmetic ``x >> -p`` (floor) for ``p < 0``.
* Requantize: floor-shift away surplus fraction bits, then saturate.
* Widths: ``Add``/``EltAdd``/``BiasAdd`` outputs are one bit wider than their
  widest operand, so no adder can overflow.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .model_ir import BatchNorm, Conv, EltwiseAdd, GlobalSumPool, Linear, ModelIR, QuantConv, ReLU, infer_shapes
from .quantizer import FixedPointFormat

INPUT, REWIRE, ADD, PASS, BIAS, RELU, REQUANT, ELTADD, OUTPUT = range(9)
KIND_NAMES = ["input", "rewire", "add", "pass", "bias", "relu", "requant", "eltadd", "output"]
_FIELDS = ("kind", "a", "b", "width", "imm", "flag", "layer", "level")


class NetlistError(ValueError):
    pass


class _Builder:
    def __init__(self):
        self.cols = {k: [] for k in _FIELDS}
        self.levels = []
        self.n = 0

    def _level_of(self, ids):
        if not self.levels:
            return np.zeros(len(ids), dtype=np.int64)
        lv = np.concatenate(self.levels)
        out = np.full(len(ids), -1, dtype=np.int64)
        ok = ids >= 0
        out[ok] = lv[ids[ok]]
        return out

    def add(self, kind, n, a=-1, b=-1, width=0, imm=0, flag=0, layer=-1):
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        vals = {
            "kind": np.full(n, kind, dtype=np.int8),
            "a": np.broadcast_to(np.asarray(a, dtype=np.int64), (n,)).copy(),
            "b": np.broadcast_to(np.asarray(b, dtype=np.int64), (n,)).copy(),
            "width": np.broadcast_to(np.asarray(width, dtype=np.int64), (n,)).copy(),
            "imm": np.broadcast_to(np.asarray(imm, dtype=np.int64), (n,)).copy(),
            "flag": np.broadcast_to(np.asarray(flag, dtype=np.int8), (n,)).copy(),
            "layer": np.full(n, layer, dtype=np.int32),
        }
        lv = np.maximum(self._level_of(vals["a"]), self._level_of(vals["b"])) + 1
        vals["level"] = lv
        for k in _FIELDS:
            self.cols[k].append(vals[k])
        self.levels.append(lv)
        # flatten eagerly so _level_of stays cheap
        if len(self.levels) > 64:
            merged = np.concatenate(self.levels)
            self.levels = [merged]
        ids = np.arange(self.n, self.n + n, dtype=np.int64)
        self.n += n
        return ids

    def widths(self, ids):
        w = np.concatenate(self.cols["width"])
        return w[ids]

    def freeze(self):
        return {k: (np.concatenate(v) if v else np.zeros(0, dtype=np.int64)) for k, v in self.cols.items()}


def reduce_tree(bld: _Builder, ids, widths, pols, groups, layer=-1):
    """Balanced binary reduction of each group, vectorized across groups.

    ``groups`` must be sorted. Adjacent pairs are added level by level and an
    odd trailing node is carried up through a ``Passthrough``. Returns
    ``(group, root id, root width, root polarity)`` for every non-empty group.
    """
    ids = np.asarray(ids, dtype=np.int64)
    w = np.asarray(widths, dtype=np.int64)
    pol = np.asarray(pols, dtype=np.int64)
    grp = np.asarray(groups, dtype=np.int64)
    while len(grp):
        uniq, starts, counts = np.unique(grp, return_index=True, return_counts=True)
        if counts.max() <= 1:
            break
        size = np.repeat(counts, counts)
        pos = np.arange(len(grp)) - np.repeat(starts, counts)
        active = size > 1
        even = pos % 2 == 0
        L = np.nonzero(active & even & (pos + 1 < size))[0]
        P = np.nonzero(active & even & (pos + 1 == size))[0]
        K = np.nonzero(~active)[0]
        R = L + 1

        pl, pr = pol[L], pol[R]
        swap = (pl < 0) & (pr > 0)
        first = np.where(swap, ids[R], ids[L])
        second = np.where(swap, ids[L], ids[R])
        sub = pl != pr
        new_pol = np.where(sub, 1, pl)
        new_w = np.maximum(w[L], w[R]) + 1
        add_ids = bld.add(ADD, len(L), a=first, b=second, width=new_w, flag=sub, layer=layer)
        pass_ids = bld.add(PASS, len(P), a=ids[P], width=w[P], layer=layer)

        ids = np.concatenate([add_ids, pass_ids, ids[K]])
        w = np.concatenate([new_w, w[P], w[K]])
        pol = np.concatenate([new_pol, pol[P], pol[K]])
        nxt_grp = np.concatenate([grp[L], grp[P], grp[K]])
        nxt_pos = np.concatenate([pos[L] // 2, pos[P] // 2, pos[K]])
        order = np.lexsort((nxt_pos, nxt_grp))
        ids, w, pol, grp = ids[order], w[order], pol[order], nxt_grp[order]
    return grp, ids, w, pol


@dataclass
class Netlist:
    kind: np.ndarray
    a: np.ndarray
    b: np.ndarray
    width: np.ndarray
    imm: np.ndarray
    flag: np.ndarray
    layer: np.ndarray
    level: np.ndarray
    input_shape: tuple
    act_format: FixedPointFormat
    layer_grids: dict  # IR layer index -> node-id array (H, W, C); -1 = eliminated
    layer_formats: dict  # IR layer index -> FixedPointFormat of that layer's output
    outputs: np.ndarray  # OutputTap node ids in feature order
    feature_format: FixedPointFormat
    layer_kinds: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    dead_removed: int = 0
    _schedule: list = field(default=None, repr=False)

    def __len__(self):
        return len(self.kind)

    @property
    def k_fe(self) -> int:
        return len(self.outputs)

    def schedule(self):
        """``[(kind, node ids)]`` grouped by level, ascending; cached."""
        if self._schedule is None:
            order = np.lexsort((self.kind, self.level))
            lv, kd = self.level[order], self.kind[order]
            cuts = np.nonzero((np.diff(lv) != 0) | (np.diff(kd) != 0))[0] + 1
            self._schedule = [(int(self.kind[c[0]]), c) for c in np.split(order, cuts) if len(c)]
        return self._schedule

    def dead_count(self) -> int:
        return int(len(self) - np.count_nonzero(_live_mask(self.kind, self.a, self.b, self.level)))

    def is_acyclic(self) -> bool:
        idx = np.arange(len(self))
        ok_a = (self.a < idx)
        ok_b = (self.b < idx)
        return bool(np.all(ok_a) and np.all(ok_b))


def _live_mask(kind, a, b, level):
    live = kind == OUTPUT
    if not len(kind):
        return live
    order = np.argsort(-level, kind="stable")
    lv_sorted = level[order]
    cuts = np.nonzero(np.diff(lv_sorted))[0] + 1
    for chunk in np.split(order, cuts):
        chunk = chunk[live[chunk]]
        for src in (a[chunk], b[chunk]):
            live[src[src >= 0]] = True
    return live


def _check_ready(ir: ModelIR):
    if not ir.quantized:
        raise NetlistError("build_netlist needs a quantized model")
    for i, layer in enumerate(ir.feature_layers()):
        if isinstance(layer, BatchNorm):
            raise NetlistError(f"layer {i}: unfolded batch-norm; run fold_model before hardening")
        if isinstance(layer, Conv):
            raise NetlistError(f"layer {i}: real-valued conv; quantize the model before hardening")
        if isinstance(layer, QuantConv):
            if not layer.folded or layer.bias is None:
                raise NetlistError(f"layer {i}: conv is not folded (no bias codes)")
            acc = layer.acc_format or ir.act_format
            if acc.frac_bits != ir.act_format.frac_bits:
                raise NetlistError(f"layer {i}: bias fraction bits {acc.frac_bits} != activation {ir.act_format.frac_bits}")


def _conv_leaves(layer: QuantConv, in_grid, out_shape):
    spec = layer.spec
    P, Q, M = out_shape
    H, W, _ = in_grid.shape
    Mg = M // spec.groups
    Cg = spec.channels_per_group
    outs, srcs, shifts, negs = [], [], [], []
    ps, qs = np.arange(P), np.arange(Q)
    for r in range(spec.kernel_h):
        hh = ps * spec.stride + r - spec.padding
        vp = (hh >= 0) & (hh < H)
        for s in range(spec.kernel_w):
            ww = qs * spec.stride + s - spec.padding
            vq = (ww >= 0) & (ww < W)
            if not vp.any() or not vq.any():
                continue
            pp, qq = ps[vp], qs[vq]
            for cl in range(Cg):
                ms = np.nonzero(layer.sign[:, r, s, cl])[0]
                if not len(ms):
                    continue
                cs = (ms // Mg) * Cg + cl
                gp, gq, gm = np.meshgrid(pp, qq, np.arange(len(ms)), indexing="ij")
                gp, gq, gm = gp.ravel(), gq.ravel(), gm.ravel()
                m = ms[gm]
                outs.append((gp * Q + gq) * M + m)
                srcs.append(in_grid[hh[gp], ww[gq], cs[gm]])
                shifts.append(layer.exponent[m, r, s, cl].astype(np.int64))
                negs.append(layer.sign[m, r, s, cl] < 0)
    if not outs:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, z.astype(bool)
    out = np.concatenate(outs)
    order = np.argsort(out, kind="stable")
    return out[order], np.concatenate(srcs)[order], np.concatenate(shifts)[order], np.concatenate(negs)[order]


def build_netlist(ir: ModelIR, prune_dead: bool = True) -> Netlist:
    """Harden the feature extractor of a folded, quantized model.

    The classifier is left out; it runs on the NPU.
    """
    _check_ready(ir)
    fmt = ir.act_format
    B = fmt.width
    bld = _Builder()
    shapes = infer_shapes(ir)
    inp = ir.input_shape
    grid_in = bld.add(INPUT, inp.size, width=B, imm=np.arange(inp.size)).reshape(inp.as_tuple())

    grids, formats, kinds, notes = {-1: grid_in}, {-1: fmt}, {}, []
    cur, cur_fmt = grid_in, fmt
    layers = ir.feature_layers()
    fused_relu = set()
    for i, layer in enumerate(layers):
        kinds[i] = layer.kind
        out_shape = shapes[i].as_tuple()
        if isinstance(layer, QuantConv):
            if cur_fmt != fmt:
                raise NetlistError(f"layer {i}: conv input must be in the activation format {fmt}, got {cur_fmt}")
            acc = layer.acc_format or fmt
            out_idx, src, shift, neg = _conv_leaves(layer, cur, out_shape)
            leaves = bld.add(REWIRE, len(src), a=src, width=B, imm=shift, flag=neg, layer=i)
            G = int(np.prod(out_shape))
            pols = np.where(neg, -1, 1)
            g, root, rw, rpol = reduce_tree(bld, leaves, np.full(len(leaves), B), pols, out_idx, layer=i)
            root_of = np.full(G, -1, dtype=np.int64)
            width_of = np.zeros(G, dtype=np.int64)
            pol_of = np.ones(G, dtype=np.int64)
            root_of[g], width_of[g], pol_of[g] = root, rw, rpol
            bias = np.asarray(layer.bias, dtype=np.int64)
            if bias.min(initial=0) < acc.min_code or bias.max(initial=0) > acc.max_code:
                raise NetlistError(f"layer {i}: bias codes exceed accumulator format {acc}")
            m_of = np.arange(G) % out_shape[2]
            empty = root_of < 0
            if empty.any():
                msg = f"layer {i}: {int(empty.sum())} outputs have no nonzero weights; emitting constant bias"
                warnings.warn(msg)
                notes.append(msg)
            bw = np.where(empty, acc.width, np.maximum(width_of, acc.width) + 1)
            node = bld.add(BIAS, G, a=root_of, width=bw, imm=bias[m_of], flag=pol_of < 0, layer=i)
            if i + 1 < len(layers) and isinstance(layers[i + 1], ReLU):
                node = bld.add(RELU, G, a=node, width=bw, layer=i)
                fused_relu.add(i + 1)
            node = bld.add(REQUANT, G, a=node, width=B, imm=acc.frac_bits - fmt.frac_bits, layer=i)
            cur, cur_fmt = node.reshape(out_shape), fmt
        elif isinstance(layer, ReLU):
            if i not in fused_relu:
                node = bld.add(RELU, cur.size, a=cur.ravel(), width=bld.widths(cur.ravel()), layer=i)
                cur = node.reshape(cur.shape)
        elif isinstance(layer, EltwiseAdd):
            other = grids[layer.source]
            if formats[layer.source] != fmt or cur_fmt != fmt:
                raise NetlistError(f"layer {i}: residual operands must be in the activation format")
            node = bld.add(ELTADD, cur.size, a=cur.ravel(), b=other.ravel(), width=B + 1, layer=i)
            node = bld.add(REQUANT, cur.size, a=node, width=B, imm=0, layer=i)
            cur = node.reshape(cur.shape)
        elif isinstance(layer, GlobalSumPool):
            H, W, C = cur.shape
            leaves = cur.transpose(2, 0, 1).reshape(-1)
            grp = np.repeat(np.arange(C), H * W)
            g, root, rw, _ = reduce_tree(bld, leaves, bld.widths(leaves), np.ones(len(leaves)), grp, layer=i)
            cur = root.reshape(1, 1, C)
            depth = math.ceil(math.log2(H * W)) if H * W > 1 else 0
            cur_fmt = FixedPointFormat(cur_fmt.int_bits + depth, cur_fmt.frac_bits)
        else:
            raise NetlistError(f"layer {i}: cannot harden {layer.kind}")
        grids[i], formats[i] = cur, cur_fmt

    flat = cur.ravel()
    outputs = bld.add(OUTPUT, len(flat), a=flat, width=bld.widths(flat), imm=np.arange(len(flat)), layer=len(layers))
    cols = bld.freeze()
    dead = 0
    if prune_dead:
        live = _live_mask(cols["kind"], cols["a"], cols["b"], cols["level"])
        dead = int(len(live) - live.sum())
        if dead:
            new_id = np.cumsum(live) - 1
            new_id[~live] = -1
            cols = {k: v[live] for k, v in cols.items()}
            for k in ("a", "b"):
                cols[k] = np.where(cols[k] >= 0, new_id[cols[k]], -1)
            grids = {k: np.where(g >= 0, new_id[g], -1) for k, g in grids.items()}
            outputs = new_id[outputs]
    return Netlist(
        **{k: cols[k] for k in _FIELDS},
        input_shape=inp.as_tuple(),
        act_format=fmt,
        layer_grids={k: v for k, v in grids.items() if k >= 0},
        layer_formats={k: v for k, v in formats.items() if k >= 0},
        outputs=outputs,
        feature_format=cur_fmt,
        layer_kinds=kinds,
        warnings=notes,
        dead_removed=dead,
    )


# -- statistics -------------------------------------------------------------


@dataclass
class LayerStats:
    adders: dict = field(default_factory=dict)  # cell width (operand bits) -> count
    tree_bits: int = 0
    rewires: int = 0
    passthroughs: int = 0
    bias_adders: int = 0
    bias_bits: int = 0
    relu_gates: int = 0
    requantizers: int = 0
    elt_adders: int = 0
    elt_bits: int = 0

    @property
    def add_count(self) -> int:
        return sum(self.adders.values())

    @property
    def total_bits(self) -> int:
        return self.tree_bits + self.bias_bits + self.elt_bits

    def merge(self, other: "LayerStats"):
        for w, c in other.adders.items():
            self.adders[w] = self.adders.get(w, 0) + c
        for k in ("tree_bits", "rewires", "passthroughs", "bias_adders", "bias_bits", "relu_gates",
                  "requantizers", "elt_adders", "elt_bits"):
            setattr(self, k, getattr(self, k) + getattr(other, k))

    def as_dict(self):
        d = {k: getattr(self, k) for k in ("tree_bits", "rewires", "passthroughs", "bias_adders", "bias_bits",
                                           "relu_gates", "requantizers", "elt_adders", "elt_bits")}
        d["adders"] = {str(k): v for k, v in sorted(self.adders.items())}
        d["add_count"] = self.add_count
        d["total_bits"] = self.total_bits
        return d


@dataclass
class NetlistStats:
    per_layer: dict
    total: LayerStats
    nodes: int = 0
    dead_nodes: int = 0

    def to_json(self, **extra) -> str:
        doc = {
            "nodes": self.nodes,
            "dead_nodes": self.dead_nodes,
            "total": self.total.as_dict(),
            "layers": {str(k): v.as_dict() for k, v in sorted(self.per_layer.items())},
        }
        doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True)


def netlist_stats(n: Netlist) -> NetlistStats:
    """Exact node counts; an adder's cost is its operand width (output width - 1)."""
    per = {}
    total = LayerStats()
    for lay in np.unique(n.layer) if len(n) else []:
        sel = n.layer == lay
        kind, width, a = n.kind[sel], n.width[sel], n.a[sel]
        st = LayerStats()
        add_w = width[kind == ADD] - 1
        st.adders = {int(k): int(v) for k, v in zip(*np.unique(add_w, return_counts=True))}
        st.tree_bits = int(add_w.sum())
        st.rewires = int(np.count_nonzero(kind == REWIRE))
        st.passthroughs = int(np.count_nonzero(kind == PASS))
        real_bias = (kind == BIAS) & (a >= 0)
        st.bias_adders = int(real_bias.sum())
        st.bias_bits = int((width[real_bias] - 1).sum())
        st.relu_gates = int(np.count_nonzero(kind == RELU))
        st.requantizers = int(np.count_nonzero(kind == REQUANT))
        elt = kind == ELTADD
        st.elt_adders = int(elt.sum())
        st.elt_bits = int((width[elt] - 1).sum())
        if lay >= 0 and int(lay) in n.layer_kinds:
            per[int(lay)] = st
            total.merge(st)
    return NetlistStats(per, total, nodes=len(n), dead_nodes=n.dead_count() if len(n) else 0)


# -- HDL emission -----------------------------------------------------------

_CELL = """module hw_addsub #(parameter W = 8) (
  input  wire signed [W-1:0] a,
  input  wire signed [W-1:0] b,
  input  wire                sub,
  output wire signed [W:0]   y
);
  assign y = sub ? ({a[W-1], a} - {b[W-1], b}) : ({a[W-1], a} + {b[W-1], b});
endmodule
"""


def _sext(name, w, to):
    if w == to:
        return name
    return f"{{{{{to - w}{{{name}[{w - 1}]}}}}, {name}}}"


def _const(value, width):
    if value < 0:
        return f"-{width}'sd{-value}"
    return f"{width}'sd{value}"


def emit_hdl(n: Netlist, top: str = "hardened_top") -> str:
    """Structural Verilog-subset text for the netlist; byte-deterministic."""
    B = n.act_format.width
    H, W, C = n.input_shape
    n_in = H * W * C
    feat_w = int(n.width[n.outputs].max()) if len(n.outputs) else B
    lo, hi = n.act_format.min_code, n.act_format.max_code
    out = [
        "// generated: rewire-and-accumulate feature extractor",
        f"// nodes={len(n)} inputs={n_in} outputs={len(n.outputs)} act={n.act_format}",
        _CELL,
        f"module {top} (",
        f"  input  wire [{n_in * B - 1}:0] x_in,",
        f"  output wire [{max(len(n.outputs), 1) * feat_w - 1}:0] y_out",
        ");",
    ]
    for i in range(len(n)):
        k, a, b, w, imm, flag = (int(n.kind[i]), int(n.a[i]), int(n.b[i]), int(n.width[i]), int(n.imm[i]), int(n.flag[i]))
        nm = f"n{i}"
        out.append(f"  wire signed [{w - 1}:0] {nm};")
        if k == INPUT:
            out.append(f"  assign {nm} = x_in[{imm * B + B - 1}:{imm * B}];")
        elif k == REWIRE:
            src = f"n{a}"
            if imm == 0:
                out.append(f"  assign {nm} = {src};")
            elif imm < 0:
                sh = -imm
                if sh >= B:
                    out.append(f"  assign {nm} = {{{B}{{{src}[{B - 1}]}}}};")
                else:
                    out.append(f"  assign {nm} = {{{{{sh}{{{src}[{B - 1}]}}}}, {src}[{B - 1}:{sh}]}};")
            elif imm >= B:
                # only zero survives a shift past the whole word
                sat = f"({src}[{B - 1}] ? {_const(lo, B)} : {_const(hi, B)})"
                out.append(f"  assign {nm} = (~|{src}) ? {B}'sd0 : {sat};")
            else:
                sh = imm
                top_bits = f"{src}[{B - 1}:{B - 1 - sh}]"
                fits = f"(&{top_bits} | ~|{top_bits})"
                shifted = f"{{{src}[{B - 1 - sh}:0], {sh}'b0}}"
                sat = f"({src}[{B - 1}] ? {_const(lo, B)} : {_const(hi, B)})"
                out.append(f"  assign {nm} = {fits} ? {shifted} : {sat};")
        elif k in (ADD, ELTADD):
            cw = w - 1
            wa, wb = int(n.width[a]), int(n.width[b])
            out.append(
                f"  hw_addsub #(.W({cw})) u{i} (.a({_sext(f'n{a}', wa, cw)}), .b({_sext(f'n{b}', wb, cw)}), "
                f".sub(1'b{flag}), .y({nm}));"
            )
        elif k == PASS:
            out.append(f"  assign {nm} = n{a};")
        elif k == BIAS:
            if a < 0:
                out.append(f"  assign {nm} = {_const(imm, w)};")
            else:
                cw = w - 1
                wa = int(n.width[a])
                # bias - x when the subtree carries negative polarity
                out.append(
                    f"  hw_addsub #(.W({cw})) u{i} (.a({_const(imm, cw)}), .b({_sext(f'n{a}', wa, cw)}), "
                    f".sub(1'b{flag}), .y({nm}));"
                )
        elif k == RELU:
            out.append(f"  assign {nm} = {{{w}{{~n{a}[{w - 1}]}}}} & n{a};")
        elif k == REQUANT:
            wa = int(n.width[a])
            kw = wa - imm
            if kw <= w:
                body = f"n{a}[{wa - 1}:{imm}]" if imm else f"n{a}"
                if kw < w:
                    body = f"{{{{{w - kw}{{n{a}[{wa - 1}]}}}}, {body}}}"
                out.append(f"  assign {nm} = {body};")
            else:
                top_bits = f"n{a}[{wa - 1}:{imm + w - 1}]"
                fits = f"(&{top_bits} | ~|{top_bits})"
                body = f"n{a}[{imm + w - 1}:{imm}]"
                sat = f"(n{a}[{wa - 1}] ? {_const(-(1 << (w - 1)), w)} : {_const((1 << (w - 1)) - 1, w)})"
                out.append(f"  assign {nm} = {fits} ? {body} : {sat};")
        elif k == OUTPUT:
            out.append(f"  assign {nm} = n{a};")
            out.append(f"  assign y_out[{imm * feat_w + feat_w - 1}:{imm * feat_w}] = {_sext(nm, w, feat_w)};")
    out.append("endmodule")
    return "\n".join(out) + "\n"
