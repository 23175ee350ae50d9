"""Static analysis: shape trace, parameter and MAC counts, receptive field.

Conventions
-----------
* MACs count convolution multiply-accumulates only: ``out_elems * kh * kw * in/groups``
  for convolutions, ``in_elems * out_channels * kh * kw`` for transposed ones.
* Batch norm, activations, pooling, attention gating and elementwise adds are
  tallied separately as "non-conv ops" (one per touched element).
* FLOPs are reported both as MACs and as ``2 * MACs``.
* Receptive fields follow local convolutional footprints; the global pooling
  inside channel attention and aggregation gates is not a local footprint and
  is left out. Parallel branches take the per-axis maximum.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .layers import RF, Cost

REFERENCE_PARAMS = 620_000
REFERENCE_SIB_PARAMS = 592_300
REFERENCE_FLOPS = 9.7e9
REFERENCE_SIB_FLOPS = 6.74e9
PARAM_TOLERANCE = 0.15
FLOP_TOLERANCE = 0.20


@dataclass
class LayerRow:
    row: int
    name: str
    kind: str
    branch: str
    out_shape: tuple
    params: int
    macs: int
    other_ops: int
    rf: tuple


@dataclass
class AnalysisReport:
    input_shape: tuple
    rows: list = field(default_factory=list)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def other_ops(self):
        return sum(r.other_ops for r in self.rows)

    @property
    def flops_2x(self):
        return 2 * self.macs

    def totals(self):
        return {"params": self.params, "macs": self.macs, "flops_2x": self.flops_2x,
                "other_ops": self.other_ops}

    def to_text(self):
        lines = [
            f"input {self.input_shape}; MACs = conv multiply-accumulates, FLOPs(2x) = 2*MACs,"
            " non-conv ops reported separately",
            f"{'row':>4} {'layer':<24} {'type':<16} {'output (C,H,W)':<18} {'params':>9}"
            f" {'MACs':>14} {'non-conv':>12} {'RF (h,w)':>12}",
        ]
        for r in self.rows:
            shape = "x".join(str(v) for v in r.out_shape[1:])
            rf = f"{r.rf[0]:g},{r.rf[1]:g}"
            lines.append(f"{r.row:>4} {r.name:<24} {r.kind:<16} {shape:<18} {r.params:>9}"
                         f" {r.macs:>14} {r.other_ops:>12} {rf:>12}")
        lines.append(f"total params {self.params}  MACs {self.macs} ({self.macs / 1e9:.3f} G)"
                     f"  FLOPs(2x) {self.flops_2x / 1e9:.3f} G  non-conv ops {self.other_ops}")
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "name", "kind", "branch", "channels", "height", "width", "params",
                    "macs", "other_ops", "rf_h", "rf_w"])
        for r in self.rows:
            w.writerow([r.row, r.name, r.kind, r.branch, *r.out_shape[1:], r.params, r.macs,
                        r.other_ops, f"{r.rf[0]:g}", f"{r.rf[1]:g}"])
        w.writerow(["", "total", "", "", "", "", "", self.params, self.macs, self.other_ops, "", ""])
        return buf.getvalue()


def _walk(graph, input_shape):
    """Yield (desc, in_shape, out_shape, rf_after) in execution order."""
    first = graph.layers[0]
    shape = first.module.out_shape(input_shape)
    rf = first.module.receptive(RF())
    yield first, input_shape, shape, rf
    detail_shape, detail_rf = shape, rf
    for d in graph.sdb_layers:
        out = d.module.out_shape(detail_shape)
        detail_rf = d.module.receptive(detail_rf)
        yield d, detail_shape, out, detail_rf
        detail_shape = out
    for d in graph.layers[1:]:
        if d.branch == "sdb":
            continue
        if d.kind == "FAM":
            rf = RF.max(rf, detail_rf)
        out = d.module.out_shape(shape)
        rf = d.module.receptive(rf)
        yield d, shape, out, rf
        shape = out


def analyze(graph, input_shape=None) -> AnalysisReport:
    if input_shape is None:
        input_shape = (1, 3, *graph.config.input_size)
    input_shape = tuple(input_shape)
    report = AnalysisReport(input_shape)
    for d, in_shape, out_shape, rf in _walk(graph, input_shape):
        cost = d.module.cost(in_shape)
        report.rows.append(LayerRow(d.row, d.name, d.kind, d.branch, out_shape,
                                    d.module.param_count(), cost.macs, cost.other,
                                    (rf.size_h, rf.size_w)))
    return report


def count_params(graph) -> int:
    return sum(d.module.param_count() for d in graph.layers)


def registry_param_count(graph) -> int:
    """Brute-force count: the number of scalars in every registered learnable tensor."""
    return sum(p.data.size for _, p in graph.named_parameters())


def count_macs(graph, input_shape=None) -> int:
    return analyze(graph, input_shape).macs


def layer_costs(graph, input_shape=None):
    return {r.name: Cost(r.macs, r.other_ops) for r in analyze(graph, input_shape).rows}


def receptive_field(graph, up_to_layer=None, input_shape=None):
    """(rf_h, rf_w) after the named layer (or row number); the final layer by default."""
    if input_shape is None:
        input_shape = (1, 3, *graph.config.input_size)
    last = None
    for d, _, _, rf in _walk(graph, tuple(input_shape)):
        last = (rf.size_h, rf.size_w)
        by_row = isinstance(up_to_layer, int) and d.branch != "sdb" and d.row == up_to_layer
        if by_row or up_to_layer == d.name:
            return last
    if up_to_layer is not None:
        raise KeyError(f"no layer {up_to_layer!r}")
    return last


def receptive_field_of(modules, rf: RF = None) -> RF:
    """Compose the receptive field through a plain sequence of modules."""
    rf = rf or RF()
    for m in modules:
        rf = m.receptive(rf)
    return rf


def shape_trace(graph, input_shape=None):
    """(name, (N,C,H,W)) for every layer, with the DRM's internal widths expanded."""
    if input_shape is None:
        input_shape = (1, 3, *graph.config.input_size)
    trace = []
    for d, in_shape, out_shape, _ in _walk(graph, tuple(input_shape)):
        if d.kind == "DRM":
            for label, s in zip(("input", "conv1", "separable", "output"),
                                d.module.stage_shapes(in_shape)):
                trace.append((f"{d.name}.{label}", s))
        else:
            trace.append((d.name, out_shape))
    return trace


def executed_shape_trace(graph, x, training=False):
    """Shapes observed while actually running ``x`` through the graph."""
    from .tensor import no_grad

    trace = []
    with no_grad():
        h = graph.layers[0].module(x, training)
        trace.append((graph.layers[0].name, h.shape))
        detail = h
        for d in graph.sdb_layers:
            if d.kind == "DRM":
                for label, t in zip(("input", "conv1", "separable", "output"),
                                    d.module.stages(detail, training)):
                    trace.append((f"{d.name}.{label}", t.shape))
                detail = t
            else:
                detail = d.module(detail, training)
                trace.append((d.name, detail.shape))
        for d in graph.layers[1:]:
            if d.branch == "sdb":
                continue
            h = d.module(h, detail, training) if d.kind == "FAM" else d.module(h, training)
            trace.append((d.name, h.shape))
    return trace


def budget_checks(report: AnalysisReport, sib_report: AnalysisReport = None):
    """Pass/fail lines comparing totals to the published budgets."""
    checks = []
    rel = abs(report.params - REFERENCE_PARAMS) / REFERENCE_PARAMS
    checks.append(("params", report.params, REFERENCE_PARAMS, rel, rel <= PARAM_TOLERANCE))
    rel_f = min(abs(report.macs - REFERENCE_FLOPS), abs(report.flops_2x - REFERENCE_FLOPS)) / REFERENCE_FLOPS
    checks.append(("flops", report.macs, REFERENCE_FLOPS, rel_f, rel_f <= FLOP_TOLERANCE))
    if sib_report is not None:
        rel_s = abs(sib_report.params - REFERENCE_SIB_PARAMS) / REFERENCE_SIB_PARAMS
        checks.append(("sib_params", sib_report.params, REFERENCE_SIB_PARAMS, rel_s, rel_s <= PARAM_TOLERANCE))
    return checks
