"""Exact integer operation counts for a layer graph.

The counting convention prices a length-k inner product at k multiplies plus
k-1 adds (a bias adds one more), which is the unique rule reproducing the
worked single-conv example this module is calibrated against. Multiplies and
adds are tracked separately in every record: the multiply total also serves
as the fused multiply-accumulate count, the unit used by common complexity
reporting tools (one MAC per inner-product term), while ``total_ops`` is the
full multiply+add figure.

Secondary per-element rules (documented in the report's convention tag):
batch norm costs 2 ops/element in inference form (1 mul + 1 add), pooling
costs window-1 compares-or-adds per output, bilinear resampling 7 ops per
output element (4 mul + 3 add), activations 1 op/element, channel summation
C-1 adds/element. These contribute a few percent at most.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .model import PAD_MULTIPLE, GraphDescription

CONVENTION = (
    "length-k inner product = k mul + (k-1) add (+1 add with bias); "
    "bn eval 1 mul + 1 add/elem; pool (window-1) add/elem; "
    "bilinear 4 mul + 3 add/elem; nearest 0; activation 1 add/elem; "
    "elementwise 1 op/elem; channel_sum (C-1) add/elem. "
    "Fused multiply-accumulate total = multiply total."
)


@dataclass
class LayerCount:
    name: str
    kind: str
    out_shape: tuple[int, int, int]  # (C, H, W)
    multiplies: int
    adds: int

    @property
    def total(self) -> int:
        return self.multiplies + self.adds


@dataclass
class FlopReport:
    layers: list[LayerCount]
    input_shape: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    convention: str = CONVENTION

    @property
    def total_multiplies(self) -> int:
        return sum(l.multiplies for l in self.layers)

    @property
    def total_adds(self) -> int:
        return sum(l.adds for l in self.layers)

    @property
    def total_ops(self) -> int:
        return self.total_multiplies + self.total_adds

    def table(self) -> str:
        rows = [("layer", "kind", "output", "multiplies", "adds", "total")]
        for l in self.layers:
            c, h, w = l.out_shape
            rows.append(
                (l.name, l.kind, f"{c}x{h}x{w}", f"{l.multiplies:,}", f"{l.adds:,}", f"{l.total:,}")
            )
        widths = [max(len(r[i]) for r in rows) for i in range(6)]
        lines = []
        for i, r in enumerate(rows):
            lines.append(
                "  ".join(
                    cell.ljust(widths[j]) if j < 3 else cell.rjust(widths[j])
                    for j, cell in enumerate(r)
                )
            )
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines.append("")
        lines.append(f"input {self.input_shape} padded to {self.padded_shape}")
        lines.append(f"convention: {self.convention}")
        lines.append(
            f"total multiplies (fused-MAC units): {self.total_multiplies:,} "
            f"({gformat(self.total_multiplies)})"
        )
        lines.append(f"total adds: {self.total_adds:,} ({gformat(self.total_adds)})")
        lines.append(
            f"total operations (mul+add): {self.total_ops:,} ({gformat(self.total_ops)})"
        )
        return "\n".join(lines)

    def lines(self) -> str:
        """One machine-parsable record per layer, for diffing."""
        out = []
        for l in self.layers:
            c, h, w = l.out_shape
            out.append(
                f"{l.name} {l.kind} {c} {h} {w} {l.multiplies} {l.adds} {l.total}"
            )
        out.append(f"TOTAL - - - - {self.total_multiplies} {self.total_adds} {self.total_ops}")
        return "\n".join(out) + "\n"


def gformat(ops: int) -> str:
    """Format an operation count in units of 10^9 with two decimals."""
    return f"{ops / 1e9:.2f} G"


def count_conv(
    cin: int, cout: int, kh: int, kw: int, hout: int, wout: int, bias: bool = False
) -> tuple[int, int]:
    """(multiplies, adds) for one convolution with the given output extent."""
    if min(cin, cout, kh, kw, hout, wout) < 1:
        raise ValueError("count_conv: all extents must be positive")
    outputs = hout * wout * cout
    k = kh * kw * cin
    return outputs * k, outputs * (k - 1 + (1 if bias else 0))


def factorization_savings(n: int, cin: int, cout: int, h: int, w: int) -> float:
    """Fraction of operations saved by the bottleneck factorization.

    Compares an n x n convolution (cin -> cout, valid) against a 1 x 1
    channel-collapsing convolution (cin -> 1) followed by the n x n
    convolution from the single channel (1 -> cout). Negative when the
    extra pass costs more than it saves (e.g. n = 1 on a single channel).
    """
    if n % 2 != 1:
        raise ValueError(f"factorization_savings: kernel extent must be odd, got {n}")
    if h < n or w < n:
        raise ValueError(f"factorization_savings: {n}x{n} kernel does not fit {h}x{w}")
    standard = sum(count_conv(cin, cout, n, n, h - n + 1, w - n + 1))
    collapsed = sum(count_conv(cin, 1, 1, 1, h, w))
    expanded = sum(count_conv(1, cout, n, n, h - n + 1, w - n + 1))
    return 1.0 - (collapsed + expanded) / standard


def _pool_out(extent: int, window: int, stride: int, pad: int, layer: str, dim: str) -> int:
    padded = extent + 2 * pad
    if window > padded or window < 1:
        raise ShapeError(f"{layer}: window {window} invalid for padded extent {padded} ({dim})")
    return (padded - window) // stride + 1


def count_graph(
    graph: GraphDescription,
    input_shape: tuple[int, int, int],
    pad_rule: bool = True,
) -> FlopReport:
    """Walk the graph, resolving shapes and per-layer costs exactly.

    ``input_shape`` is (C, H, W). With ``pad_rule`` the spatial extents are
    first rounded up to the execution pad multiple, matching what the runtime
    actually computes on.
    """
    cin0, h0, w0 = (int(v) for v in input_shape)
    if pad_rule:
        hp = h0 + (-h0) % PAD_MULTIPLE
        wp = w0 + (-w0) % PAD_MULTIPLE
    else:
        hp, wp = h0, w0
    shapes: dict[str, tuple[int, int, int]] = {}
    counts: list[LayerCount] = []

    for l in graph.layers:
        a = l.attrs
        try:
            ins = [shapes[s] for s in l.inputs]
        except KeyError as e:
            raise ShapeError(f"{l.name}: input {e.args[0]!r} has no resolved shape") from None
        mult = add = 0
        if l.kind == "input":
            out = (a["channels"], hp, wp)
        elif l.kind == "conv":
            c, h, w = ins[0]
            if c != a["cin"]:
                raise ShapeError(f"{l.name}: expects {a['cin']} channels, got {c}")
            ho = _pool_out(h, a["kh"], a["stride_h"], a["pad_h"], l.name, "height")
            wo = _pool_out(w, a["kw"], a["stride_w"], a["pad_w"], l.name, "width")
            out = (a["cout"], ho, wo)
            mult, add = count_conv(a["cin"], a["cout"], a["kh"], a["kw"], ho, wo, a.get("bias", False))
        elif l.kind in ("maxpool", "avgpool"):
            c, h, w = ins[0]
            ho = _pool_out(h, a["window_h"], a["stride_h"], a["pad_h"], l.name, "height")
            wo = _pool_out(w, a["window_w"], a["stride_w"], a["pad_w"], l.name, "width")
            out = (c, ho, wo)
            add = c * ho * wo * (a["window_h"] * a["window_w"] - 1)
        elif l.kind == "adaptive_avgpool":
            c, h, w = ins[0]
            oh, ow = a["out_h"], a["out_w"]
            if oh > h or ow > w:
                raise ShapeError(f"{l.name}: target {(oh, ow)} exceeds input extent {(h, w)}")
            out = (c, oh, ow)
            for i in range(oh):
                rh = -(-(i + 1) * h // oh) - (i * h // oh)
                for j in range(ow):
                    rw = -(-(j + 1) * w // ow) - (j * w // ow)
                    add += c * (rh * rw - 1)
        elif l.kind == "batchnorm":
            c, h, w = ins[0]
            out = ins[0]
            mult = c * h * w
            add = c * h * w
        elif l.kind in ("relu", "sigmoid"):
            out = ins[0]
            c, h, w = out
            add = c * h * w
        elif l.kind == "interpolate":
            c, h, w = ins[0]
            if "factor" in a:
                out = (c, h * a["factor"], w * a["factor"])
            else:
                mc, mh, mw = shapes[a["match"]]
                out = (c, mh, mw)
            if a["method"] == "bilinear":
                n_el = out[0] * out[1] * out[2]
                mult = 4 * n_el
                add = 3 * n_el
        elif l.kind == "concat":
            c0, h, w = ins[0]
            for k, (c, hh, ww) in enumerate(ins[1:], start=1):
                if (hh, ww) != (h, w):
                    raise ShapeError(
                        f"{l.name}: input {k} spatial {hh}x{ww} != {h}x{w}"
                    )
            out = (sum(s[0] for s in ins), h, w)
        elif l.kind == "channel_sum":
            c, h, w = ins[0]
            out = (1, h, w)
            add = h * w * (c - 1)
        elif l.kind in ("add", "sub", "scalar_add"):
            out = ins[0]
            c, h, w = out
            add = c * h * w
        elif l.kind in ("mul", "div"):
            out = ins[0]
            c, h, w = out
            mult = c * h * w
        else:
            raise ShapeError(f"{l.name}: no counting rule for kind {l.kind!r}")
        shapes[l.name] = out
        counts.append(LayerCount(l.name, l.kind, out, int(mult), int(add)))

    return FlopReport(
        layers=counts,
        input_shape=(cin0, h0, w0),
        padded_shape=(cin0, hp, wp),
    )
