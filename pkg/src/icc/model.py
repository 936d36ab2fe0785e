"""The counting network as a declarative layer graph.

``build_icc`` assembles the full model: a 12-block Inception-style stem
(7 plain stem layers, three A blocks, one grid-reduction block, one block
with 7-factorized kernels) tapped at three depths, a multi-scale contextual
module on the shallowest tap, feature fusion, and a decoder that emits a
single-channel density map at 1/8 the input resolution.

The graph is plain data: an ordered list of layer records with named inputs.
The executor walks it with the autodiff tensors; the operation-count analyzer
walks the same records. Graphs serialize to a line-oriented text format so
external tools can consume the identical description.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

BN_EPS = 1e-3
BN_MOMENTUM = 0.1
CONTEXT_WEIGHT_EPS = 1e-6
PAD_MULTIPLE = 32
OUTPUT_STRIDE = 8


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    tap: str | None = None
    block: str | None = None


@dataclass
class ModelConfig:
    in_channels: int = 3
    use_contextual_module: bool = True
    use_inception_blocks: bool = True
    contextual_scales: tuple[int, ...] = (1, 2, 3, 6)
    decoder_channels: tuple[int, ...] = (256, 128, 64)
    feature3_upsample: str = "bilinear"
    width_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        scales = tuple(int(s) for s in self.contextual_scales)
        if any(s < 1 for s in scales):
            raise ConfigError(f"contextual scales must be >= 1, got {scales}")
        if any(b >= a for a, b in zip(scales[1:], scales)):
            raise ConfigError(f"contextual scales must be strictly increasing, got {scales}")
        self.contextual_scales = scales
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if not self.decoder_channels:
            raise ConfigError("decoder channel plan must not be empty")
        if self.width_scale <= 0:
            raise ConfigError(f"width scale must be positive, got {self.width_scale}")
        if self.feature3_upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample method {self.feature3_upsample!r}")

    @property
    def ablation(self) -> str | None:
        if not self.use_contextual_module and not self.use_inception_blocks:
            return "no-context+no-inception"
        if not self.use_contextual_module:
            return "no-context"
        if not self.use_inception_blocks:
            return "no-inception"
        return None


@dataclass
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str  # conv_weight | conv_bias | bn_gamma | bn_beta | bn_running_mean | bn_running_var
    trainable: bool


@dataclass
class GraphDescription:
    layers: list[Layer]
    taps: dict[str, str]
    ablation: str | None = None
    config: ModelConfig | None = None

    def layer_map(self) -> dict[str, Layer]:
        return {l.name: l for l in self.layers}

    def parameters(self) -> list[ParamSpec]:
        specs: list[ParamSpec] = []
        for l in self.layers:
            if l.kind == "conv":
                a = l.attrs
                specs.append(
                    ParamSpec(f"{l.name}.w", (a["cout"], a["cin"], a["kh"], a["kw"]), "conv_weight", True)
                )
                if a.get("bias"):
                    specs.append(ParamSpec(f"{l.name}.b", (a["cout"],), "conv_bias", True))
            elif l.kind == "batchnorm":
                c = (l.attrs["channels"],)
                specs.append(ParamSpec(f"{l.name}.gamma", c, "bn_gamma", True))
                specs.append(ParamSpec(f"{l.name}.beta", c, "bn_beta", True))
                specs.append(ParamSpec(f"{l.name}.running_mean", c, "bn_running_mean", False))
                specs.append(ParamSpec(f"{l.name}.running_var", c, "bn_running_var", False))
        return specs

    def backbone_blocks(self) -> list[str]:
        seen: list[str] = []
        for l in self.layers:
            if l.block and l.block not in seen:
                seen.append(l.block)
        return seen

    # -- text serialization ---------------------------------------------

    def to_text(self) -> str:
        lines = ["ICCGRAPH 1", f"ablation {self.ablation or 'none'}"]
        for tap, name in self.taps.items():
            lines.append(f"tap {tap} {name}")
        for l in self.layers:
            parts = [f"layer {l.name} kind={l.kind}"]
            if l.inputs:
                parts.append("inputs=" + ",".join(l.inputs))
            for k in sorted(l.attrs):
                parts.append(f"{k}={_format_attr(l.attrs[k])}")
            if l.tap:
                parts.append(f"tap={l.tap}")
            if l.block:
                parts.append(f"block={l.block}")
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GraphDescription":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "ICCGRAPH 1":
            raise ValueError("not a graph description (missing 'ICCGRAPH 1' header)")
        ablation: str | None = None
        taps: dict[str, str] = {}
        layers: list[Layer] = []
        for ln in lines[1:]:
            fields = ln.split()
            if fields[0] == "ablation":
                ablation = None if fields[1] == "none" else fields[1]
            elif fields[0] == "tap":
                taps[fields[1]] = fields[2]
            elif fields[0] == "layer":
                name = fields[1]
                kind = ""
                inputs: tuple[str, ...] = ()
                attrs: dict = {}
                tap = block = None
                for tok in fields[2:]:
                    key, _, val = tok.partition("=")
                    if key == "kind":
                        kind = val
                    elif key == "inputs":
                        inputs = tuple(val.split(","))
                    elif key == "tap":
                        tap = val
                    elif key == "block":
                        block = val
                    else:
                        attrs[key] = _parse_attr(val)
                layers.append(Layer(name, kind, inputs, attrs, tap, block))
            else:
                raise ValueError(f"unrecognized graph line: {ln!r}")
        return cls(layers=layers, taps=taps, ablation=ablation)


def _format_attr(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_attr(s: str):
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


class _Builder:
    def __init__(self, width_scale: float):
        self.layers: list[Layer] = []
        self.width_scale = width_scale
        self.channels: dict[str, int] = {}

    def w(self, c: int) -> int:
        return max(1, int(round(c * self.width_scale)))

    def emit(self, name, kind, inputs=(), attrs=None, tap=None, block=None, channels=None):
        self.layers.append(Layer(name, kind, tuple(inputs), dict(attrs or {}), tap, block))
        if channels is None and inputs:
            channels = self.channels[inputs[0]]
        self.channels[name] = channels
        return name

    def conv(self, name, src, cout, k, stride=1, pad=None, bias=False, block=None, tap=None):
        kh, kw = (k, k) if isinstance(k, int) else k
        if pad is None:
            pad = ((kh - 1) // 2, (kw - 1) // 2)
        ph, pw = (pad, pad) if isinstance(pad, int) else pad
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
        cin = self.channels[src]
        return self.emit(
            name,
            "conv",
            [src],
            dict(cin=cin, cout=cout, kh=kh, kw=kw, stride_h=sh, stride_w=sw,
                 pad_h=ph, pad_w=pw, bias=bias),
            tap=tap,
            block=block,
            channels=cout,
        )

    def conv_bn_relu(self, name, src, cout, k, stride=1, pad=None, block=None):
        c = self.conv(f"{name}.conv", src, cout, k, stride=stride, pad=pad, block=block)
        b = self.emit(f"{name}.bn", "batchnorm", [c], dict(channels=cout), block=block)
        return self.emit(f"{name}.relu", "relu", [b], block=block)


def _inception_a(b: _Builder, name: str, src: str, pool_features: int) -> str:
    """Four-branch block: 1x1, 5x5 behind a bottleneck, double 3x3, pooled 1x1."""
    b1 = b.conv_bn_relu(f"{name}.b1", src, b.w(64), 1, block=name)
    b5 = b.conv_bn_relu(f"{name}.b5_1", src, b.w(48), 1, block=name)
    b5 = b.conv_bn_relu(f"{name}.b5_2", b5, b.w(64), 5, block=name)
    b3 = b.conv_bn_relu(f"{name}.b3_1", src, b.w(64), 1, block=name)
    b3 = b.conv_bn_relu(f"{name}.b3_2", b3, b.w(96), 3, block=name)
    b3 = b.conv_bn_relu(f"{name}.b3_3", b3, b.w(96), 3, block=name)
    pool = b.emit(
        f"{name}.pool", "avgpool", [src],
        dict(window_h=3, window_w=3, stride_h=1, stride_w=1, pad_h=1, pad_w=1),
        block=name,
    )
    bp = b.conv_bn_relu(f"{name}.pool_proj", pool, b.w(pool_features), 1, block=name)
    out_c = sum(b.channels[x] for x in (b1, b5, b3, bp))
    return b.emit(f"{name}.concat", "concat", [b1, b5, b3, bp], block=name, channels=out_c)


def _inception_b_reduction(b: _Builder, name: str, src: str) -> str:
    """Grid-reduction block: halves the spatial extents, widens channels."""
    b3 = b.conv_bn_relu(f"{name}.b3", src, b.w(384), 3, stride=2, block=name)
    db = b.conv_bn_relu(f"{name}.db_1", src, b.w(64), 1, block=name)
    db = b.conv_bn_relu(f"{name}.db_2", db, b.w(96), 3, block=name)
    db = b.conv_bn_relu(f"{name}.db_3", db, b.w(96), 3, stride=2, block=name)
    pool = b.emit(
        f"{name}.pool", "maxpool", [src],
        dict(window_h=3, window_w=3, stride_h=2, stride_w=2, pad_h=1, pad_w=1),
        block=name,
    )
    out_c = sum(b.channels[x] for x in (b3, db, pool))
    return b.emit(f"{name}.concat", "concat", [b3, db, pool], block=name, channels=out_c)


def _inception_c(b: _Builder, name: str, src: str, c7: int = 128) -> str:
    """Block built from 1x1 kernels and 7-factorized (7x1 / 1x7) pairs only."""
    b1 = b.conv_bn_relu(f"{name}.b1", src, b.w(192), 1, block=name)
    b7 = b.conv_bn_relu(f"{name}.b7_1", src, b.w(c7), 1, block=name)
    b7 = b.conv_bn_relu(f"{name}.b7_2", b7, b.w(c7), (1, 7), block=name)
    b7 = b.conv_bn_relu(f"{name}.b7_3", b7, b.w(192), (7, 1), block=name)
    db = b.conv_bn_relu(f"{name}.db_1", src, b.w(c7), 1, block=name)
    db = b.conv_bn_relu(f"{name}.db_2", db, b.w(c7), (7, 1), block=name)
    db = b.conv_bn_relu(f"{name}.db_3", db, b.w(c7), (1, 7), block=name)
    db = b.conv_bn_relu(f"{name}.db_4", db, b.w(c7), (7, 1), block=name)
    db = b.conv_bn_relu(f"{name}.db_5", db, b.w(192), (1, 7), block=name)
    pool = b.emit(
        f"{name}.pool", "avgpool", [src],
        dict(window_h=3, window_w=3, stride_h=1, stride_w=1, pad_h=1, pad_w=1),
        block=name,
    )
    bp = b.conv_bn_relu(f"{name}.pool_proj", pool, b.w(192), 1, block=name)
    out_c = sum(b.channels[x] for x in (b1, b7, db, bp))
    return b.emit(f"{name}.concat", "concat", [b1, b7, db, bp], block=name, channels=out_c)


def _contextual_module(b: _Builder, src: str, scales: tuple[int, ...]) -> str:
    """Multi-scale context: pooled features, contrast weights, gated fusion.

    For each scale s the base map is average-pooled to an s x s grid, mixed
    by a 1x1 conv, resized back, and compared against the base; a sigmoid
    gate weights each scale and the gated sum is normalized by the total
    gate mass. Output is concat(base, fused) with twice the channels.
    """
    c = b.channels[src]
    scale_feats = []
    gates = []
    for s in scales:
        pool = b.emit(f"context.s{s}.pool", "adaptive_avgpool", [src], dict(out_h=s, out_w=s))
        conv = b.conv(f"context.s{s}.mix", pool, c, 1, bias=False)
        up = b.emit(
            f"context.s{s}.up", "interpolate", [conv], dict(method="bilinear", match=src)
        )
        contrast = b.emit(f"context.s{s}.contrast", "sub", [up, src])
        wconv = b.conv(f"context.s{s}.gate", contrast, c, 1, bias=True)
        gate = b.emit(f"context.s{s}.sigmoid", "sigmoid", [wconv])
        scale_feats.append(b.emit(f"context.s{s}.gated", "mul", [gate, up]))
        gates.append(gate)

    num = scale_feats[0]
    den = gates[0]
    for i in range(1, len(scales)):
        num = b.emit(f"context.num_{i}", "add", [num, scale_feats[i]])
        den = b.emit(f"context.den_{i}", "add", [den, gates[i]])
    den = b.emit("context.den_eps", "scalar_add", [den], dict(value=CONTEXT_WEIGHT_EPS))
    fused = b.emit("context.fused", "div", [num, den])
    return b.emit("context.out", "concat", [src, fused], channels=2 * c)


def build_icc(config: ModelConfig) -> GraphDescription:
    """Assemble the full counting network for the given configuration."""
    b = _Builder(config.width_scale)
    b.emit("input", "input", (), dict(channels=config.in_channels), channels=config.in_channels)

    x = b.conv_bn_relu("stem.conv1", "input", b.w(32), 3, stride=2, block="stem.conv1")
    x = b.conv_bn_relu("stem.conv2", x, b.w(32), 3, block="stem.conv2")
    x = b.conv_bn_relu("stem.conv3", x, b.w(64), 3, block="stem.conv3")
    x = b.emit(
        "stem.pool1", "maxpool", [x],
        dict(window_h=3, window_w=3, stride_h=2, stride_w=2, pad_h=1, pad_w=1),
        block="stem.pool1",
    )
    x = b.conv_bn_relu("stem.conv4", x, b.w(80), 1, block="stem.conv4")
    x = b.conv_bn_relu("stem.conv5", x, b.w(192), 3, block="stem.conv5")
    feature1 = b.emit(
        "stem.pool2", "maxpool", [x],
        dict(window_h=3, window_w=3, stride_h=2, stride_w=2, pad_h=1, pad_w=1),
        tap="Feature1",
        block="stem.pool2",
    )

    taps = {"Feature1": feature1}
    fusion_inputs: list[str] = []

    if config.use_contextual_module:
        fusion_inputs.append(_contextual_module(b, feature1, config.contextual_scales))

    if config.use_inception_blocks:
        a = _inception_a(b, "inception_a1", feature1, 32)
        a = _inception_a(b, "inception_a2", a, 64)
        feature2 = _inception_a(b, "inception_a3", a, 64)
        taps["Feature2"] = feature2
        red = _inception_b_reduction(b, "reduction_b", feature2)
        feature3 = _inception_c(b, "inception_c1", red, c7=128)
        taps["Feature3"] = feature3
        f3_up = b.emit(
            "feature3_up", "interpolate", [feature3],
            dict(method=config.feature3_upsample, factor=2),
        )
        fusion_inputs.extend([feature2, f3_up])

    if not fusion_inputs:
        raise ConfigError(
            "both context paths disabled (no contextual module, no inception blocks): "
            "fusion input would be empty"
        )
    if len(fusion_inputs) > 1:
        fused = b.emit(
            "fusion", "concat", fusion_inputs,
            channels=sum(b.channels[n] for n in fusion_inputs),
        )
    else:
        fused = fusion_inputs[0]

    x = fused
    for i, cout in enumerate(config.decoder_channels):
        k = 1 if i == 0 else 3
        x = b.conv(f"decoder.conv{i + 1}", x, b.w(cout), k, bias=True)
        x = b.emit(f"decoder.relu{i + 1}", "relu", [x])
    out = b.emit("density", "channel_sum", [x], tap="output", channels=1)
    taps["output"] = out

    # annotate taps on the layer records themselves for readability
    layers = []
    for l in b.layers:
        tap = l.tap
        for t, n in taps.items():
            if n == l.name:
                tap = t
        layers.append(replace(l, tap=tap))
    return GraphDescription(layers=layers, taps=taps, ablation=config.ablation, config=config)


def build_vgg16_frontend(in_channels: int = 3) -> GraphDescription:
    """The 10-conv front end of a 16-layer VGG, for cost/size comparisons."""
    b = _Builder(1.0)
    b.emit("input", "input", (), dict(channels=in_channels), channels=in_channels)
    plan = [(64, 2), (128, 2), (256, 3), (512, 3)]
    x = "input"
    for stage, (c, reps) in enumerate(plan, start=1):
        for r in range(1, reps + 1):
            x = b.conv(f"conv{stage}_{r}", x, c, 3, bias=True)
            x = b.emit(f"relu{stage}_{r}", "relu", [x])
        if stage < len(plan):
            x = b.emit(
                f"pool{stage}", "maxpool", [x],
                dict(window_h=2, window_w=2, stride_h=2, stride_w=2, pad_h=0, pad_w=0),
            )
    return GraphDescription(layers=b.layers, taps={"output": x}, ablation=None, config=None)


# -- parameters ---------------------------------------------------------------


HEAD_INIT_SCALE = 0.01


def _output_head_convs(graph: GraphDescription) -> set[str]:
    """Conv layers feeding the channel-summed output (through activations).

    The density head starts tiny so initial count predictions sit near zero;
    a full-strength head predicts counts orders of magnitude too large and
    the first epochs of count correction crush its rectifier units dead.
    """
    by_name = graph.layer_map()
    heads: set[str] = set()
    for l in graph.layers:
        if l.kind != "channel_sum" or l.name not in graph.taps.values():
            continue
        cur = by_name.get(l.inputs[0])
        while cur is not None and cur.kind in ("relu", "sigmoid", "batchnorm"):
            cur = by_name.get(cur.inputs[0])
        if cur is not None and cur.kind == "conv":
            heads.add(cur.name)
    return heads


def init_parameters(graph: GraphDescription, seed: int, dtype=None) -> dict[str, np.ndarray]:
    """Fan-in-scaled random initialization, deterministic per seed.

    Conv weights draw from N(0, 2/fan_in); biases start at zero, batch-norm
    scale at one, shift at zero, running statistics at (0, 1). The conv
    feeding the summed density output is additionally scaled down (see
    ``_output_head_convs``).
    """
    dtype = np.dtype(dtype or T.default_dtype())
    rng = np.random.default_rng(seed)
    heads = _output_head_convs(graph)
    params: dict[str, np.ndarray] = {}
    for spec in graph.parameters():
        if spec.role == "conv_weight":
            fan_in = int(np.prod(spec.shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.shape)
            if spec.name.removesuffix(".w") in heads:
                arr *= HEAD_INIT_SCALE
        elif spec.role in ("conv_bias", "bn_beta", "bn_running_mean"):
            arr = np.zeros(spec.shape)
        else:  # bn_gamma, bn_running_var
            arr = np.ones(spec.shape)
        params[spec.name] = arr.astype(dtype)
    return params


def parameter_count(graph: GraphDescription, trainable_only: bool = True) -> int:
    return sum(
        int(np.prod(s.shape))
        for s in graph.parameters()
        if s.trainable or not trainable_only
    )


# -- execution ----------------------------------------------------------------


@dataclass
class ForwardResult:
    output: T.Tensor
    taps: dict[str, T.Tensor]
    param_tensors: dict[str, T.Tensor]
    activations: dict[str, T.Tensor] | None = None
    _ran_backward: bool = False

    def backward(self, seed: np.ndarray) -> dict[str, np.ndarray]:
        """Reverse sweep from the output; returns the parameter gradient map.

        Parameters the output does not depend on report zero gradients.
        """
        self.output.backward(seed)
        self._ran_backward = True
        return self.gradients()

    def gradients(self) -> dict[str, np.ndarray]:
        if not self._ran_backward:
            raise RuntimeError("gradients requested before backward() ran")
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.param_tensors.items()
        }


def forward(
    graph: GraphDescription,
    params: dict[str, np.ndarray],
    x: np.ndarray,
    mode: str = "eval",
    requires_grad: bool = False,
    keep_activations: bool = False,
) -> ForwardResult:
    """Execute the graph on a batch [N, C, H, W].

    ``mode`` selects batch-norm behaviour (train updates running statistics
    in place). With ``requires_grad`` the result supports ``backward``;
    ``keep_activations`` retains every intermediate (debugging aid, costs
    memory).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"forward: input must be [N, C, H, W], got shape {x.shape}")

    trainable = {s.name for s in graph.parameters() if s.trainable}
    param_tensors = {
        name: T.Tensor(params[name], requires_grad=requires_grad)
        for name in trainable
        if name in params
    }
    missing = trainable - set(param_tensors)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)[:5]}")

    keep = set(graph.taps.values())
    consumers: dict[str, int] = {}
    for l in graph.layers:
        for src in l.inputs:
            consumers[src] = consumers.get(src, 0) + 1

    values: dict[str, T.Tensor] = {}
    taps: dict[str, T.Tensor] = {}

    def run():
        for l in graph.layers:
            ins = [values[s] for s in l.inputs]
            a = l.attrs
            if l.kind == "input":
                if x.shape[1] != a["channels"]:
                    raise ShapeError(
                        f"forward: input has {x.shape[1]} channels, graph expects "
                        f"{a['channels']} (dim 1)"
                    )
                out = T.Tensor(x)
            elif l.kind == "conv":
                out = T.conv2d(
                    ins[0],
                    param_tensors[f"{l.name}.w"],
                    stride=(a["stride_h"], a["stride_w"]),
                    padding=(a["pad_h"], a["pad_w"]),
                    bias=param_tensors.get(f"{l.name}.b") if a.get("bias") else None,
                )
            elif l.kind == "batchnorm":
                out = T.batchnorm2d(
                    ins[0],
                    param_tensors[f"{l.name}.gamma"],
                    param_tensors[f"{l.name}.beta"],
                    params[f"{l.name}.running_mean"],
                    params[f"{l.name}.running_var"],
                    mode=mode,
                    eps=BN_EPS,
                    momentum=BN_MOMENTUM,
                )
            elif l.kind == "relu":
                out = T.relu(ins[0])
            elif l.kind == "sigmoid":
                out = T.sigmoid(ins[0])
            elif l.kind == "maxpool":
                out = T.maxpool2d(
                    ins[0], (a["window_h"], a["window_w"]),
                    stride=(a["stride_h"], a["stride_w"]),
                    padding=(a["pad_h"], a["pad_w"]),
                )
            elif l.kind == "avgpool":
                out = T.avgpool2d(
                    ins[0], (a["window_h"], a["window_w"]),
                    stride=(a["stride_h"], a["stride_w"]),
                    padding=(a["pad_h"], a["pad_w"]),
                )
            elif l.kind == "adaptive_avgpool":
                out = T.adaptive_avgpool2d(ins[0], a["out_h"], a["out_w"])
            elif l.kind == "interpolate":
                if "factor" in a:
                    out = T.upsample(ins[0], a["factor"], method=a["method"])
                else:
                    ref = values[a["match"]]
                    out = T.interpolate(ins[0], ref.shape[2], ref.shape[3], method=a["method"])
            elif l.kind == "concat":
                out = T.concat_channels(ins)
            elif l.kind == "channel_sum":
                out = T.channel_sum(ins[0])
            elif l.kind == "add":
                out = T.add(ins[0], ins[1])
            elif l.kind == "sub":
                out = T.sub(ins[0], ins[1])
            elif l.kind == "mul":
                out = T.mul(ins[0], ins[1])
            elif l.kind == "div":
                out = T.div(ins[0], ins[1])
            elif l.kind == "scalar_add":
                out = T.add(ins[0], float(a["value"]))
            else:
                raise ValueError(f"unknown layer kind {l.kind!r} ({l.name})")
            values[l.name] = out
            if l.name in graph.taps.values():
                taps_for = [t for t, n in graph.taps.items() if n == l.name]
                for t in taps_for:
                    taps[t] = out
            for src in l.inputs:
                consumers[src] -= 1
                if (
                    not keep_activations
                    and consumers[src] == 0
                    and src not in keep
                    and not _referenced_later(graph, src, l)
                ):
                    values.pop(src, None)

    if requires_grad:
        run()
    else:
        with T.no_grad():
            run()

    output = taps.get("output") or values[graph.layers[-1].name]
    return ForwardResult(
        output=output,
        taps=taps,
        param_tensors=param_tensors,
        activations=values if keep_activations else None,
    )


def _referenced_later(graph: GraphDescription, name: str, current: Layer) -> bool:
    # interpolate 'match' references need the target's shape, so keep those
    reached = False
    for l in graph.layers:
        if l is current:
            reached = True
            continue
        if reached and l.attrs.get("match") == name:
            return True
    return False


# -- whole-image prediction ----------------------------------------------------


def pad_to_multiple(image: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad the trailing two axes up to the next multiple."""
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(image, pad, mode=mode)


def predict_density(
    graph: GraphDescription, params: dict[str, np.ndarray], image: np.ndarray
) -> np.ndarray:
    """Run one [C, H, W] image through the net; returns the stride-8 map.

    The image is reflect-padded to a multiple of 32 and the output cropped
    back to ceil(H/8) x ceil(W/8).
    """
    if image.ndim != 3:
        raise ShapeError(f"predict_density: image must be [C, H, W], got {image.shape}")
    h, w = image.shape[1:]
    padded = pad_to_multiple(image)
    result = forward(graph, params, padded[None], mode="eval", requires_grad=False)
    out = result.output.data[0, 0]
    return out[: -(-h // OUTPUT_STRIDE), : -(-w // OUTPUT_STRIDE)].copy()
