"""Dense tensors with reverse-mode differentiation over a fixed operator set.

Everything is numpy underneath. A Tensor wraps one contiguous float array
(float32 by default, float64 when gradient checks need the headroom) and the
operators below record just enough of the forward pass to run the reverse
sweep. The operator set is exactly what the counting network needs: conv2d
(plus the two-stage separable form), max/avg pooling, adaptive average
pooling, batch norm, relu/sigmoid, bilinear/nearest resizing, channel
concat/sum and elementwise arithmetic.

Every forward op validates that its output is finite; NaN/Inf raises
NumericError immediately instead of propagating silently.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select the scalar type (np.float32 or np.float64) for new tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager: ops inside do not record the backward graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite values in output")


def _as_pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ShapeError(f"{name} must be an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    # -- reverse sweep ------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``seed`` is the upstream gradient; it defaults to 1 and is only
        optional when the tensor is scalar.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed.shape} != tensor shape {self.data.shape}"
                )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward, "div")


def tensor_sum(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), backward, "sum")


def relu(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = expit(x.data).astype(x.data.dtype)

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


# -- convolution ------------------------------------------------------------


def _conv_out_extent(extent: int, k: int, stride: int, pad: int, dim: str) -> int:
    padded = extent + 2 * pad
    if k > padded:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input extent {padded} along {dim}")
    return (padded - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(n, c * kh * kw, ho * wo), (ho, wo)


def _col2im(cols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * ph, w + 2 * pw
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols6[:, :, i, j]
    return xp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x, weight, stride=1, padding=0, bias=None) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``weight`` has shape [Cout, Cin, kh, kw]; zero padding, integer strides.
    """
    x, weight = _coerce(x), _coerce(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D NCHW, got {x.ndim}-D")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {weight.ndim}-D")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = weight.shape
    if cin != cin_k:
        raise ShapeError(
            f"conv2d: input channels {cin} != kernel input channels {cin_k} (dim 1)"
        )
    sh, sw = _as_pair(stride, "stride")
    ph, pw = _as_pair(padding, "padding")
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {(ph, pw)}")
    ho = _conv_out_extent(h, kh, sh, ph, "height (dim 2)")
    wo = _conv_out_extent(w, kw, sw, pw, "width (dim 3)")
    b = None
    if bias is not None:
        b = _coerce(bias)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},) (dim 0)")

    cols, _ = _im2col(x.data, kh, kw, sh, sw, ph, pw)  # [N, Cin*kh*kw, Ho*Wo]
    wmat = weight.data.reshape(cout, -1)
    out_data = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out_data = out_data + b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gmat = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            _accumulate(x, _col2im(gcols, x.data.shape, kh, kw, sh, sw, ph, pw))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if b is None else (x, weight, b)
    return _make(out_data, parents, backward, "conv2d")


def separable_conv2d(x, kernel_v, kernel_h, stride=1, padding=(0, 0), bias=None) -> Tensor:
    """n x 1 convolution followed by 1 x n; equals the composed conv2d pair.

    ``padding`` applies per stage: (pad for the vertical stage along H,
    pad for the horizontal stage along W).
    """
    kernel_v, kernel_h = _coerce(kernel_v), _coerce(kernel_h)
    if kernel_v.ndim != 4 or kernel_v.shape[3] != 1:
        raise ShapeError(f"separable_conv2d: vertical kernel must be [C,C,n,1], got {kernel_v.shape}")
    if kernel_h.ndim != 4 or kernel_h.shape[2] != 1:
        raise ShapeError(f"separable_conv2d: horizontal kernel must be [C,C,1,n], got {kernel_h.shape}")
    ph, pw = _as_pair(padding, "padding")
    mid = conv2d(x, kernel_v, stride=(stride, 1) if isinstance(stride, int) else stride,
                 padding=(ph, 0))
    return conv2d(mid, kernel_h, stride=1, padding=(0, pw), bias=bias)


# -- pooling ----------------------------------------------------------------


def _pool_prepare(x: Tensor, window, stride, padding, fill: float):
    n, c, h, w = x.shape
    wh, ww = _as_pair(window, "window")
    sh, sw = _as_pair(stride, "stride")
    ph, pw = _as_pair(padding, "padding")
    if wh < 1 or ww < 1:
        raise ShapeError(f"pool: empty window {(wh, ww)}")
    if wh > h + 2 * ph or ww > w + 2 * pw:
        raise ShapeError(
            f"pool: window {(wh, ww)} exceeds padded extent {(h + 2 * ph, w + 2 * pw)}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    view = np.lib.stride_tricks.sliding_window_view(xp, (wh, ww), axis=(2, 3))
    view = view[:, :, ::sh, ::sw]  # [N, C, Ho, Wo, wh, ww]
    return xp, view, (wh, ww, sh, sw, ph, pw)


def maxpool2d(x, window, stride=None, padding=0) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-D NCHW, got {x.ndim}-D")
    if stride is None:
        stride = window
    xp, view, (wh, ww, sh, sw, ph, pw) = _pool_prepare(x, window, stride, padding, -np.inf)
    n, c, ho, wo = view.shape[:4]
    flat = view.reshape(n, c, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        hp, wp = xp.shape[2], xp.shape[3]
        roff, coff = idx // ww, idx % ww
        pr = (np.arange(ho) * sh)[None, None, :, None] + roff
        pc = (np.arange(wo) * sw)[None, None, None, :] + coff
        gp = np.zeros((n, c, hp * wp), dtype=g.dtype)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gp, (ni, ci, pr * wp + pc), g)
        gp = gp.reshape(n, c, hp, wp)
        _accumulate(x, gp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]])

    return _make(out_data, (x,), backward, "maxpool2d")


def avgpool2d(x, window, stride=None, padding=0) -> Tensor:
    """Mean pooling; zero padding counts toward the window size."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: input must be 4-D NCHW, got {x.ndim}-D")
    if stride is None:
        stride = window
    xp, view, (wh, ww, sh, sw, ph, pw) = _pool_prepare(x, window, stride, padding, 0.0)
    out_data = view.mean(axis=(-2, -1))
    n, c, ho, wo = out_data.shape

    def backward(g):
        if not x.requires_grad:
            return
        gcols = np.broadcast_to(
            (g / (wh * ww))[:, :, :, :, None], (n, c, ho, wo, wh * ww)
        )
        gcols = gcols.transpose(0, 1, 4, 2, 3).reshape(n, c * wh * ww, ho * wo)
        _accumulate(x, _col2im(gcols, x.data.shape, wh, ww, sh, sw, ph, pw))

    return _make(out_data, (x,), backward, "avgpool2d")


def adaptive_avgpool2d(x, out_h: int, out_w: int) -> Tensor:
    """Average pooling onto an out_h x out_w grid with near-equal bins."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avgpool2d: input must be 4-D NCHW, got {x.ndim}-D")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise ShapeError(
            f"adaptive_avgpool2d: target {(out_h, out_w)} invalid for input {(h, w)}"
        )
    rb = [(int(np.floor(i * h / out_h)), int(np.ceil((i + 1) * h / out_h))) for i in range(out_h)]
    cb = [(int(np.floor(j * w / out_w)), int(np.ceil((j + 1) * w / out_w))) for j in range(out_w)]
    out_data = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out_data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i : i + 1, j : j + 1] / area
        _accumulate(x, gx)

    return _make(out_data, (x,), backward, "adaptive_avgpool2d")


# -- batch normalization ----------------------------------------------------


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = 1e-3,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over NCHW.

    Train mode normalizes with batch statistics and updates the running
    arrays in place (unbiased variance, torch-style); eval mode uses the
    running statistics unchanged.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-D NCHW, got {x.ndim}-D")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},) (dim 1)"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        axes = (0, 2, 3)
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        unbiased = v * count / (count - 1) if count > 1 else v
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = running_mean.astype(x.dtype)
        v = running_var.astype(x.dtype)

    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gscaled = g * gamma.data.reshape(1, c, 1, 1)
        if mode == "eval":
            _accumulate(x, gscaled * inv.reshape(1, c, 1, 1))
            return
        count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean_g = gscaled.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gscaled * xhat).mean(axis=(0, 2, 3), keepdims=True)
        _accumulate(x, inv.reshape(1, c, 1, 1) * (gscaled - mean_g - xhat * mean_gx))
        del count

    return _make(out_data, (x, gamma, beta), backward, "batchnorm2d")


# -- resampling -------------------------------------------------------------


def _bilinear_axis(in_extent: int, out_extent: int, dtype):
    """Source indices and blend weights for one axis, align_corners=False."""
    src = (np.arange(out_extent, dtype=np.float64) + 0.5) * in_extent / out_extent - 0.5
    src = np.clip(src, 0.0, in_extent - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_extent - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def _nearest_axis(in_extent: int, out_extent: int):
    idx = np.minimum(
        (np.arange(out_extent, dtype=np.float64) * in_extent / out_extent).astype(np.int64),
        in_extent - 1,
    )
    return idx


def interpolate(x, out_h: int, out_w: int, method: str = "bilinear") -> Tensor:
    """Resize the two trailing spatial axes to (out_h, out_w)."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"interpolate: input must be 4-D NCHW, got {x.ndim}-D")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"interpolate: target size {(out_h, out_w)} must be positive")
    n, c, h, w = x.shape
    if method == "nearest":
        ri = _nearest_axis(h, out_h)
        ci = _nearest_axis(w, out_w)
        out_data = x.data[:, :, ri][:, :, :, ci]

        def backward(g):
            if not x.requires_grad:
                return
            gr = np.zeros((h, n, c, out_w), dtype=g.dtype)
            np.add.at(gr, ri, g.transpose(2, 0, 1, 3))
            gx = np.zeros((w, n, c, h), dtype=g.dtype)
            np.add.at(gx, ci, gr.transpose(3, 1, 2, 0))
            _accumulate(x, gx.transpose(1, 2, 3, 0))

        return _make(out_data, (x,), backward, "interpolate")

    if method != "bilinear":
        raise ValueError(f"interpolate: unknown method {method!r}")

    r0, r1, fr = _bilinear_axis(h, out_h, x.dtype)
    c0, c1, fc = _bilinear_axis(w, out_w, x.dtype)
    rows = x.data[:, :, r0, :] * (1.0 - fr)[None, None, :, None] + x.data[:, :, r1, :] * fr[
        None, None, :, None
    ]
    out_data = rows[:, :, :, c0] * (1.0 - fc)[None, None, None, :] + rows[:, :, :, c1] * fc[
        None, None, None, :
    ]

    def backward(g):
        if not x.requires_grad:
            return
        # adjoint of the column blend: scatter into the row-resized array
        grows = np.zeros((w, n, c, out_h), dtype=g.dtype)
        gt = g.transpose(3, 0, 1, 2)
        np.add.at(grows, c0, gt * (1.0 - fc)[:, None, None, None])
        np.add.at(grows, c1, gt * fc[:, None, None, None])
        # adjoint of the row blend: scatter into the source array
        gx = np.zeros((h, n, c, w), dtype=g.dtype)
        gt2 = grows.transpose(3, 1, 2, 0)  # [out_h, N, C, W]
        np.add.at(gx, r0, gt2 * (1.0 - fr)[:, None, None, None])
        np.add.at(gx, r1, gt2 * fr[:, None, None, None])
        _accumulate(x, gx.transpose(1, 2, 0, 3))

    return _make(out_data, (x,), backward, "interpolate")


def upsample(x, factor: int, method: str = "bilinear") -> Tensor:
    """Scale both spatial extents by a positive integer factor."""
    x = _coerce(x)
    if int(factor) != factor or factor < 1:
        raise ShapeError(f"upsample: factor must be a positive integer, got {factor!r}")
    factor = int(factor)
    if x.ndim != 4:
        raise ShapeError(f"upsample: input must be 4-D NCHW, got {x.ndim}-D")
    return interpolate(x, x.shape[2] * factor, x.shape[3] * factor, method=method)


# -- channel plumbing --------------------------------------------------------


def concat_channels(inputs) -> Tensor:
    inputs = [_coerce(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    first = inputs[0]
    for k, t in enumerate(inputs[1:], start=1):
        if t.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels: inputs must be 4-D NCHW")
        for dim in (0, 2, 3):
            if t.shape[dim] != first.shape[dim]:
                raise ShapeError(
                    f"concat_channels: input {k} extent {t.shape[dim]} != "
                    f"{first.shape[dim]} along dim {dim}"
                )
    out_data = np.concatenate([t.data for t in inputs], axis=1)
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def backward(g):
        for t, gpart in zip(inputs, np.split(g, splits, axis=1)):
            _accumulate(t, gpart)

    return _make(out_data, tuple(inputs), backward, "concat_channels")


def channel_sum(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_sum: input must be 4-D NCHW, got {x.ndim}-D")
    out_data = x.data.sum(axis=1, keepdims=True)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).astype(g.dtype))

    return _make(out_data, (x,), backward, "channel_sum")
