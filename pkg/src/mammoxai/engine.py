"""Reverse-mode automatic differentiation over float32 numpy arrays.

Tensors store float32 data; every reduction (matmul, convolutions, softmax
sums, normalization statistics, pooling means) accumulates in float64 before
casting back, so gradient checks against central finite differences hold to
1e-3 relative error despite single-precision storage.

Each op appends a `Node` recording its kind, input tensors, attributes and
saved forward activations. The graph is acyclic by construction (inputs
always exist before outputs); `backward` walks nodes in exact reverse
topological order and accumulates gradients additively, so calling it twice
without clearing `.grad` doubles the result. Graphs are thread-confined:
build and differentiate a graph on one thread only.

Broadcasting is deliberately restricted. `add` accepts equal shapes or a
rank-1 bias over the last axis; everything else demands exact shapes. Shape
errors name the op and the offending dimensions so misuse fails loudly at
the call site rather than deep inside numpy.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np
from scipy.special import erf

Array = np.ndarray

# name -> gradient array, for every named tensor reached by a backward pass
GradientMap = dict[str, Array]


class ShapeMismatchError(ValueError):
    """Operand shapes incompatible for the requested op."""


class UnsupportedAttributeError(ValueError):
    """Op attribute outside its supported range (e.g. non-positive stride)."""


_grad_enabled: ContextVar[bool] = ContextVar("mammoxai_grad_enabled", default=True)


@contextmanager
def no_grad():
    """Skip node recording inside the block. Arithmetic is unchanged."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Node:
    """One recorded op: kind, inputs, attributes, saved activations."""

    __slots__ = ("kind", "inputs", "attrs", "saved")

    def __init__(self, kind: str, inputs: tuple["Tensor", ...], attrs: dict, saved: dict):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.saved = saved


class Tensor:
    """Float32 array plus the bookkeeping reverse mode needs.

    `grad` accumulates additively across backward passes; clear it by hand
    (or via a model helper) between optimization steps. `name` keys the
    tensor in GradientMaps and checkpoints; anonymous tensors still receive
    `.grad` but stay out of the returned map.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """Copy of the data with no graph history and no grad requirement."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _f64(a: Array) -> Array:
    return a.astype(np.float64, copy=False)


def _f32(a: Array) -> Array:
    return np.ascontiguousarray(a.astype(np.float32, copy=False))


def _mm64(a: Array, b: Array) -> Array:
    """Matrix product with float64 accumulation."""
    return np.matmul(_f64(a), _f64(b))


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(f"{op}: {msg}")


def _attr(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise UnsupportedAttributeError(f"{op}: {msg}")


def _make(kind: str, out: Array, inputs: tuple[Tensor, ...], attrs: dict, saved: dict) -> Tensor:
    t = Tensor(out)
    if _grad_enabled.get():
        t.requires_grad = any(p.requires_grad or p.node is not None for p in inputs)
        t.node = Node(kind, inputs, attrs, saved)
    return t


class BackwardContext:
    __slots__ = ("guided_relu",)

    def __init__(self, guided_relu: bool = False):
        self.guided_relu = guided_relu


# ---------------------------------------------------------------------------
# primitive forwards / backwards
#
# Forward functions validate shapes and attributes, compute the float32
# output and stash whatever the backward rule needs. Backward rules take
# (node, upstream grad, context) and return one gradient array (or None)
# per input, in input order.
# ---------------------------------------------------------------------------


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias over the last axis."""
    if x.shape == y.shape:
        mode = "same"
    elif y.ndim == 1 and x.ndim >= 1 and y.shape[0] == x.shape[-1]:
        mode = "bias"
    else:
        _require(False, "add", f"shapes {x.shape} and {y.shape} (equal or last-axis bias only)")
    out = _f32(_f64(x.data) + _f64(y.data))
    return _make("add", out, (x, y), {"mode": mode}, {})


def _add_bwd(node: Node, g: Array, ctx: BackwardContext):
    if node.attrs["mode"] == "same":
        return [g, g]
    axes = tuple(range(g.ndim - 1))
    return [g, _f32(_f64(g).sum(axis=axes))]


def mul(x: Tensor, y: Tensor) -> Tensor:
    _require(x.shape == y.shape, "mul", f"shapes {x.shape} and {y.shape} differ")
    return _make("mul", _f32(_f64(x.data) * _f64(y.data)), (x, y), {}, {})


def _mul_bwd(node: Node, g: Array, ctx: BackwardContext):
    x, y = node.inputs
    return [_f32(g * y.data), _f32(g * x.data)]


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", _f32(_f64(x.data) * c), (x,), {"c": c}, {})


def _scale_bwd(node: Node, g: Array, ctx: BackwardContext):
    return [_f32(g * node.attrs["c"])]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D @ 2D, stacked 3D @ 2D, or batched 4D @ 4D.

    Batched operands must agree exactly on their leading dimensions; there
    is no implicit broadcasting.
    """
    sa, sb = a.shape, b.shape
    if a.ndim == 2 and b.ndim == 2:
        _require(sa[1] == sb[0], "matmul", f"inner dims {sa} @ {sb}")
        out = _mm64(a.data, b.data)
    elif a.ndim == 3 and b.ndim == 2:
        _require(sa[2] == sb[0], "matmul", f"inner dims {sa} @ {sb}")
        out = _mm64(a.data.reshape(-1, sa[2]), b.data).reshape(sa[0], sa[1], sb[1])
    elif a.ndim == 4 and b.ndim == 4:
        _require(sa[:2] == sb[:2], "matmul", f"batch dims {sa} vs {sb}")
        _require(sa[3] == sb[2], "matmul", f"inner dims {sa} @ {sb}")
        out = _mm64(a.data, b.data)
    else:
        _require(False, "matmul", f"unsupported ranks {a.ndim} @ {b.ndim}")
    return _make("matmul", _f32(out), (a, b), {}, {})


def _matmul_bwd(node: Node, g: Array, ctx: BackwardContext):
    a, b = node.inputs
    if a.ndim == 2:
        da = _mm64(g, b.data.T)
        db = _mm64(a.data.T, g)
    elif a.ndim == 3:
        n, k = a.shape[1], a.shape[2]
        g2 = g.reshape(-1, g.shape[-1])
        da = _mm64(g2, b.data.T).reshape(a.shape)
        db = _mm64(a.data.reshape(-1, k).T, g2)
    else:
        da = _mm64(g, b.data.swapaxes(-1, -2))
        db = _mm64(a.data.swapaxes(-1, -2), g)
    return [_f32(da), _f32(db)]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input against [out, in, kh, kw] kernels."""
    _require(x.ndim == 4, "conv2d", f"input rank {x.ndim}, expected 4 (NCHW)")
    _require(w.ndim == 4, "conv2d", f"kernel rank {w.ndim}, expected 4")
    _attr(int(stride) >= 1, "conv2d", f"stride {stride} must be >= 1")
    _attr(int(padding) >= 0, "conv2d", f"padding {padding} must be >= 0")
    s, p = int(stride), int(padding)
    B, C, H, W = x.shape
    O, Ck, kh, kw = w.shape
    _require(C == Ck, "conv2d", f"input channels {C} != kernel channels {Ck}")
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    _require(Ho >= 1 and Wo >= 1, "conv2d",
             f"kernel {kh}x{kw} does not fit input {H}x{W} with padding {p}")
    if bias is not None:
        _require(bias.shape == (O,), "conv2d", f"bias shape {bias.shape}, expected ({O},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # [B, C, Ho, Wo, kh, kw]
    cols = _f32(win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw))
    out = _mm64(cols, w.data.reshape(O, -1).T)
    if bias is not None:
        out += _f64(bias.data)
    out = _f32(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    inputs = (x, w) if bias is None else (x, w, bias)
    saved = {"cols": cols, "xp_shape": xp.shape, "out_hw": (Ho, Wo)}
    return _make("conv2d", out, inputs, {"stride": s, "padding": p}, saved)


def _conv2d_bwd(node: Node, g: Array, ctx: BackwardContext):
    x, w = node.inputs[0], node.inputs[1]
    s, p = node.attrs["stride"], node.attrs["padding"]
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = node.saved["out_hw"]
    cols = node.saved["cols"]
    gcols = _f32(g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O))
    dw = _mm64(gcols.T, cols).reshape(w.shape)
    dcols = _mm64(gcols, w.data.reshape(O, -1))
    dpatch = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(node.saved["xp_shape"], dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s] += dpatch[..., u, v]
    dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
    grads = [_f32(dx), _f32(dw)]
    if len(node.inputs) == 3:
        grads.append(_f32(_f64(g).sum(axis=(0, 2, 3))))
    return grads


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2D cross-correlation with one [kh, kw] kernel per channel."""
    _require(x.ndim == 4, "depthwise_conv2d", f"input rank {x.ndim}, expected 4")
    _require(w.ndim == 3, "depthwise_conv2d", f"kernel rank {w.ndim}, expected 3 (C, kh, kw)")
    _attr(int(stride) >= 1, "depthwise_conv2d", f"stride {stride} must be >= 1")
    _attr(int(padding) >= 0, "depthwise_conv2d", f"padding {padding} must be >= 0")
    s, p = int(stride), int(padding)
    B, C, H, W = x.shape
    Cw, kh, kw = w.shape
    _require(C == Cw, "depthwise_conv2d", f"input channels {C} != kernel channels {Cw}")
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    _require(Ho >= 1 and Wo >= 1, "depthwise_conv2d",
             f"kernel {kh}x{kw} does not fit input {H}x{W} with padding {p}")
    if bias is not None:
        _require(bias.shape == (C,), "depthwise_conv2d",
                 f"bias shape {bias.shape}, expected ({C},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((B, C, Ho, Wo), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s]
            out += _f64(sl) * _f64(w.data[:, u, v])[None, :, None, None]
    if bias is not None:
        out += _f64(bias.data)[None, :, None, None]
    inputs = (x, w) if bias is None else (x, w, bias)
    saved = {"xp": _f32(xp), "out_hw": (Ho, Wo)}
    return _make("depthwise_conv2d", _f32(out), inputs, {"stride": s, "padding": p}, saved)


def _depthwise_bwd(node: Node, g: Array, ctx: BackwardContext):
    x, w = node.inputs[0], node.inputs[1]
    s, p = node.attrs["stride"], node.attrs["padding"]
    B, C, H, W = x.shape
    _, kh, kw = w.shape
    Ho, Wo = node.saved["out_hw"]
    xp = node.saved["xp"]
    g64 = _f64(g)
    dw = np.zeros(w.shape, dtype=np.float64)
    dxp = np.zeros(xp.shape, dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s]
            dw[:, u, v] = (_f64(sl) * g64).sum(axis=(0, 2, 3))
            dxp[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s] += (
                g64 * _f64(w.data[:, u, v])[None, :, None, None])
    dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
    grads = [_f32(dx), _f32(dw)]
    if len(node.inputs) == 3:
        grads.append(_f32(g64.sum(axis=(0, 2, 3))))
    return grads


def pointwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: a per-pixel linear map [out_ch, in_ch]."""
    _require(x.ndim == 4, "pointwise_conv2d", f"input rank {x.ndim}, expected 4")
    _require(w.ndim == 2, "pointwise_conv2d", f"kernel rank {w.ndim}, expected 2 (out, in)")
    B, C, H, W = x.shape
    O, Ck = w.shape
    _require(C == Ck, "pointwise_conv2d", f"input channels {C} != kernel channels {Ck}")
    if bias is not None:
        _require(bias.shape == (O,), "pointwise_conv2d",
                 f"bias shape {bias.shape}, expected ({O},)")
    flat = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    out = _mm64(flat, w.data.T)
    if bias is not None:
        out += _f64(bias.data)
    out = _f32(out.reshape(B, H, W, O).transpose(0, 3, 1, 2))
    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("pointwise_conv2d", out, inputs, {}, {"flat": _f32(flat)})


def _pointwise_bwd(node: Node, g: Array, ctx: BackwardContext):
    x, w = node.inputs[0], node.inputs[1]
    B, C, H, W = x.shape
    O = w.shape[0]
    gflat = _f32(g.transpose(0, 2, 3, 1).reshape(-1, O))
    dw = _mm64(gflat.T, node.saved["flat"])
    dx = _mm64(gflat, w.data).reshape(B, H, W, C).transpose(0, 3, 1, 2)
    grads = [_f32(dx), _f32(dw)]
    if len(node.inputs) == 3:
        grads.append(_f32(_f64(g).sum(axis=(0, 2, 3))))
    return grads


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make("relu", out, (x,), {}, {"mask": x.data > 0})


def _relu_bwd(node: Node, g: Array, ctx: BackwardContext):
    dx = g * node.saved["mask"]
    if ctx.guided_relu:
        # guided backprop: additionally pass only positive upstream signal
        dx = dx * (g > 0)
    return [_f32(dx)]


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function GELU."""
    x64 = _f64(x.data)
    out = 0.5 * x64 * (1.0 + erf(x64 * _INV_SQRT2))
    return _make("gelu", _f32(out), (x,), {}, {})


def _gelu_bwd(node: Node, g: Array, ctx: BackwardContext):
    x64 = _f64(node.inputs[0].data)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT_2PI
    return [_f32(_f64(g) * (cdf + x64 * pdf))]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction, f64 sums)."""
    ax = axis if axis >= 0 else x.ndim + axis
    _attr(0 <= ax < x.ndim, "softmax", f"axis {axis} out of range for rank {x.ndim}")
    x64 = _f64(x.data)
    shifted = x64 - x64.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    return _make("softmax", _f32(y), (x,), {"axis": ax}, {"y": _f32(y)})


def _softmax_bwd(node: Node, g: Array, ctx: BackwardContext):
    ax = node.attrs["axis"]
    y = _f64(node.saved["y"])
    g64 = _f64(g)
    inner = (g64 * y).sum(axis=ax, keepdims=True)
    return [_f32(y * (g64 - inner))]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    _require(gain.shape == (d,), "layer_norm", f"gain shape {gain.shape}, expected ({d},)")
    _require(bias.shape == (d,), "layer_norm", f"bias shape {bias.shape}, expected ({d},)")
    _attr(eps > 0, "layer_norm", f"eps {eps} must be positive")
    x64 = _f64(x.data)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out = xhat * _f64(gain.data) + _f64(bias.data)
    saved = {"xhat": _f32(xhat), "inv": inv}
    return _make("layer_norm", _f32(out), (x, gain, bias), {"eps": eps}, saved)


def _layer_norm_bwd(node: Node, g: Array, ctx: BackwardContext):
    gain = node.inputs[1]
    xhat = _f64(node.saved["xhat"])
    inv = node.saved["inv"]
    g64 = _f64(g)
    dxhat = g64 * _f64(gain.data)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(g.ndim - 1))
    dgain = (g64 * xhat).sum(axis=axes)
    dbias = g64.sum(axis=axes)
    return [_f32(dx), _f32(dgain), _f32(dbias)]


def batch_norm_inference(x: Tensor, gain: Tensor, bias: Tensor,
                         mean: Tensor, var: Tensor, eps: float = 1e-5) -> Tensor:
    """Channelwise affine normalization with fixed statistics (NCHW).

    Inference-style only: `mean` and `var` are constants, never updated from
    batch content, so train and eval compute the identical function.
    """
    _require(x.ndim == 4, "batch_norm_inference_style", f"input rank {x.ndim}, expected 4")
    C = x.shape[1]
    for nm, t in (("gain", gain), ("bias", bias), ("mean", mean), ("var", var)):
        _require(t.shape == (C,), "batch_norm_inference_style",
                 f"{nm} shape {t.shape}, expected ({C},)")
    _attr(eps > 0, "batch_norm_inference_style", f"eps {eps} must be positive")
    inv = 1.0 / np.sqrt(_f64(var.data) + eps)
    xhat = (_f64(x.data) - _f64(mean.data)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * _f64(gain.data)[None, :, None, None] + _f64(bias.data)[None, :, None, None]
    saved = {"xhat": _f32(xhat), "inv": inv}
    return _make("batch_norm_inference_style", _f32(out), (x, gain, bias, mean, var),
                 {"eps": eps}, saved)


def _batch_norm_bwd(node: Node, g: Array, ctx: BackwardContext):
    gain = node.inputs[1]
    inv = node.saved["inv"]
    xhat = _f64(node.saved["xhat"])
    g64 = _f64(g)
    dx = g64 * (_f64(gain.data) * inv)[None, :, None, None]
    dgain = (g64 * xhat).sum(axis=(0, 2, 3))
    dbias = g64.sum(axis=(0, 2, 3))
    # fixed statistics are constants; no gradient flows to them
    return [_f32(dx), _f32(dgain), _f32(dbias), None, None]


def _pool_prep(op: str, x: Tensor, kernel: int, stride: int):
    _require(x.ndim == 4, op, f"input rank {x.ndim}, expected 4")
    _attr(int(kernel) >= 1, op, f"kernel {kernel} must be >= 1")
    _attr(int(stride) >= 1, op, f"stride {stride} must be >= 1")
    k, s = int(kernel), int(stride)
    B, C, H, W = x.shape
    _require(H >= k and W >= k, op, f"kernel {k} exceeds input {H}x{W}")
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s].reshape(B, C, Ho, Wo, k * k)
    return k, s, Ho, Wo, win


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling. Ties resolve to the first maximum in row-major window order."""
    k, s, Ho, Wo, win = _pool_prep("max_pool2d", x, kernel, stride)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    return _make("max_pool2d", _f32(out), (x,), {"kernel": k, "stride": s},
                 {"argmax": am, "out_hw": (Ho, Wo)})


def _max_pool_bwd(node: Node, g: Array, ctx: BackwardContext):
    x = node.inputs[0]
    k, s = node.attrs["kernel"], node.attrs["stride"]
    Ho, Wo = node.saved["out_hw"]
    am = node.saved["argmax"]
    dx = np.zeros(x.shape, dtype=np.float64)
    g64 = _f64(g)
    for idx in range(k * k):
        u, v = divmod(idx, k)
        contrib = np.where(am == idx, g64, 0.0)
        dx[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s] += contrib
    return [_f32(dx)]


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    k, s, Ho, Wo, win = _pool_prep("avg_pool2d", x, kernel, stride)
    out = _f64(win).mean(axis=-1)
    return _make("avg_pool2d", _f32(out), (x,), {"kernel": k, "stride": s},
                 {"out_hw": (Ho, Wo)})


def _avg_pool_bwd(node: Node, g: Array, ctx: BackwardContext):
    x = node.inputs[0]
    k, s = node.attrs["kernel"], node.attrs["stride"]
    Ho, Wo = node.saved["out_hw"]
    dx = np.zeros(x.shape, dtype=np.float64)
    share = _f64(g) / (k * k)
    for u in range(k):
        for v in range(k):
            dx[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s] += share
    return [_f32(dx)]


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    _require(x.ndim == 4, "global_avg_pool", f"input rank {x.ndim}, expected 4")
    out = _f64(x.data).mean(axis=(2, 3))
    return _make("global_avg_pool", _f32(out), (x,), {}, {})


def _gap_bwd(node: Node, g: Array, ctx: BackwardContext):
    B, C, H, W = node.inputs[0].shape
    dx = np.broadcast_to((_f64(g) / (H * W))[:, :, None, None], (B, C, H, W))
    return [_f32(dx.copy())]


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the first."""
    _require(x.ndim >= 2, "flatten", f"input rank {x.ndim}, expected >= 2")
    out = x.data.reshape(x.shape[0], -1)
    return _make("flatten", out, (x,), {}, {})


def _flatten_bwd(node: Node, g: Array, ctx: BackwardContext):
    return [g.reshape(node.inputs[0].shape)]


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    _require(int(np.prod(shape)) == x.size, "reshape",
             f"cannot reshape {x.shape} to {shape}")
    return _make("reshape", x.data.reshape(shape), (x,), {"shape": shape}, {})


def _reshape_bwd(node: Node, g: Array, ctx: BackwardContext):
    return [g.reshape(node.inputs[0].shape)]


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    _attr(sorted(axes) == list(range(x.ndim)), "transpose",
          f"axes {axes} not a permutation of rank {x.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make("transpose", out, (x,), {"axes": axes}, {})


def _transpose_bwd(node: Node, g: Array, ctx: BackwardContext):
    axes = node.attrs["axes"]
    inv = np.argsort(axes)
    return [np.ascontiguousarray(g.transpose(inv))]


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    _require(len(xs) >= 1, "concat", "needs at least one input")
    nd = xs[0].ndim
    ax = axis if axis >= 0 else nd + axis
    _attr(0 <= ax < nd, "concat", f"axis {axis} out of range for rank {nd}")
    base = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        ok = len(other) == nd and all(
            other[i] == base[i] for i in range(nd) if i != ax)
        _require(ok, "concat", f"shapes {xs[0].shape} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    sizes = [t.shape[ax] for t in xs]
    return _make("concat", out, tuple(xs), {"axis": ax, "sizes": sizes}, {})


def _concat_bwd(node: Node, g: Array, ctx: BackwardContext):
    ax = node.attrs["axis"]
    splits = np.cumsum(node.attrs["sizes"])[:-1]
    return [np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax)]


def embedding_add(x: Tensor, pos: Tensor) -> Tensor:
    """Add a learned [n, d] position table to [B, n, d] token activations."""
    _require(x.ndim == 3, "embedding_add", f"input rank {x.ndim}, expected 3")
    _require(pos.shape == x.shape[1:], "embedding_add",
             f"table shape {pos.shape}, expected {x.shape[1:]}")
    out = _f32(_f64(x.data) + _f64(pos.data))
    return _make("embedding_add", out, (x, pos), {}, {})


def _embedding_add_bwd(node: Node, g: Array, ctx: BackwardContext):
    return [g, _f32(_f64(g).sum(axis=0))]


def dropout_identity(x: Tensor) -> Tensor:
    """Inference-mode dropout: the identity map, recorded for graph fidelity."""
    return _make("dropout_identity", x.data.copy(), (x,), {}, {})


def _identity_bwd(node: Node, g: Array, ctx: BackwardContext):
    return [g]


def roll_grid(x: Tensor, shift_y: int, shift_x: int) -> Tensor:
    """Cyclic shift of a [B, g, g, d] token grid along its two spatial axes."""
    _require(x.ndim == 4, "roll_grid", f"input rank {x.ndim}, expected 4")
    sy, sx = int(shift_y), int(shift_x)
    out = np.roll(x.data, (sy, sx), axis=(1, 2))
    return _make("roll_grid", out, (x,), {"sy": sy, "sx": sx}, {})


def _roll_grid_bwd(node: Node, g: Array, ctx: BackwardContext):
    a = node.attrs
    return [np.roll(g, (-a["sy"], -a["sx"]), axis=(1, 2))]


def cross_entropy_logits(logits: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits.

    Computes log-sum-exp with max subtraction in float64; the gradient is
    (softmax - onehot) / batch. Uniform logits over C classes give ln C.
    """
    _require(logits.ndim == 2, "cross_entropy_logits",
             f"logits rank {logits.ndim}, expected 2")
    y = np.asarray(labels)
    _require(y.ndim == 1 and y.shape[0] == logits.shape[0], "cross_entropy_logits",
             f"labels shape {y.shape} for logits {logits.shape}")
    C = logits.shape[1]
    y = y.astype(np.int64)
    _attr(bool((y >= 0).all() and (y < C).all()), "cross_entropy_logits",
          f"labels must lie in [0, {C})")
    z = _f64(logits.data)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    loss = (lse - z[np.arange(z.shape[0]), y]).mean()
    probs = e / e.sum(axis=1, keepdims=True)
    return _make("cross_entropy_logits", np.float32(loss), (logits,),
                 {"labels": y}, {"probs": _f32(probs)})


def _cross_entropy_bwd(node: Node, g: Array, ctx: BackwardContext):
    y = node.attrs["labels"]
    p = _f64(node.saved["probs"]).copy()
    B = p.shape[0]
    p[np.arange(B), y] -= 1.0
    return [_f32(p * (_f64(g) / B))]


_BACKWARD = {
    "add": _add_bwd,
    "mul": _mul_bwd,
    "scale": _scale_bwd,
    "matmul": _matmul_bwd,
    "conv2d": _conv2d_bwd,
    "depthwise_conv2d": _depthwise_bwd,
    "pointwise_conv2d": _pointwise_bwd,
    "relu": _relu_bwd,
    "gelu": _gelu_bwd,
    "softmax": _softmax_bwd,
    "layer_norm": _layer_norm_bwd,
    "batch_norm_inference_style": _batch_norm_bwd,
    "max_pool2d": _max_pool_bwd,
    "avg_pool2d": _avg_pool_bwd,
    "global_avg_pool": _gap_bwd,
    "flatten": _flatten_bwd,
    "reshape": _reshape_bwd,
    "transpose": _transpose_bwd,
    "concat": _concat_bwd,
    "embedding_add": _embedding_add_bwd,
    "dropout_identity": _identity_bwd,
    "roll_grid": _roll_grid_bwd,
    "cross_entropy_logits": _cross_entropy_bwd,
}

# dispatch table for apply_primitive: kind -> (callable, takes input list)
_FORWARD = {
    "add": lambda ins, attrs: add(*ins),
    "mul": lambda ins, attrs: mul(*ins),
    "scale": lambda ins, attrs: scale(ins[0], **attrs),
    "matmul": lambda ins, attrs: matmul(*ins),
    "conv2d": lambda ins, attrs: conv2d(*ins, **attrs),
    "depthwise_conv2d": lambda ins, attrs: depthwise_conv2d(*ins, **attrs),
    "pointwise_conv2d": lambda ins, attrs: pointwise_conv2d(*ins, **attrs),
    "relu": lambda ins, attrs: relu(ins[0]),
    "gelu": lambda ins, attrs: gelu(ins[0]),
    "softmax": lambda ins, attrs: softmax(ins[0], **attrs),
    "layer_norm": lambda ins, attrs: layer_norm(*ins, **attrs),
    "batch_norm_inference_style": lambda ins, attrs: batch_norm_inference(*ins, **attrs),
    "max_pool2d": lambda ins, attrs: max_pool2d(ins[0], **attrs),
    "avg_pool2d": lambda ins, attrs: avg_pool2d(ins[0], **attrs),
    "global_avg_pool": lambda ins, attrs: global_avg_pool(ins[0]),
    "flatten": lambda ins, attrs: flatten(ins[0]),
    "reshape": lambda ins, attrs: reshape(ins[0], **attrs),
    "transpose": lambda ins, attrs: transpose(ins[0], **attrs),
    "concat": lambda ins, attrs: concat(list(ins), **attrs),
    "embedding_add": lambda ins, attrs: embedding_add(*ins),
    "dropout_identity": lambda ins, attrs: dropout_identity(ins[0]),
    "roll_grid": lambda ins, attrs: roll_grid(ins[0], **attrs),
    "cross_entropy_logits": lambda ins, attrs: cross_entropy_logits(ins[0], **attrs),
}


def primitive_kinds() -> tuple[str, ...]:
    return tuple(sorted(_FORWARD))


def apply_primitive(kind: str, inputs: list[Tensor], **attrs) -> Tensor:
    """Uniform entry point over every registered primitive.

    Mainly an auditing surface: tests enumerate `primitive_kinds()` and push
    seeded cases through this dispatcher so no op escapes gradient checking.
    """
    if kind not in _FORWARD:
        raise UnsupportedAttributeError(f"unknown primitive kind {kind!r}")
    return _FORWARD[kind](list(inputs), attrs)


def backward(loss: Tensor, guided_relu: bool = False) -> GradientMap:
    """Reverse-mode sweep from a scalar loss.

    Visits nodes in exact reverse topological order, accumulating `.grad`
    additively on every tensor the sweep touches (parameters, inputs and
    intermediates alike, so activation hooks can read their gradients).
    Returns {name: grad} for named tensors with requires_grad.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    ctx = BackwardContext(guided_relu=guided_relu)

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, emitted = stack.pop()
        if emitted:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if id(p) not in seen:
                    stack.append((p, False))

    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = flowing.get(id(t))
        if g is None:
            continue
        if t.requires_grad or t.node is not None:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        input_grads = _BACKWARD[t.node.kind](t.node, g, ctx)
        for p, pg in zip(t.node.inputs, input_grads):
            if pg is None or not (p.requires_grad or p.node is not None):
                continue
            held = flowing.get(id(p))
            flowing[id(p)] = pg if held is None else held + pg

    out: GradientMap = {}
    for t in topo:
        if t.name and t.requires_grad and t.grad is not None:
            out[t.name] = t.grad
    return out


def finite_diff_grad(f, x: Tensor, eps: float = 1e-3) -> GradientMap:
    """Central-difference gradient of a scalar-valued `f` at `x`.

    Perturbs one float32 coordinate at a time and divides by the actually
    realized step (the difference of the rounded perturbed values), which
    removes representation error from the estimate. The returned array is
    float64: this is the oracle side of gradient checking, so it keeps all
    the precision it can get.
    """
    if eps <= 0:
        raise UnsupportedAttributeError(f"finite_diff_grad: eps {eps} must be positive")
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        hi = np.float32(orig + eps)
        lo = np.float32(orig - eps)
        step = float(hi) - float(lo)
        if step == 0.0:
            raise UnsupportedAttributeError(
                f"finite_diff_grad: eps {eps} vanishes at coordinate {i}")
        flat[i] = hi
        f_hi = f(Tensor(base)).item()
        flat[i] = lo
        f_lo = f(Tensor(base)).item()
        flat[i] = orig
        grad[i] = (f_hi - f_lo) / step
    name = x.name if x.name else "x"
    return {name: grad.reshape(base.shape)}
