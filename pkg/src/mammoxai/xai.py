"""Attribution methods: saliency, integrated gradients, occlusion,
class-activation maps, guided backprop and a Rescale-style difference
propagation, plus attention maps for the transformer models.

All methods operate in model-input space (standardized tensors) and return
float64 heatmaps at input resolution. Callers that want pixel-space
baselines must standardize them with the same statistics as the input.

The difference propagation walks the computation graphs of the input and
the baseline in lockstep. Linear primitives reuse the engine's backward
rules, which makes them exactly conservative; relu, gelu and max pooling
get dedicated difference rules; softmax and layer normalization are
linearized at the input point, an approximation that gives up exact
completeness on architectures that contain them.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import engine
from .data import bilinear_resize
from .engine import BackwardContext, Tensor
from .models import Model

Array = np.ndarray


class UnsupportedPrimitiveError(ValueError):
    """The graph contains an op with no difference-propagation rule."""


class GraphMismatchError(RuntimeError):
    """Input and baseline graphs disagree in structure; the model's forward
    is not input-shape deterministic."""


# -- gradient-based methods --------------------------------------------------


def _target_column(target: int) -> Tensor:
    col = np.zeros((2, 1), dtype=np.float32)
    col[target, 0] = 1.0
    return engine.constant(col)


def _logit_gradient(model: Model, x: Array, target: int,
                    guided: bool = False, trace: dict | None = None):
    """Gradient of the target logit w.r.t. the input; also returns the trace."""
    xt = engine.tensor(np.asarray(x, dtype=np.float32), requires_grad=True, name="x")
    logits = model.forward(xt, trace)
    picked = engine.matmul(logits, _target_column(target))
    ones = engine.constant(np.ones((1, picked.shape[0]), dtype=np.float32))
    total = engine.matmul(ones, picked)
    engine.backward(total, guided_relu=guided)
    return xt.grad.astype(np.float64), logits.data.copy()


def saliency(model: Model, x: Array, target: int) -> Array:
    """Absolute input gradient of the target logit, [side, side]."""
    g, _ = _logit_gradient(model, _single(x), target)
    return np.abs(g[0, 0])


def gradient_map(model: Model, x: Array, target: int, guided: bool = False) -> Array:
    """Signed input gradient, optionally with guided relu routing."""
    g, _ = _logit_gradient(model, _single(x), target, guided=guided)
    return g[0, 0]


def guided_backprop(model: Model, x: Array, target: int) -> Array:
    return gradient_map(model, x, target, guided=True)


def _single(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one [1, side, side] input, got {x.shape}")
    return x


def integrated_gradients(model: Model, x: Array, target: int,
                         baseline: Array | None = None, steps: int = 50,
                         chunk: int = 64) -> Array:
    """Midpoint-rule path integral of gradients from baseline to input.

    Interpolation points sit at (k - 0.5) / steps so the estimate converges
    at second order; evaluation is batched in chunks for speed. The result
    satisfies sum(attr) ~ F(x) - F(baseline) up to quadrature error.
    """
    x = _single(x)
    b = np.zeros_like(x) if baseline is None else _single(baseline)
    if b.shape != x.shape:
        raise ValueError(f"baseline shape {b.shape} != input shape {x.shape}")
    delta = (x - b).astype(np.float64)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    grad_sum = np.zeros(x.shape[1:], dtype=np.float64)
    for lo in range(0, steps, chunk):
        batch_alphas = alphas[lo:lo + chunk]
        pts = b[None, 0] + batch_alphas[:, None, None, None] * delta[0]
        g, _ = _logit_gradient(model, pts.astype(np.float32), target)
        grad_sum += g.sum(axis=0)
    attr = delta[0] * (grad_sum / steps)
    return attr[0]


def occlusion(model: Model, x: Array, target: int,
              patch: int | None = None, stride: int | None = None,
              fill: float = 0.0) -> Array:
    """Score drop F(x) - F(x with a patch filled), coverage-averaged.

    Each occluded variant runs as its own forward pass, so the map is
    bit-reproducible regardless of batching strategy.
    """
    x = _single(x)
    side = x.shape[-1]
    patch = patch or max(1, side // 4)
    stride = stride or max(1, patch // 2)
    if not (1 <= patch <= side) or stride < 1:
        raise ValueError(f"patch {patch} and stride {stride} do not fit side {side}")

    def score(arr: Array) -> float:
        with engine.no_grad():
            logits = model.forward(engine.tensor(arr))
        return float(logits.data.astype(np.float64)[0, target])

    base = score(x)
    heat = np.zeros((side, side), dtype=np.float64)
    cover = np.zeros((side, side), dtype=np.float64)
    starts = list(range(0, side - patch + 1, stride))
    if starts[-1] != side - patch:
        starts.append(side - patch)
    for y0 in starts:
        for x0 in starts:
            occluded = x.copy()
            occluded[0, :, y0:y0 + patch, x0:x0 + patch] = fill
            drop = base - score(occluded)
            heat[y0:y0 + patch, x0:x0 + patch] += drop
            cover[y0:y0 + patch, x0:x0 + patch] += 1.0
    return heat / cover


def gradcam(model: Model, x: Array, target: int) -> Array:
    """Gradient-weighted activation map, upsampled to input size."""
    x = _single(x)
    trace: dict = {}
    _logit_gradient(model, x, target, trace=trace)
    fmap = trace["gradcam"]
    if fmap.grad is None:
        raise RuntimeError("traced activation received no gradient")
    acts = fmap.data.astype(np.float64)[0]
    grads = fmap.grad.astype(np.float64)[0]
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    side = x.shape[-1]
    return bilinear_resize(cam, side, side)


def guided_gradcam(model: Model, x: Array, target: int) -> Array:
    """Elementwise product of guided backprop and the upsampled cam."""
    return guided_backprop(model, x, target) * gradcam(model, x, target)


# -- difference propagation --------------------------------------------------


def _paired_topo(out_x: Tensor, out_b: Tensor):
    """Topologically ordered (tensor_x, tensor_b) pairs for the non-leaf
    tensors of two isomorphic graphs."""
    order: list[tuple[Tensor, Tensor]] = []
    state: dict[int, int] = {}  # id(tensor_x): 0 visiting, 1 done
    stack: list[tuple[Tensor, Tensor, bool]] = [(out_x, out_b, False)]
    while stack:
        tx, tb, expanded = stack.pop()
        nx, nb = tx.node, tb.node
        if (nx is None) != (nb is None):
            raise GraphMismatchError("one graph ends in a leaf where the other does not")
        if nx is None:
            continue
        key = id(tx)
        if expanded:
            if state.get(key) != 1:
                state[key] = 1
                order.append((tx, tb))
            continue
        if key in state:
            continue
        if nx.kind != nb.kind or len(nx.inputs) != len(nb.inputs):
            raise GraphMismatchError(
                f"graphs diverge at {nx.kind!r} vs {nb.kind!r}")
        state[key] = 0
        stack.append((tx, tb, True))
        for ia, ib in zip(nx.inputs, nb.inputs):
            stack.append((ia, ib, False))
    return order


def _engine_rule(kind: str):
    bwd = engine._BACKWARD[kind]

    def rule(tx: Tensor, tb: Tensor, m_out: Array) -> list[Array | None]:
        ctx = BackwardContext(guided_relu=False)
        return bwd(tx.node, m_out.astype(np.float32), ctx)
    return rule


def _relu_rule(tx: Tensor, tb: Tensor, m_out: Array):
    xv = tx.node.inputs[0].data.astype(np.float64)
    bv = tb.node.inputs[0].data.astype(np.float64)
    d_in = xv - bv
    d_out = tx.data.astype(np.float64) - tb.data.astype(np.float64)
    safe = np.abs(d_in) > 1e-7
    ratio = np.where(safe, d_out / np.where(safe, d_in, 1.0), (xv > 0).astype(np.float64))
    return [m_out * ratio]


def _gelu_rule(tx: Tensor, tb: Tensor, m_out: Array):
    xv = tx.node.inputs[0].data.astype(np.float64)
    bv = tb.node.inputs[0].data.astype(np.float64)
    d_in = xv - bv
    d_out = tx.data.astype(np.float64) - tb.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(xv / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xv * xv) / np.sqrt(2.0 * np.pi)
    local = cdf + xv * pdf
    safe = np.abs(d_in) > 1e-7
    ratio = np.where(safe, d_out / np.where(safe, d_in, 1.0), local)
    return [m_out * ratio]


def _maxpool_rule(tx: Tensor, tb: Tensor, m_out: Array):
    # each window's output difference is routed to one input cell: the
    # argmax under x when its own difference clears the guard, otherwise
    # the largest-difference cell in the window. max is 1-Lipschitz, so a
    # window whose cells all sit inside the guard contributes negligibly.
    k = tx.node.attrs["kernel"]
    s = tx.node.attrs["stride"]
    Ho, Wo = tx.node.saved["out_hw"]
    am = tx.node.saved["argmax"]
    xv = tx.node.inputs[0].data
    bv = tb.node.inputs[0].data
    m64 = m_out.astype(np.float64)
    d_out = tx.data.astype(np.float64) - tb.data.astype(np.float64)
    slices = []
    d_win = np.empty(am.shape + (k * k,), dtype=np.float64)
    for idx in range(k * k):
        u, v = divmod(idx, k)
        sl = np.s_[:, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s]
        slices.append(sl)
        d_win[..., idx] = xv[sl].astype(np.float64) - bv[sl].astype(np.float64)
    route = am.copy()
    at_am = np.take_along_axis(d_win, am[..., None], axis=-1)[..., 0]
    weak = np.abs(at_am) <= 1e-7
    route[weak] = np.abs(d_win).argmax(axis=-1)[weak]
    d_route = np.take_along_axis(d_win, route[..., None], axis=-1)[..., 0]
    safe = np.abs(d_route) > 1e-7
    ratio = np.where(safe, (m64 * d_out) / np.where(safe, d_route, 1.0), m64)
    m_in = np.zeros(xv.shape, dtype=np.float64)
    for idx in range(k * k):
        m_in[slices[idx]] += np.where(route == idx, ratio, 0.0)
    return [m_in]


def _mul_rule(tx: Tensor, tb: Tensor, m_out: Array):
    ax = tx.node.inputs[0].data.astype(np.float64)
    ab = tb.node.inputs[0].data.astype(np.float64)
    bx = tx.node.inputs[1].data.astype(np.float64)
    bb = tb.node.inputs[1].data.astype(np.float64)
    return [m_out * (bx + bb) / 2.0, m_out * (ax + ab) / 2.0]


def _matmul_rule(tx: Tensor, tb: Tensor, m_out: Array):
    # symmetric bilinear split: delta(AB) = dA @ avg(B) + avg(A) @ dB,
    # which reduces to the plain linear rule when one side is a parameter
    a_avg = (tx.node.inputs[0].data.astype(np.float64)
             + tb.node.inputs[0].data.astype(np.float64)) / 2.0
    b_avg = (tx.node.inputs[1].data.astype(np.float64)
             + tb.node.inputs[1].data.astype(np.float64)) / 2.0
    g = m_out.astype(np.float64)
    if a_avg.ndim == 2:
        da = g @ b_avg.T
        db = a_avg.T @ g
    elif a_avg.ndim == 3:
        k = a_avg.shape[2]
        g2 = g.reshape(-1, g.shape[-1])
        da = (g2 @ b_avg.T).reshape(a_avg.shape)
        db = a_avg.reshape(-1, k).T @ g2
    else:
        da = g @ b_avg.swapaxes(-1, -2)
        db = a_avg.swapaxes(-1, -2) @ g
    return [da, db]


DEEPLIFT_RULES: dict[str, object] = {
    "relu": _relu_rule,
    "gelu": _gelu_rule,
    "max_pool2d": _maxpool_rule,
    "mul": _mul_rule,
    "matmul": _matmul_rule,
}
for _kind in ("add", "scale", "conv2d", "depthwise_conv2d", "pointwise_conv2d",
              "avg_pool2d", "global_avg_pool", "flatten", "reshape", "transpose",
              "concat", "embedding_add", "dropout_identity", "roll_grid",
              "batch_norm_inference_style", "softmax", "layer_norm"):
    DEEPLIFT_RULES[_kind] = _engine_rule(_kind)


def deeplift(model: Model, x: Array, target: int,
             baseline: Array | None = None) -> Array:
    """Difference-from-baseline attribution via paired graph traversal.

    Exactly conservative on piecewise-linear architectures; softmax and
    layer normalization are linearized, so models containing them satisfy
    completeness only approximately.
    """
    x = _single(x)
    b = np.zeros_like(x) if baseline is None else _single(baseline)
    if b.shape != x.shape:
        raise ValueError(f"baseline shape {b.shape} != input shape {x.shape}")
    xt = engine.tensor(x, name="x")
    bt = engine.tensor(b, name="baseline")
    out_x = model.forward(xt)
    out_b = model.forward(bt)
    pairs = _paired_topo(out_x, out_b)

    mults: dict[int, Array] = {}
    seed = np.zeros(out_x.shape, dtype=np.float64)
    seed[:, target] = 1.0
    mults[id(out_x)] = seed

    for tx, tb in reversed(pairs):
        m_out = mults.pop(id(tx), None)
        if m_out is None:
            continue
        rule = DEEPLIFT_RULES.get(tx.node.kind)
        if rule is None:
            raise UnsupportedPrimitiveError(
                f"no difference rule for primitive {tx.node.kind!r}")
        contribs = rule(tx, tb, m_out)
        for tensor, m_in in zip(tx.node.inputs, contribs):
            if m_in is None:
                continue
            key = id(tensor)
            m64 = m_in.astype(np.float64)
            if key in mults:
                mults[key] = mults[key] + m64
            else:
                mults[key] = m64

    m_input = mults.get(id(xt))
    if m_input is None:
        raise RuntimeError("input did not receive a multiplier")
    attr = m_input * (x.astype(np.float64) - b.astype(np.float64))
    return attr[0, 0]


# -- attention ---------------------------------------------------------------


def attention_map(model: Model, x: Array, rollout: bool = False) -> Array:
    """Received-attention heatmap upsampled to input size, [side, side]."""
    x = _single(x)
    trace: dict = {}
    with engine.no_grad():
        model.forward(engine.tensor(x), trace)
    grid = model.attention_grid(trace, rollout=rollout)[0]
    side = x.shape[-1]
    return bilinear_resize(grid, side, side)


# -- rendering ---------------------------------------------------------------

_PALETTE_ANCHORS = (
    (0.00, (8, 10, 80)),
    (0.25, (28, 94, 210)),
    (0.50, (60, 200, 140)),
    (0.75, (250, 210, 50)),
    (1.00, (245, 50, 30)),
)


def heat_palette() -> Array:
    """Fixed 256-entry RGB ramp interpolated between anchor colors."""
    lut = np.zeros((256, 3), dtype=np.float64)
    pos = np.array([a[0] for a in _PALETTE_ANCHORS])
    cols = np.array([a[1] for a in _PALETTE_ANCHORS], dtype=np.float64)
    xs = np.linspace(0.0, 1.0, 256)
    for c in range(3):
        lut[:, c] = np.interp(xs, pos, cols[:, c])
    return np.clip(np.floor(lut + 0.5), 0, 255).astype(np.uint8)


def normalize_heat(heat: Array) -> Array:
    """Min-max scale to [0, 1]; a constant map collapses to zeros."""
    heat = np.asarray(heat, dtype=np.float64)
    lo, hi = heat.min(), heat.max()
    if hi - lo < 1e-12:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def overlay(image_pixels: Array, heat: Array, alpha: float = 0.5) -> Array:
    """Blend a heatmap over a grayscale image. Returns uint8 RGB [H, W, 3]."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    gray = np.asarray(image_pixels, dtype=np.float64)
    if gray.shape != heat.shape:
        heat = bilinear_resize(np.asarray(heat, dtype=np.float64), *gray.shape)
    lut = heat_palette()
    idx = np.clip(np.floor(normalize_heat(heat) * 255.0 + 0.5), 0, 255).astype(np.int64)
    colored = lut[idx].astype(np.float64)
    base = np.repeat(gray[:, :, None], 3, axis=2)
    out = (1.0 - alpha) * base + alpha * colored
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def save_heat_raw(heat: Array, path: str | Path) -> None:
    """Little-endian dump: u32 width, u32 height, then float32 row-major."""
    heat = np.asarray(heat, dtype="<f4")
    if heat.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {heat.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", heat.shape[1], heat.shape[0]))
        fh.write(heat.tobytes())


def load_heat_raw(path: str | Path) -> Array:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError("truncated heatmap file")
        w, h = struct.unpack("<II", header)
        raw = fh.read()
    if len(raw) != w * h * 4:
        raise ValueError(f"expected {w * h * 4} payload bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
