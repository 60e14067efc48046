"""Seven small binary classifiers over 1-channel square images.

Every architecture is built from the same primitive set so gradients,
attributions and checkpoints work uniformly. Models are constructed for a
fixed input side (default 64) and validate it at forward time. A forward
call can fill a `trace` dict with hook tensors:

  trace["gradcam"]  4D activation [B, C, h, w] on the gradient path, the
                    map class-activation methods weight and sum
  trace["attn"]     per-block attention probabilities (attention models)

Checkpoints use a small self-describing binary format so a saved model can
be restored without pickles.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from . import engine
from .engine import Tensor
from .seeding import stable_seed

Array = np.ndarray


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed, truncated or inconsistent."""


class InputShapeError(ValueError):
    """Forward input does not match the geometry the model was built for."""


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Array:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Array:
    """Normal(0, std) with samples outside two deviations redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Attention over [B, H, n, dk] head tensors.

    Returns the mixed values and the probability tensor. `mask` is added to
    the scaled scores before the softmax, so blocked pairs should carry a
    large negative value.
    """
    dk = q.shape[-1]
    scores = engine.scale(engine.matmul(q, engine.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(dk))
    if mask is not None:
        scores = engine.add(scores, mask)
    probs = engine.softmax(scores, axis=-1)
    return engine.matmul(probs, v), probs


class Model:
    """Base: owns named parameters and buffers, created in a fixed order."""

    kind = "abstract"

    def __init__(self, seed: int = 0, side: int = 64):
        self.seed = int(seed)
        self.side = int(side)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(stable_seed("init", self.kind, self.seed))
        self._build()

    def _build(self) -> None:
        raise NotImplementedError

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        raise NotImplementedError

    # -- parameter creation ------------------------------------------------

    def _param(self, name: str, shape, fan_in: int | None = None,
               init: str = "kaiming") -> Tensor:
        if init == "kaiming":
            data = _kaiming_uniform(self._rng, shape, fan_in)
        elif init == "trunc_normal":
            data = _trunc_normal(self._rng, shape)
        elif init == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float32)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = engine.tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _buffer(self, name: str, data: Array) -> Tensor:
        t = engine.tensor(np.asarray(data, dtype=np.float32), name=name)
        self.buffers[name] = t
        return t

    def _conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self._param(f"{name}.w", (cout, cin, k, k), fan_in=cin * k * k)
        self._param(f"{name}.b", (cout,), init="zeros")

    def _linear(self, name: str, din: int, dout: int) -> None:
        self._param(f"{name}.w", (din, dout), fan_in=din)
        self._param(f"{name}.b", (dout,), init="zeros")

    def _norm_affine(self, name: str, c: int) -> None:
        self._param(f"{name}.g", (c,), init="ones")
        self._param(f"{name}.b", (c,), init="zeros")

    def _bn(self, name: str, c: int) -> None:
        self._norm_affine(name, c)
        self._buffer(f"{name}.mean", np.zeros(c))
        self._buffer(f"{name}.var", np.ones(c))

    # -- forward-time building blocks --------------------------------------

    def _apply_conv(self, name: str, x: Tensor, stride=1, padding=0) -> Tensor:
        return engine.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                             stride=stride, padding=padding)

    def _apply_linear(self, name: str, x: Tensor) -> Tensor:
        return engine.add(engine.matmul(x, self.params[f"{name}.w"]),
                          self.params[f"{name}.b"])

    def _apply_ln(self, name: str, x: Tensor) -> Tensor:
        return engine.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _apply_bn(self, name: str, x: Tensor) -> Tensor:
        return engine.batch_norm_inference(
            x, self.params[f"{name}.g"], self.params[f"{name}.b"],
            self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"])

    # -- misc ---------------------------------------------------------------

    def validate_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.side \
                or x.shape[3] != self.side:
            raise InputShapeError(
                f"{self.kind} expects [B, 1, {self.side}, {self.side}], got {x.shape}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def predict_proba(self, x: Tensor) -> Array:
        """Class probabilities [B, 2] with no graph kept around."""
        with engine.no_grad():
            logits = self.forward(x)
            return engine.softmax(logits, axis=-1).data.copy()

    def attention_grid(self, trace: dict, rollout: bool = False) -> Array:
        raise NotImplementedError(f"{self.kind} has no attention maps")


# -- shared transformer machinery -------------------------------------------


def _build_mha(model: Model, prefix: str, d: int) -> None:
    for nm in ("wq", "wk", "wv", "wo"):
        model._param(f"{prefix}.{nm}", (d, d), fan_in=d)
    for nm in ("bq", "bk", "bv", "bo"):
        model._param(f"{prefix}.{nm}", (d,), init="zeros")


def _apply_mha(model: Model, prefix: str, tokens: Tensor, heads: int,
               mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention over [Bt, n, d] token stacks."""
    bt, n, d = tokens.shape
    hd = d // heads
    p = model.params

    def project(wn, bn):
        h = engine.add(engine.matmul(tokens, p[f"{prefix}.{wn}"]), p[f"{prefix}.{bn}"])
        h = engine.reshape(h, (bt, n, heads, hd))
        return engine.transpose(h, (0, 2, 1, 3))

    q, k, v = project("wq", "bq"), project("wk", "bk"), project("wv", "bv")
    mixed, probs = scaled_dot_attention(q, k, v, mask)
    mixed = engine.reshape(engine.transpose(mixed, (0, 2, 1, 3)), (bt, n, d))
    out = engine.add(engine.matmul(mixed, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])
    return engine.dropout_identity(out), probs


def _build_transformer_block(model: Model, prefix: str, d: int, mlp_ratio: int = 4) -> None:
    model._norm_affine(f"{prefix}.ln1", d)
    _build_mha(model, f"{prefix}.attn", d)
    model._norm_affine(f"{prefix}.ln2", d)
    model._linear(f"{prefix}.mlp1", d, mlp_ratio * d)
    model._linear(f"{prefix}.mlp2", mlp_ratio * d, d)


def _apply_transformer_block(model: Model, prefix: str, tokens: Tensor,
                             heads: int) -> tuple[Tensor, Tensor]:
    """Pre-norm block: attention then MLP, each behind a residual."""
    h = model._apply_ln(f"{prefix}.ln1", tokens)
    attn_out, probs = _apply_mha(model, f"{prefix}.attn", h, heads)
    tokens = engine.add(tokens, attn_out)
    h = model._apply_ln(f"{prefix}.ln2", tokens)
    h = model._apply_linear(f"{prefix}.mlp1", h)
    h = engine.gelu(h)
    h = model._apply_linear(f"{prefix}.mlp2", h)
    tokens = engine.add(tokens, engine.dropout_identity(h))
    return tokens, probs


def _tokens_to_grid_tensor(tokens: Tensor, g: int, d: int) -> Tensor:
    """[B, g*g, d] tokens -> [B, d, g, g] feature map on the gradient path."""
    b = tokens.shape[0]
    return engine.reshape(engine.transpose(tokens, (0, 2, 1)), (b, d, g, g))


def _received_attention(probs: Array) -> Array:
    """[B, H, n, n] probabilities -> [B, n] mean attention each key receives."""
    return probs.mean(axis=1).mean(axis=1)


def _rollout(prob_stack: list[Array]) -> Array:
    """Attention rollout: residual-mixed maps multiplied through the depth."""
    b, _, n, _ = prob_stack[0].shape
    eye = np.eye(n)[None]
    joint = np.broadcast_to(eye, (b, n, n)).copy()
    for probs in prob_stack:
        a = probs.mean(axis=1)
        a = 0.5 * a + 0.5 * eye
        a = a / a.sum(axis=-1, keepdims=True)
        joint = a @ joint
    return joint.mean(axis=1)


# -- architectures -----------------------------------------------------------


class BaseCNN(Model):
    """Plain four-block CNN, no normalization anywhere.

    The all-piecewise-linear forward keeps attribution methods exact, which
    makes this the reference architecture for explanation tests.
    """

    kind = "base_cnn"
    channels = (16, 32, 64, 128)

    def _build(self):
        if self.side % 16 != 0:
            raise InputShapeError(f"side {self.side} must be divisible by 16")
        cin = 1
        for i, cout in enumerate(self.channels, start=1):
            self._conv(f"conv{i}", cin, cout, 3)
            cin = cout
        feat = self.channels[-1] * (self.side // 16) ** 2
        self._linear("fc1", feat, 128)
        self._linear("fc2", 128, 2)

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        h = x
        for i in range(1, 5):
            h = engine.relu(self._apply_conv(f"conv{i}", h, padding=1))
            if i == 4 and trace is not None:
                trace["gradcam"] = h
            h = engine.max_pool2d(h)
        h = engine.flatten(h)
        h = engine.relu(self._apply_linear("fc1", h))
        return self._apply_linear("fc2", h)


class ResNetLite(Model):
    """Three-stage residual network with fixed-statistics normalization."""

    kind = "resnet_lite"
    stage_channels = (16, 32, 64)

    def _build(self):
        if self.side % 8 != 0:
            raise InputShapeError(f"side {self.side} must be divisible by 8")
        self._conv("stem", 1, 16, 3)
        self._bn("stem.bn", 16)
        cin = 16
        for s, cout in enumerate(self.stage_channels, start=1):
            for b in (1, 2):
                p = f"s{s}b{b}"
                self._conv(f"{p}.conv1", cin if b == 1 else cout, cout, 3)
                self._bn(f"{p}.bn1", cout)
                self._conv(f"{p}.conv2", cout, cout, 3)
                self._bn(f"{p}.bn2", cout)
                if b == 1 and cin != cout:
                    self._conv(f"{p}.proj", cin, cout, 1)
                    self._bn(f"{p}.projbn", cout)
            cin = cout
        self._linear("head", self.stage_channels[-1], 2)

    def _block(self, p: str, x: Tensor, stride: int) -> Tensor:
        h = self._apply_conv(f"{p}.conv1", x, stride=stride, padding=1)
        h = engine.relu(self._apply_bn(f"{p}.bn1", h))
        h = self._apply_conv(f"{p}.conv2", h, padding=1)
        h = self._apply_bn(f"{p}.bn2", h)
        if f"{p}.proj.w" in self.params:
            skip = self._apply_bn(f"{p}.projbn",
                                  self._apply_conv(f"{p}.proj", x, stride=stride))
        else:
            skip = x
        return engine.relu(engine.add(h, skip))

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        h = engine.relu(self._apply_bn("stem.bn", self._apply_conv("stem", x, padding=1)))
        h = engine.max_pool2d(h)
        for s in (1, 2, 3):
            h = self._block(f"s{s}b1", h, stride=1 if s == 1 else 2)
            h = self._block(f"s{s}b2", h, stride=1)
        if trace is not None:
            trace["gradcam"] = h
        return self._apply_linear("head", engine.global_avg_pool(h))


class ViTLite(Model):
    """Patch-token transformer: patch 8, four pre-norm blocks, mean pooling."""

    kind = "vit_lite"
    patch = 8
    embed = 64
    heads = 4
    depth = 4

    def _build(self):
        if self.side % self.patch != 0:
            raise InputShapeError(f"side {self.side} must be divisible by {self.patch}")
        self.grid = self.side // self.patch
        n = self.grid * self.grid
        self._conv("patch", 1, self.embed, self.patch)
        self._param("pos", (n, self.embed), init="trunc_normal")
        for i in range(self.depth):
            _build_transformer_block(self, f"blk{i}", self.embed)
        self._norm_affine("final_ln", self.embed)
        self._linear("head", self.embed, 2)

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        b = x.shape[0]
        g, d = self.grid, self.embed
        h = self._apply_conv("patch", x, stride=self.patch)
        tokens = engine.transpose(engine.reshape(h, (b, d, g * g)), (0, 2, 1))
        tokens = engine.embedding_add(tokens, self.params["pos"])
        probs_stack = []
        for i in range(self.depth):
            tokens, probs = _apply_transformer_block(self, f"blk{i}", tokens, self.heads)
            probs_stack.append(probs)
        tokens = self._apply_ln("final_ln", tokens)
        fmap = _tokens_to_grid_tensor(tokens, g, d)
        if trace is not None:
            trace["gradcam"] = fmap
            trace["attn"] = probs_stack
        return self._apply_linear("head", engine.global_avg_pool(fmap))

    def attention_grid(self, trace: dict, rollout: bool = False) -> Array:
        stack = [p.data.astype(np.float64) for p in trace["attn"]]
        received = _rollout(stack) if rollout else _received_attention(stack[-1])
        b = received.shape[0]
        return received.reshape(b, self.grid, self.grid)


def _window_partition(grid: Tensor, w: int) -> Tensor:
    """[B, g, g, d] -> [B*nw, w*w, d] non-overlapping square windows."""
    b, g, _, d = grid.shape
    m = g // w
    h = engine.reshape(grid, (b, m, w, m, w, d))
    h = engine.transpose(h, (0, 1, 3, 2, 4, 5))
    return engine.reshape(h, (b * m * m, w * w, d))


def _window_merge(wins: Tensor, b: int, g: int, w: int, d: int) -> Tensor:
    m = g // w
    h = engine.reshape(wins, (b, m, m, w, w, d))
    h = engine.transpose(h, (0, 1, 3, 2, 4, 5))
    return engine.reshape(h, (b, g, g, d))


def _shift_region_ids(g: int, w: int, shift: int) -> Array:
    """Region labels on the rolled canvas; pairs with different labels must
    not attend across the wrap seam."""
    ids = np.zeros((g, g), dtype=np.int64)
    slices = (slice(0, g - w), slice(g - w, g - shift), slice(g - shift, g))
    cnt = 0
    for hs in slices:
        for ws in slices:
            ids[hs, ws] = cnt
            cnt += 1
    return ids


def _swin_mask(g: int, w: int, shift: int) -> Array:
    """Additive [nw, w*w, w*w] mask for shifted-window attention."""
    ids = _shift_region_ids(g, w, shift)
    m = g // w
    wins = ids.reshape(m, w, m, w).transpose(0, 2, 1, 3).reshape(m * m, w * w)
    diff = wins[:, :, None] != wins[:, None, :]
    return np.where(diff, -1e9, 0.0).astype(np.float32)


class SwinLite(Model):
    """Two-stage windowed transformer with alternating plain and shifted
    windows and a patch-merging downsample between stages."""

    kind = "swin_lite"
    patch = 4
    embed = 48
    window = 4
    shift = 2
    heads = 4
    depths = (2, 2)

    def _build(self):
        g0 = self.side // self.patch
        if self.side % self.patch != 0 or g0 % self.window != 0 \
                or (g0 // 2) % self.window != 0:
            raise InputShapeError(
                f"side {self.side} incompatible with patch {self.patch} and "
                f"window {self.window}")
        self.grids = (g0, g0 // 2)
        self.dims = (self.embed, self.embed * 2)
        self._conv("patch", 1, self.embed, self.patch)
        self._param("pos", (g0 * g0, self.embed), init="trunc_normal")
        for s in (0, 1):
            for b in range(self.depths[s]):
                _build_transformer_block(self, f"s{s}blk{b}", self.dims[s])
        self._norm_affine("merge.ln", 4 * self.embed)
        self._linear("merge", 4 * self.embed, 2 * self.embed)
        self._norm_affine("final_ln", self.dims[1])
        self._linear("head", self.dims[1], 2)

    def _attend(self, prefix: str, grid: Tensor, g: int, d: int,
                shifted: bool) -> tuple[Tensor, Tensor]:
        """Window attention on a [B, g, g, d] grid, shifted when asked."""
        b = grid.shape[0]
        w, s = self.window, self.shift
        if shifted:
            grid = engine.roll_grid(grid, -s, -s)
        wins = _window_partition(grid, w)
        mask = None
        if shifted:
            nw = (g // w) ** 2
            m = _swin_mask(g, w, s)
            full = np.broadcast_to(m[None, :, None], (b, nw, self.heads, w * w, w * w))
            mask = engine.constant(full.reshape(b * nw, self.heads, w * w, w * w))
        mixed, probs = _apply_mha(self, prefix, wins, self.heads, mask)
        out = _window_merge(mixed, b, g, w, d)
        if shifted:
            out = engine.roll_grid(out, s, s)
        return out, probs

    def _block(self, prefix: str, grid: Tensor, g: int, d: int,
               shifted: bool) -> tuple[Tensor, Tensor]:
        b = grid.shape[0]
        n = g * g
        tokens = engine.reshape(grid, (b, n, d))
        h = self._apply_ln(f"{prefix}.ln1", tokens)
        attn_out, probs = self._attend(f"{prefix}.attn", engine.reshape(h, (b, g, g, d)),
                                       g, d, shifted)
        tokens = engine.add(tokens, engine.reshape(attn_out, (b, n, d)))
        h = self._apply_ln(f"{prefix}.ln2", tokens)
        h = self._apply_linear(f"{prefix}.mlp1", h)
        h = engine.gelu(h)
        h = self._apply_linear(f"{prefix}.mlp2", h)
        tokens = engine.add(tokens, engine.dropout_identity(h))
        return engine.reshape(tokens, (b, g, g, d)), probs

    def _merge(self, grid: Tensor) -> Tensor:
        b, g, _, d = grid.shape
        h = engine.reshape(grid, (b, g // 2, 2, g // 2, 2, d))
        h = engine.transpose(h, (0, 1, 3, 2, 4, 5))
        h = engine.reshape(h, (b, (g // 2) ** 2, 4 * d))
        h = self._apply_ln("merge.ln", h)
        h = self._apply_linear("merge", h)
        return engine.reshape(h, (b, g // 2, g // 2, 2 * d))

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        b = x.shape[0]
        g0, d0 = self.grids[0], self.dims[0]
        h = self._apply_conv("patch", x, stride=self.patch)
        tokens = engine.transpose(engine.reshape(h, (b, d0, g0 * g0)), (0, 2, 1))
        tokens = engine.embedding_add(tokens, self.params["pos"])
        grid = engine.reshape(tokens, (b, g0, g0, d0))
        last_probs = None
        for s in (0, 1):
            g, d = self.grids[s], self.dims[s]
            for blk in range(self.depths[s]):
                grid, last_probs = self._block(f"s{s}blk{blk}", grid, g, d,
                                               shifted=bool(blk % 2))
            if s == 0:
                grid = self._merge(grid)
        g1, d1 = self.grids[1], self.dims[1]
        tokens = engine.reshape(grid, (b, g1 * g1, d1))
        tokens = self._apply_ln("final_ln", tokens)
        fmap = _tokens_to_grid_tensor(tokens, g1, d1)
        if trace is not None:
            trace["gradcam"] = fmap
            trace["attn"] = [last_probs]
            trace["attn_meta"] = {"g": g1, "w": self.window, "shift": self.shift}
        return self._apply_linear("head", engine.global_avg_pool(fmap))

    def attention_grid(self, trace: dict, rollout: bool = False) -> Array:
        if rollout:
            raise NotImplementedError("rollout is undefined across window stages")
        meta = trace["attn_meta"]
        g, w, shift = meta["g"], meta["w"], meta["shift"]
        probs = trace["attn"][-1].data.astype(np.float64)
        received = _received_attention(probs)  # [B*nw, w*w]
        m = g // w
        b = received.shape[0] // (m * m)
        grid = received.reshape(b, m, m, w, w).transpose(0, 1, 3, 2, 4).reshape(b, g, g)
        # final block is shifted: undo the roll to line up with the image
        return np.roll(grid, (shift, shift), axis=(1, 2))


class DenseTransformer(Model):
    """Densely connected conv front end feeding a small transformer."""

    kind = "dense_transformer"
    growth = 12
    embed = 64
    heads = 4
    depth = 4

    def _build(self):
        if self.side % 8 != 0:
            raise InputShapeError(f"side {self.side} must be divisible by 8")
        self.grid = self.side // 8
        n = self.grid * self.grid
        self._conv("stem", 1, 24, 3)
        cin = 24
        for i in (1, 2, 3):
            self._conv(f"dense{i}", cin, self.growth, 3)
            cin += self.growth
        self._conv("transition", cin, self.embed, 1)
        self._param("pos", (n, self.embed), init="trunc_normal")
        for i in range(self.depth):
            _build_transformer_block(self, f"blk{i}", self.embed)
        self._norm_affine("final_ln", self.embed)
        self._linear("head", self.embed, 2)

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        b = x.shape[0]
        g, d = self.grid, self.embed
        h = engine.relu(self._apply_conv("stem", x, padding=1))
        h = engine.max_pool2d(h)
        for i in (1, 2, 3):
            fresh = engine.relu(self._apply_conv(f"dense{i}", h, padding=1))
            h = engine.concat([h, fresh], axis=1)
        h = engine.relu(self._apply_conv("transition", h))
        h = engine.max_pool2d(engine.max_pool2d(h))
        tokens = engine.transpose(engine.reshape(h, (b, d, g * g)), (0, 2, 1))
        tokens = engine.embedding_add(tokens, self.params["pos"])
        probs_stack = []
        for i in range(self.depth):
            tokens, probs = _apply_transformer_block(self, f"blk{i}", tokens, self.heads)
            probs_stack.append(probs)
        tokens = self._apply_ln("final_ln", tokens)
        fmap = _tokens_to_grid_tensor(tokens, g, d)
        if trace is not None:
            trace["gradcam"] = fmap
            trace["attn"] = probs_stack
        return self._apply_linear("head", engine.global_avg_pool(fmap))

    def attention_grid(self, trace: dict, rollout: bool = False) -> Array:
        stack = [p.data.astype(np.float64) for p in trace["attn"]]
        received = _rollout(stack) if rollout else _received_attention(stack[-1])
        b = received.shape[0]
        return received.reshape(b, self.grid, self.grid)


class ConvMixerLite(Model):
    """Patch embedding followed by depthwise/pointwise mixing blocks."""

    kind = "convmixer_lite"
    dim = 64
    depth = 6
    kernel = 5

    def _build(self):
        if self.side % 4 != 0:
            raise InputShapeError(f"side {self.side} must be divisible by 4")
        self._conv("patch", 1, self.dim, 4)
        self._bn("patch.bn", self.dim)
        for i in range(self.depth):
            self._param(f"blk{i}.dw.w", (self.dim, self.kernel, self.kernel),
                        fan_in=self.kernel * self.kernel)
            self._param(f"blk{i}.dw.b", (self.dim,), init="zeros")
            self._bn(f"blk{i}.dwbn", self.dim)
            self._param(f"blk{i}.pw.w", (self.dim, self.dim), fan_in=self.dim)
            self._param(f"blk{i}.pw.b", (self.dim,), init="zeros")
            self._bn(f"blk{i}.pwbn", self.dim)
        self._linear("head", self.dim, 2)

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        h = self._apply_conv("patch", x, stride=4)
        h = self._apply_bn("patch.bn", engine.gelu(h))
        pad = self.kernel // 2
        for i in range(self.depth):
            dw = engine.depthwise_conv2d(h, self.params[f"blk{i}.dw.w"],
                                         self.params[f"blk{i}.dw.b"], padding=pad)
            dw = self._apply_bn(f"blk{i}.dwbn", engine.gelu(dw))
            h = engine.add(h, dw)
            h = engine.pointwise_conv2d(h, self.params[f"blk{i}.pw.w"],
                                        self.params[f"blk{i}.pw.b"])
            h = self._apply_bn(f"blk{i}.pwbn", engine.gelu(h))
        if trace is not None:
            trace["gradcam"] = h
        return self._apply_linear("head", engine.global_avg_pool(h))


class ConvNeXtLite(Model):
    """Depthwise 7x7 blocks with channels-last normalization and a wide
    pointwise MLP, one downsample between two stages."""

    kind = "convnext_lite"
    dims = (32, 64)

    def _build(self):
        if self.side % 8 != 0:
            raise InputShapeError(f"side {self.side} must be divisible by 8")
        self._conv("stem", 1, self.dims[0], 4)
        for s, d in enumerate(self.dims):
            for b in (0, 1):
                p = f"s{s}blk{b}"
                self._param(f"{p}.dw.w", (d, 7, 7), fan_in=49)
                self._param(f"{p}.dw.b", (d,), init="zeros")
                self._norm_affine(f"{p}.ln", d)
                self._param(f"{p}.pw1.w", (4 * d, d), fan_in=d)
                self._param(f"{p}.pw1.b", (4 * d,), init="zeros")
                self._param(f"{p}.pw2.w", (d, 4 * d), fan_in=4 * d)
                self._param(f"{p}.pw2.b", (d,), init="zeros")
        self._norm_affine("down.ln", self.dims[0])
        self._conv("down", self.dims[0], self.dims[1], 2)
        self._norm_affine("final_ln", self.dims[1])
        self._linear("head", self.dims[1], 2)

    def _ln_channels_last(self, name: str, x: Tensor) -> Tensor:
        h = engine.transpose(x, (0, 2, 3, 1))
        h = self._apply_ln(name, h)
        return engine.transpose(h, (0, 3, 1, 2))

    def _block(self, p: str, x: Tensor) -> Tensor:
        h = engine.depthwise_conv2d(x, self.params[f"{p}.dw.w"],
                                    self.params[f"{p}.dw.b"], padding=3)
        h = self._ln_channels_last(f"{p}.ln", h)
        h = engine.pointwise_conv2d(h, self.params[f"{p}.pw1.w"], self.params[f"{p}.pw1.b"])
        h = engine.gelu(h)
        h = engine.pointwise_conv2d(h, self.params[f"{p}.pw2.w"], self.params[f"{p}.pw2.b"])
        return engine.add(x, h)

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        self.validate_input(x)
        h = self._apply_conv("stem", x, stride=4)
        for b in (0, 1):
            h = self._block(f"s0blk{b}", h)
        h = self._ln_channels_last("down.ln", h)
        h = self._apply_conv("down", h, stride=2)
        for b in (0, 1):
            h = self._block(f"s1blk{b}", h)
        if trace is not None:
            trace["gradcam"] = h
        pooled = engine.global_avg_pool(h)
        pooled = self._apply_ln("final_ln", pooled)
        return self._apply_linear("head", pooled)


MODEL_KINDS: dict[str, type[Model]] = {
    cls.kind: cls for cls in (BaseCNN, ResNetLite, ViTLite, SwinLite,
                              DenseTransformer, ConvMixerLite, ConvNeXtLite)
}

_KIND_CODES = {kind: i + 1 for i, kind in enumerate(
    ("base_cnn", "resnet_lite", "vit_lite", "swin_lite", "dense_transformer",
     "convmixer_lite", "convnext_lite"))}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def create_model(kind: str, seed: int = 0, side: int = 64) -> Model:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from "
                         f"{sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind](seed=seed, side=side)


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"MMFW"
_VERSION = 1


def save_checkpoint(model: Model, path: str | Path,
                    config: dict[str, str] | None = None) -> None:
    """Serialize parameters, buffers and a key=value config block."""
    cfg = dict(config or {})
    cfg.setdefault("side", str(model.side))
    lines = "".join(f"{k}={v}\n" for k, v in sorted(cfg.items()))
    blob = lines.encode("utf-8")
    entries = list(model.params.items()) + \
        [(f"buffer:{k}", t) for k, t in model.buffers.items()]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<B", _KIND_CODES[model.kind]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path: str | Path,
                    expect_kind: str | None = None) -> tuple[Model, dict[str, str]]:
    """Restore a model and its config block, validating layout strictly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (code,) = struct.unpack("<B", _read_exact(fh, 1, "kind"))
        if code not in _CODE_KINDS:
            raise CheckpointError(f"unknown model code {code}")
        kind = _CODE_KINDS[code]
        if expect_kind is not None and kind != expect_kind:
            raise CheckpointError(f"checkpoint holds {kind!r}, expected {expect_kind!r}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg: dict[str, str] = {}
        for line in _read_exact(fh, cfg_len, "config").decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition("=")
                cfg[k] = v
        side = int(cfg.get("side", "64"))
        model = create_model(kind, seed=0, side=side)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        expected = dict(model.params)
        expected.update({f"buffer:{k}": t for k, t in model.buffers.items()})
        if count != len(expected):
            raise CheckpointError(
                f"checkpoint has {count} arrays, model needs {len(expected)}")
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                          for _ in range(rank))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            raw = _read_exact(fh, nbytes, f"data for {name}")
            if name not in expected:
                raise CheckpointError(f"unexpected array {name!r} in checkpoint")
            target = expected[name]
            if shape != target.shape:
                raise CheckpointError(
                    f"{name} has shape {shape}, model expects {target.shape}")
            target.data[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
            seen.add(name)
        if len(seen) != len(expected):
            missing = sorted(set(expected) - seen)
            raise CheckpointError(f"checkpoint is missing arrays: {missing[:3]}")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("checkpoint has trailing bytes")
    return model, cfg
