"""Shared gradient-checking harness.

Compares analytic gradients from `engine.backward` against central finite
differences. Losses are scalarized through a fixed random projection so a
single backward pass exercises every output coordinate.

Finite differences are only a valid oracle where the function is
differentiable, so coordinates whose one-sided estimates disagree badly
(a relu kink or a pooling argmax flip inside the probe interval) are
rejected and resampled. Rejections are counted and capped: a systematically
wrong gradient fails at smooth points long before the cap bites.
"""

from __future__ import annotations

import numpy as np

from mammoxai import engine
from mammoxai.engine import Tensor

REL_TOL = 1e-3
ABS_FLOOR = 1e-6


def projection_loss(out: Tensor, proj: np.ndarray) -> Tensor:
    """Scalarize an op output as sum(out * proj) using engine primitives."""
    flat_len = out.size
    p = engine.constant(proj.reshape(1, flat_len))
    o = engine.reshape(out, (flat_len, 1))
    return engine.reshape(engine.matmul(p, o), (1,))


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic = analytic.astype(np.float64)
    denom = np.maximum(np.abs(numeric), ABS_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_input_grads(build, tensors, eps=1e-2, kink_scale=None):
    """Gradcheck `build(*tensors) -> Tensor` w.r.t. every requires_grad input.

    `build` must be pure: it is re-invoked on perturbed copies. Returns the
    worst relative error seen. Coordinates where the two one-sided secants
    disagree by more than 10% of the local scale are treated as straddling a
    nondifferentiable point and skipped (counted, capped at 20%).
    """
    out = build(*tensors)
    proj = np.random.default_rng(0xFEED).standard_normal(out.size)
    loss = projection_loss(out, proj)
    for t in tensors:
        t.zero_grad()
    engine.backward(loss)

    worst = 0.0
    for ti, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        assert t.grad is not None, f"input {ti} received no gradient"
        analytic = t.grad.reshape(-1).astype(np.float64)
        base = t.data.copy()
        flat = base.reshape(-1)
        skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            hi = np.float32(orig + eps)
            lo = np.float32(orig - eps)

            def eval_at(v):
                flat[i] = v
                args = [Tensor(base) if j == ti else Tensor(tensors[j].data)
                        for j in range(len(tensors))]
                o = build(*args)
                return float(np.dot(proj, o.data.reshape(-1).astype(np.float64)))

            f_hi = eval_at(hi)
            f_lo = eval_at(lo)
            f_mid = eval_at(orig)
            flat[i] = orig
            step = float(hi) - float(lo)
            numeric = (f_hi - f_lo) / step
            fwd = (f_hi - f_mid) / (float(hi) - float(orig))
            bwd = (f_mid - f_lo) / (float(orig) - float(lo))
            scale = max(abs(numeric), abs(fwd), abs(bwd), 1e-3)
            if abs(fwd - bwd) > 0.1 * scale:
                skipped += 1
                continue
            err = rel_err(np.array([analytic[i]]), np.array([numeric]))[0]
            worst = max(worst, err)
        assert skipped <= max(1, flat.size // 5), (
            f"input {ti}: {skipped}/{flat.size} coordinates rejected as kinks; "
            "inputs are too close to nondifferentiable points")
    return worst


def smooth_values(rng, shape, low=0.25, high=2.0):
    """Values bounded away from zero, sign-balanced: safe for relu/max kinks."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (mag * sign).astype(np.float32)


def check_model_input_grad(model, seed, eps=1e-3, n_dirs=7, tol=1e-3):
    """Directional gradcheck of a full model's input gradient.

    Per-coordinate probing drowns in float32 forward noise at network depth,
    so this compares central directional secants against the analytic
    directional derivative instead. Directions mix the gradient direction
    with noise (v = normalize(ghat + 0.5 r)) so every probe carries real
    signal; the one-sided agreement filter still rejects directions that
    straddle a relu or pooling kink. At least half the directions must
    survive. The step honors a narrow band: noise in the f32 forward blows
    up the secant below ~5e-4, truncation from curvature above ~3e-3.
    """
    rng = np.random.default_rng(seed)
    side = model.side
    x0 = smooth_values(rng, (1, 1, side, side), low=0.3, high=1.5)
    proj = rng.standard_normal(2)
    proj_c = engine.constant(proj.reshape(2, 1).astype(np.float32))

    def f(flat):
        arr = flat.reshape(x0.shape).astype(np.float32)
        with engine.no_grad():
            logits = model.forward(Tensor(arr))
        return float(logits.data.astype(np.float64)[0] @ proj)

    xt = Tensor(x0, requires_grad=True, name="x")
    loss = engine.matmul(model.forward(xt), proj_c)
    g = engine.backward(loss)["x"].astype(np.float64).ravel()
    gnorm = np.linalg.norm(g)
    assert gnorm > 0, "input gradient is identically zero"
    ghat = g / gnorm

    dirs = [ghat]
    for _ in range(n_dirs - 1):
        r = rng.standard_normal(g.size)
        v = ghat + 0.5 * (r / np.linalg.norm(r))
        dirs.append(v / np.linalg.norm(v))

    x0f = x0.ravel().astype(np.float64)
    f0 = f(x0f)
    worst, kept = 0.0, 0
    for v in dirs:
        f_hi = f(x0f + eps * v)
        f_lo = f(x0f - eps * v)
        numeric = (f_hi - f_lo) / (2 * eps)
        want = float(g @ v)
        scale = max(abs(numeric), abs(want), 1e-8)
        one_sided_gap = abs((f0 - f_lo) / eps - (f_hi - f0) / eps)
        if one_sided_gap > 0.02 * scale:
            continue
        kept += 1
        worst = max(worst, abs(numeric - want) / scale)
    assert kept >= max(1, n_dirs // 2), (
        f"{model.kind}: only {kept}/{n_dirs} directions were kink-free")
    assert worst < tol, (
        f"{model.kind}: directional gradient error {worst:.3e} exceeds {tol}")
    return worst
