"""Training loop: AdamW with decoupled weight decay, step-decay learning
rate, deterministic shuffling and best-validation checkpointing.

All randomness comes from seeds derived with the stable hash, so a training
run is reproducible bit for bit on the same machine.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .data import Dataset, Split, standardize
from .enhance import AheParams, EnhancementKind, enhance
from .models import Model
from .seeding import spawn_rng

Array = np.ndarray


class NumericalError(RuntimeError):
    """Loss or gradients stopped being finite; the run cannot continue."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.001
    lr_gamma: float = 0.1
    lr_step: int = 7
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr_step < 1:
            raise ValueError("epochs, batch_size and lr_step must be >= 1")
        if not (0 < self.lr and 0 < self.lr_gamma <= 1):
            raise ValueError("lr must be positive and lr_gamma in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: the rate drops by lr_gamma every lr_step epochs (0-based)."""
    return cfg.lr * cfg.lr_gamma ** (epoch // cfg.lr_step)


class AdamW:
    """Decoupled-decay Adam. Decay applies only to rank-2+ parameters, so
    biases and normalization affines are never pulled toward zero."""

    def __init__(self, params: dict[str, engine.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64)
                  for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64)
                  for k, p in params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(np.float64)
            if not np.isfinite(g).all():
                raise NumericalError(f"gradient of {name} is not finite")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            new = p.data.astype(np.float64) - lr * update
            if p.ndim >= 2:
                new -= lr * cfg.weight_decay * p.data.astype(np.float64)
            p.data[...] = new.astype(np.float32)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]
    best_epoch: int
    best_val_acc: float
    norm_mean: float
    norm_std: float
    enhancement: EnhancementKind


class BestTracker:
    """Keeps a copy of the parameters from the strictly best epoch so far.

    Ties keep the earlier epoch: later equal scores never replace it.
    """

    def __init__(self):
        self.best_acc = -1.0
        self.best_epoch = -1
        self.snapshot: dict[str, Array] | None = None

    def update(self, epoch: int, acc: float, params: dict[str, engine.Tensor]) -> bool:
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_epoch = epoch
            self.snapshot = {k: p.data.copy() for k, p in params.items()}
            return True
        return False

    def restore(self, params: dict[str, engine.Tensor]) -> None:
        if self.snapshot is None:
            raise RuntimeError("no epoch was ever tracked")
        for k, p in params.items():
            p.data[...] = self.snapshot[k]


def enhancement_stats(images: list[Array]) -> tuple[float, float]:
    """Mean and deviation of pixel values on the [0, 1] scale."""
    stacked = np.concatenate([im.reshape(-1) for im in images]).astype(np.float64)
    stacked /= 255.0
    return float(stacked.mean()), float(max(stacked.std(), 1e-6))


def prepare_split(ds: Dataset, split: Split, kind: EnhancementKind, side: int,
                  mean: float | None = None, std: float | None = None,
                  ahe_params: AheParams | None = None):
    """Enhance, resize and standardize one split into dense arrays.

    When mean/std are omitted they are computed from these images, which is
    only correct for the train split; other splits must pass the train
    statistics in.
    """
    items = ds.split_items(split)
    if not items:
        raise ValueError(f"the {split.value} split is empty; the dataset is "
                         "too small for its split fractions")
    ahe_params = ahe_params or AheParams()
    enhanced = [enhance(it.image, kind, ahe_params=ahe_params).pixels for it in items]
    if mean is None or std is None:
        mean, std = enhancement_stats(enhanced)
    xs = np.stack([standardize(px, side, mean, std) for px in enhanced])
    ys = np.array([it.label.value for it in items], dtype=np.int64)
    return xs, ys, mean, std


def evaluate(model: Model, xs: Array, ys: Array, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over a prepared array split."""
    total_loss = 0.0
    correct = 0
    n = len(ys)
    with engine.no_grad():
        for lo in range(0, n, batch_size):
            xb = engine.tensor(xs[lo:lo + batch_size])
            yb = ys[lo:lo + batch_size]
            logits = model.forward(xb)
            loss = engine.cross_entropy_logits(logits, yb)
            total_loss += float(loss.item()) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def train_model(model: Model, ds: Dataset,
                enhancement: EnhancementKind = EnhancementKind.ORIGINAL,
                cfg: TrainConfig = TrainConfig(),
                ahe_params: AheParams | None = None) -> TrainResult:
    """Fit on the train split, checkpoint on validation accuracy.

    The model ends up holding the best-validation parameters, not the final
    ones. Normalization uses train-split statistics of the enhanced pixels.
    """
    cfg.validate()
    xs_tr, ys_tr, mean, std = prepare_split(ds, Split.TRAIN, enhancement,
                                            model.side, ahe_params=ahe_params)
    xs_va, ys_va, _, _ = prepare_split(ds, Split.VAL, enhancement, model.side,
                                       mean, std, ahe_params=ahe_params)
    opt = AdamW(model.params, cfg)
    tracker = BestTracker()
    history: list[EpochStats] = []
    n = len(ys_tr)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = spawn_rng("shuffle", cfg.seed, epoch).permutation(n)
        running_loss = 0.0
        running_correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = engine.tensor(xs_tr[idx])
            yb = ys_tr[idx]
            model.zero_grad()
            logits = model.forward(xb)
            loss = engine.cross_entropy_logits(logits, yb)
            val = float(loss.item())
            if not np.isfinite(val):
                raise NumericalError(f"training loss became {val} at epoch {epoch}")
            engine.backward(loss)
            opt.step(lr)
            running_loss += val * len(yb)
            running_correct += int((logits.data.argmax(axis=1) == yb).sum())
        val_loss, val_acc = evaluate(model, xs_va, ys_va)
        stats = EpochStats(epoch=epoch, lr=lr,
                           train_loss=running_loss / n,
                           train_acc=running_correct / n,
                           val_loss=val_loss, val_acc=val_acc)
        history.append(stats)
        tracker.update(epoch, val_acc, model.params)

    tracker.restore(model.params)
    return TrainResult(model=model, history=history,
                       best_epoch=tracker.best_epoch,
                       best_val_acc=tracker.best_acc,
                       norm_mean=mean, norm_std=std,
                       enhancement=enhancement)


def write_history_csv(history: list[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
        for s in history:
            w.writerow([s.epoch, f"{s.lr:.10g}", f"{s.train_loss:.6f}",
                        f"{s.train_acc:.6f}", f"{s.val_loss:.6f}", f"{s.val_acc:.6f}"])
