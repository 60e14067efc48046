"""Tiered classifier ensemble with divergence-based review flagging.

A primary member screens every image. Confident calls return immediately;
probabilities inside the escalation band send the image to every member,
each with its own enhancement preprocessing. Member probabilities are fused
by a weighted mean and large disagreement raises a human-review flag.

Members count their own invocations so the tier-1 short-circuit is
observable from the outside.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine
from .data import Label, LabeledImage, standardize
from .enhance import AheParams, EnhancementKind, ImageGray, enhance
from .models import load_checkpoint

Array = np.ndarray

DEFAULT_BAND = (0.2, 0.8)
DEFAULT_DIVERGENCE = 0.3

# member lineup used when a config names no members; paths come from the run
DEFAULT_MEMBER_PLAN = (
    ("resnet_lite", EnhancementKind.ORIGINAL),
    ("vit_lite", EnhancementKind.AHE),
    ("swin_lite", EnhancementKind.HOG),
)


class Tier(Enum):
    PRIMARY = "primary"
    FULL_ENSEMBLE = "full_ensemble"


@dataclass(frozen=True)
class EnsembleDecision:
    label: Label
    fused_prob: float
    member_probs: tuple[float, ...]
    flagged: bool
    tier_used: Tier


@dataclass(frozen=True)
class MemberSpec:
    kind: str
    enhancement: EnhancementKind
    path: str | Path


@dataclass(frozen=True)
class EnsembleConfig:
    members: tuple[MemberSpec, ...]
    weights: tuple[float, ...] | None = None
    divergence_threshold: float = DEFAULT_DIVERGENCE
    confidence_band: tuple[float, float] = DEFAULT_BAND

    def validate(self) -> None:
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.weights is not None:
            _check_weights(np.asarray(self.weights, dtype=np.float64),
                           len(self.members))
        _check_rules(self.confidence_band, self.divergence_threshold)


def _check_weights(w: Array, n: int) -> Array:
    if w.shape != (n,):
        raise ValueError(f"{n} members but {w.shape[0] if w.ndim == 1 else w.shape} weights")
    if not np.isfinite(w).all() or (w < 0).any():
        raise ValueError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise ValueError("weights must not all be zero")
    return w


def _check_rules(band: tuple[float, float], threshold: float) -> None:
    lo, hi = band
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"confidence band {band} is not an interval inside [0, 1]")
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"divergence threshold {threshold} outside (0, 1]")


class Member:
    """Scores one image as a malignant probability; counts its invocations."""

    def __init__(self, name: str):
        self.name = name
        self.calls = 0

    def malignant_prob(self, img: ImageGray) -> float:
        self.calls += 1
        p = float(self._prob(img))
        if not np.isfinite(p) or not (0.0 <= p <= 1.0):
            raise ValueError(f"member {self.name!r} produced probability {p!r}")
        return p

    def _prob(self, img: ImageGray) -> float:
        raise NotImplementedError


class CheckpointMember(Member):
    """Member restored from a checkpoint, preprocessing images its own way.

    The checkpoint config must carry the normalization statistics recorded
    at training time, and when it names an enhancement it must match the
    one requested here; inference preprocessing has to mirror training.
    """

    def __init__(self, kind: str, enhancement: EnhancementKind,
                 path: str | Path, ahe_params: AheParams | None = None):
        model, cfg = load_checkpoint(path, expect_kind=kind)
        stored = cfg.get("enhancement")
        if stored is not None and stored != enhancement.value:
            raise ValueError(
                f"checkpoint {path} was trained with {stored!r}, "
                f"member requests {enhancement.value!r}")
        missing = [k for k in ("norm_mean", "norm_std") if k not in cfg]
        if missing:
            raise ValueError(f"checkpoint {path} lacks {', '.join(missing)}")
        super().__init__(f"{kind}+{enhancement.value}")
        self.model = model
        self.enhancement = enhancement
        self.mean = float(cfg["norm_mean"])
        self.std = float(cfg["norm_std"])
        self.ahe_params = ahe_params or AheParams()

    def _prob(self, img: ImageGray) -> float:
        enhanced = enhance(img, self.enhancement, ahe_params=self.ahe_params)
        x = standardize(enhanced.pixels, self.model.side, self.mean, self.std)
        with engine.no_grad():
            logits = self.model.forward(engine.tensor(x[None]))
        z = logits.data.astype(np.float64)[0]
        z -= z.max()
        e = np.exp(z)
        return float(e[Label.MALIGNANT.value] / e.sum())


def load_members(cfg: EnsembleConfig,
                 ahe_params: AheParams | None = None) -> list[CheckpointMember]:
    cfg.validate()
    return [CheckpointMember(s.kind, s.enhancement, s.path, ahe_params=ahe_params)
            for s in cfg.members]


def calibrate_weights(members: Sequence[Member],
                      val_items: Sequence[LabeledImage]) -> Array:
    """Per-member validation accuracy, renormalized to sum one.

    A member that gets nothing right keeps weight zero and so drops out of
    the fusion; all members failing at once is a configuration error.
    """
    if not val_items:
        raise ValueError("validation split is empty")
    accs = np.zeros(len(members), dtype=np.float64)
    for i, member in enumerate(members):
        hits = 0
        for item in val_items:
            vote = member.malignant_prob(item.image) >= 0.5
            hits += int(vote == (item.label is Label.MALIGNANT))
        accs[i] = hits / len(val_items)
    total = accs.sum()
    if total <= 0:
        raise ValueError("every member scored zero validation accuracy")
    return accs / total


def predict(members: Sequence[Member], img: ImageGray,
            weights: Sequence[float] | None = None,
            confidence_band: tuple[float, float] = DEFAULT_BAND,
            divergence_threshold: float = DEFAULT_DIVERGENCE) -> EnsembleDecision:
    """Tiered decision for one image.

    The first member is the primary. Its probability escalates the image
    only when strictly inside the confidence band; boundary values count as
    confident. On escalation every member votes (the primary's score is
    reused, not recomputed), the weighted mean fuses the probabilities and
    a spread above the divergence threshold flags the case for review.
    """
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    w = (np.ones(len(members), dtype=np.float64) if weights is None
         else _check_weights(np.asarray(weights, dtype=np.float64), len(members)))
    _check_rules(confidence_band, divergence_threshold)

    lo, hi = confidence_band
    p0 = members[0].malignant_prob(img)
    if not (lo < p0 < hi):
        label = Label.MALIGNANT if p0 >= 0.5 else Label.BENIGN
        return EnsembleDecision(label=label, fused_prob=p0, member_probs=(p0,),
                                flagged=False, tier_used=Tier.PRIMARY)

    probs = np.array([p0] + [m.malignant_prob(img) for m in members[1:]],
                     dtype=np.float64)
    fused = float(np.dot(w, probs) / w.sum())
    flagged = float(probs.max() - probs.min()) > divergence_threshold
    label = Label.MALIGNANT if fused >= 0.5 else Label.BENIGN
    return EnsembleDecision(label=label, fused_prob=fused,
                            member_probs=tuple(float(p) for p in probs),
                            flagged=flagged, tier_used=Tier.FULL_ENSEMBLE)


def decision_record(image_id: str, decision: EnsembleDecision) -> dict:
    """JSON-ready record for one decision, suitable for JSONL output."""
    return {
        "id": image_id,
        "tier": decision.tier_used.value,
        "member_probs": list(decision.member_probs),
        "fused_prob": decision.fused_prob,
        "label": decision.label.name.lower(),
        "flagged": decision.flagged,
    }
