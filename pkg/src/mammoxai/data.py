"""Synthetic mammogram-like data, augmentation and dataset assembly.

The generator is a stand-in for clinical data at desk scale: benign lesions
are smooth bright ellipses, malignant ones a bright core with sharp radial
spikes and an irregular margin, both over textured backgrounds with random
per-image gain and offset. The two classes differ by morphology, not by
intensity statistics, so classifiers must actually look at shape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import engine
from .enhance import ImageGray, read_image, write_image
from .seeding import spawn_rng, stable_seed

Array = np.ndarray


class Label(Enum):
    BENIGN = 0
    MALIGNANT = 1


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class EmptyClassError(ValueError):
    """A class ended up with zero images; the dataset is degenerate."""


class IngestError(OSError):
    """Ingestion root missing or not laid out as benign/ and malignant/."""


@dataclass(frozen=True)
class SynthParams:
    """Knobs for the synthetic generator. Lengths are fractions of the image
    side unless the name says pixels; jitter ranges apply per image."""
    side: int = 64
    background_level: tuple[float, float] = (55.0, 85.0)
    background_noise: float = 14.0
    benign_radius: tuple[float, float] = (0.14, 0.21)
    benign_softness: tuple[float, float] = (2.5, 4.5)
    benign_brightness: tuple[float, float] = (70.0, 110.0)
    core_radius: tuple[float, float] = (0.09, 0.15)
    core_softness: tuple[float, float] = (0.7, 1.2)
    core_brightness: tuple[float, float] = (80.0, 120.0)
    spike_count: tuple[int, int] = (6, 14)
    spike_length: tuple[float, float] = (0.4, 0.9)
    spike_width: tuple[float, float] = (0.9, 1.7)
    margin_irregularity: float = 0.25
    gain_jitter: tuple[float, float] = (0.7, 1.3)
    offset_jitter: tuple[float, float] = (-25.0, 25.0)


@dataclass
class LabeledImage:
    id: str
    label: Label
    image: ImageGray
    source: str
    split: Split | None = None


def _value_noise(rng: np.random.Generator, side: int, grid: int) -> Array:
    """One octave of bilinearly upsampled white noise on a coarse grid."""
    coarse = rng.standard_normal((grid + 1, grid + 1))
    coords = np.linspace(0.0, grid, side)
    i0 = np.minimum(coords.astype(np.int64), grid - 1)
    f = coords - i0
    rows = coarse[i0][:, i0] * ((1 - f)[:, None] * (1 - f)[None, :])
    rows += coarse[i0 + 1][:, i0] * (f[:, None] * (1 - f)[None, :])
    rows += coarse[i0][:, i0 + 1] * ((1 - f)[:, None] * f[None, :])
    rows += coarse[i0 + 1][:, i0 + 1] * (f[:, None] * f[None, :])
    return rows


def _background(rng: np.random.Generator, p: SynthParams) -> Array:
    level = rng.uniform(*p.background_level)
    img = np.full((p.side, p.side), level, dtype=np.float64)
    for grid, w in ((4, 1.0), (8, 0.55), (16, 0.3)):
        img += p.background_noise * w * _value_noise(rng, p.side, grid)
    return img


def _angular_wobble(rng: np.random.Generator, theta: Array) -> Array:
    """Smooth periodic perturbation normalized to peak magnitude 1."""
    wave = np.zeros_like(theta)
    for k in (2, 3, 4, 5):
        a, b = rng.normal(size=2)
        wave += a * np.cos(k * theta) + b * np.sin(k * theta)
    peak = np.abs(wave).max()
    return wave / peak if peak > 0 else wave


def _finalize(img: Array, rng: np.random.Generator, p: SynthParams) -> ImageGray:
    gain = rng.uniform(*p.gain_jitter)
    offset = rng.uniform(*p.offset_jitter)
    return ImageGray(np.clip(np.floor(gain * img + offset + 0.5), 0, 255).astype(np.uint8))


def generate_benign(seed: int, params: SynthParams = SynthParams()) -> ImageGray:
    """Smooth bright ellipse with a soft, gradual edge."""
    rng = np.random.default_rng(seed)
    p = params
    img = _background(rng, p)
    s = p.side
    cy, cx = rng.uniform(0.35 * s, 0.65 * s, size=2)
    r_mean = rng.uniform(*p.benign_radius) * s
    ratio = rng.uniform(0.78, 0.95)
    a = r_mean / np.sqrt(ratio)
    b = r_mean * np.sqrt(ratio)
    phi = rng.uniform(0.0, np.pi)
    soft = rng.uniform(*p.benign_softness)
    amp = rng.uniform(*p.benign_brightness)

    yy, xx = np.mgrid[0:s, 0:s]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    img += amp / (1.0 + np.exp((rho - 1.0) * (r_mean / soft)))
    return _finalize(img, rng, p)


def generate_malignant(seed: int, params: SynthParams = SynthParams()) -> ImageGray:
    """Bright core with an irregular sharp margin and radiating spikes.

    Spike lengths are drawn as fractions of the core radius and extend
    outward from the margin; spike_count (0, 0) degrades gracefully to a
    spikeless irregular blob.
    """
    rng = np.random.default_rng(seed)
    p = params
    img = _background(rng, p)
    s = p.side
    cy, cx = rng.uniform(0.38 * s, 0.62 * s, size=2)
    r_core = rng.uniform(*p.core_radius) * s
    soft = rng.uniform(*p.core_softness)
    amp = rng.uniform(*p.core_brightness)

    yy, xx = np.mgrid[0:s, 0:s]
    dy, dx = yy - cy, xx - cx
    r = np.sqrt(dy * dy + dx * dx)
    theta = np.arctan2(dy, dx)
    margin = r_core * (1.0 + p.margin_irregularity * _angular_wobble(rng, theta))
    margin = np.maximum(margin, 1.0)
    img += amp / (1.0 + np.exp((r - margin) / soft))

    lo, hi = p.spike_count
    n_spikes = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    for _ in range(n_spikes):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        length = rng.uniform(*p.spike_length) * r_core
        width = rng.uniform(*p.spike_width)
        strength = amp * rng.uniform(0.75, 1.0)
        base_r = r_core * 0.85
        a_pt = np.array([cy + base_r * np.sin(ang), cx + base_r * np.cos(ang)])
        b_pt = np.array([cy + (base_r + length + r_core * 0.15) * np.sin(ang),
                         cx + (base_r + length + r_core * 0.15) * np.cos(ang)])
        seg = b_pt - a_pt
        seg_len2 = float(seg @ seg)
        t = np.clip(((pts - a_pt) @ seg) / seg_len2, 0.0, 1.0)
        proj = a_pt + t[:, None] * seg
        d = np.sqrt(((pts - proj) ** 2).sum(axis=1))
        taper = 1.0 - 0.6 * t
        img += (strength * np.maximum(0.0, 1.0 - d / width) * taper).reshape(s, s)
    return _finalize(img, rng, p)


def generate(label: Label, seed: int, params: SynthParams = SynthParams()) -> ImageGray:
    if label is Label.BENIGN:
        return generate_benign(seed, params)
    return generate_malignant(seed, params)


# -- augmentation ------------------------------------------------------------


class AugmentKind(Enum):
    FLIP_H = "fliph"
    FLIP_V = "flipv"
    ROTATE = "rot"
    BRIGHTNESS = "b"
    CONTRAST = "c"


@dataclass(frozen=True)
class AugmentOp:
    kind: AugmentKind
    amount: float = 0.0

    @property
    def suffix(self) -> str:
        k = self.kind
        if k is AugmentKind.FLIP_H or k is AugmentKind.FLIP_V:
            return k.value
        if k is AugmentKind.ROTATE:
            return f"rot{int(self.amount) * 90}"
        if k is AugmentKind.BRIGHTNESS:
            return f"b{self.amount:+g}"
        return f"c{self.amount:g}"


def apply_augment(img: ImageGray, op: AugmentOp) -> ImageGray:
    """Deterministic pixel transform; photometric ops clamp to 0..255."""
    p = img.pixels
    k = op.kind
    if k is AugmentKind.FLIP_H:
        return ImageGray(p[:, ::-1])
    if k is AugmentKind.FLIP_V:
        return ImageGray(p[::-1, :])
    if k is AugmentKind.ROTATE:
        return ImageGray(np.rot90(p, int(op.amount) % 4))
    if k is AugmentKind.BRIGHTNESS:
        return ImageGray(np.clip(p.astype(np.float64) + op.amount, 0, 255))
    if k is AugmentKind.CONTRAST:
        return ImageGray(np.clip(128.0 + (p.astype(np.float64) - 128.0) * op.amount, 0, 255))
    raise ValueError(f"unknown augmentation {op!r}")


def default_augment_cycle() -> list[AugmentOp]:
    """Variant recipe used for class balancing, applied round-robin."""
    return [
        AugmentOp(AugmentKind.FLIP_H),
        AugmentOp(AugmentKind.FLIP_V),
        AugmentOp(AugmentKind.ROTATE, 1),
        AugmentOp(AugmentKind.ROTATE, 2),
        AugmentOp(AugmentKind.ROTATE, 3),
        AugmentOp(AugmentKind.BRIGHTNESS, 18),
        AugmentOp(AugmentKind.BRIGHTNESS, -18),
        AugmentOp(AugmentKind.CONTRAST, 0.85),
        AugmentOp(AugmentKind.CONTRAST, 1.15),
    ]


# -- dataset assembly --------------------------------------------------------


@dataclass
class DatasetConfig:
    benign: int = 300
    malignant: int = 300
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 42
    source: str = "synthetic"  # or "ingest"
    ingest_root: str | Path | None = None
    synth: SynthParams = field(default_factory=SynthParams)

    def validate(self) -> None:
        fr = self.split
        if len(fr) != 3 or any(f < 0 for f in fr) or not np.isclose(sum(fr), 1.0, atol=1e-6):
            raise ValueError(f"split fractions {fr} must be three nonnegatives summing to 1")
        if fr[0] <= 0:
            raise ValueError("train fraction must be positive")
        if self.source not in ("synthetic", "ingest"):
            raise ValueError(f"source {self.source!r} must be 'synthetic' or 'ingest'")
        if self.source == "synthetic" and (self.benign < 1 or self.malignant < 1):
            raise EmptyClassError(
                f"per-class counts ({self.benign}, {self.malignant}) must be >= 1")
        if self.source == "ingest" and self.ingest_root is None:
            raise ValueError("ingest source requires ingest_root")


@dataclass
class Dataset:
    """Assembled image collection with split labels and train-split stats.

    mean/std are the train split's pixel statistics on the [0, 1] scale,
    recorded so every consumer normalizes identically and nothing leaks
    from val or test.
    """
    items: list[LabeledImage]
    seed: int
    mean: float
    std: float
    skipped: int = 0

    def split_items(self, split: Split) -> list[LabeledImage]:
        return [it for it in self.items if it.split is split]

    def counts(self, split: Split) -> dict[Label, int]:
        out = {Label.BENIGN: 0, Label.MALIGNANT: 0}
        for it in self.split_items(split):
            out[it.label] += 1
        return out


def _synth_originals(cfg: DatasetConfig) -> list[LabeledImage]:
    out = []
    for label, count, prefix in ((Label.BENIGN, cfg.benign, "b"),
                                 (Label.MALIGNANT, cfg.malignant, "m")):
        for i in range(count):
            seed = stable_seed("synth", cfg.seed, label.value, i)
            out.append(LabeledImage(
                id=f"{prefix}{i:04d}", label=label,
                image=generate(label, seed, cfg.synth), source="synthetic"))
    return out


def _ingest_originals(cfg: DatasetConfig) -> tuple[list[LabeledImage], int]:
    root = Path(cfg.ingest_root)
    if not root.is_dir():
        raise IngestError(f"ingest root {root} does not exist")
    out: list[LabeledImage] = []
    skipped = 0
    for label, sub, prefix in ((Label.BENIGN, "benign", "b"),
                               (Label.MALIGNANT, "malignant", "m")):
        folder = root / sub
        if not folder.is_dir():
            raise IngestError(f"ingest root {root} is missing a {sub}/ directory")
        idx = 0
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in (".pgm", ".png"):
                continue
            try:
                img = read_image(path)
            except OSError:
                skipped += 1
                continue
            out.append(LabeledImage(id=f"{prefix}{idx:04d}", label=label,
                                    image=img, source=str(path)))
            idx += 1
    for label, sub in ((Label.BENIGN, "benign"), (Label.MALIGNANT, "malignant")):
        if not any(it.label is label for it in out):
            raise EmptyClassError(f"no readable images under {root / sub}")
    return out, skipped


def _balance_with_variants(by_label: dict[Label, list[LabeledImage]],
                           variant_counts: dict[str, int]) -> list[LabeledImage]:
    """Top the minority class up to the majority count with augmented copies.

    Sources are cycled in id order; each new variant of a source takes the
    next op from the recipe so repeated visits stay distinct.
    """
    nb = len(by_label[Label.BENIGN])
    nm = len(by_label[Label.MALIGNANT])
    if nb == nm:
        return []
    minority = Label.BENIGN if nb < nm else Label.MALIGNANT
    deficit = abs(nb - nm)
    cycle = default_augment_cycle()
    sources = by_label[minority]
    fresh: list[LabeledImage] = []
    si = 0
    while deficit > 0:
        src = sources[si % len(sources)]
        k = variant_counts.get(src.id, 0)
        if k >= len(cycle):
            raise ValueError(
                f"augmentation recipe exhausted for {src.id}; class imbalance too large")
        op = cycle[k]
        variant_counts[src.id] = k + 1
        fresh.append(LabeledImage(
            id=f"{src.id}+{op.suffix}", label=src.label,
            image=apply_augment(src.image, op), source=src.id))
        si += 1
        deficit -= 1
    return fresh


def _assign_splits(originals: list[LabeledImage], cfg: DatasetConfig) -> None:
    """Stratified, seeded split over source images (variants inherit later)."""
    for label in (Label.BENIGN, Label.MALIGNANT):
        mine = [it for it in originals if it.label is label]
        rng = spawn_rng("split", cfg.seed, label.value)
        order = rng.permutation(len(mine))
        n = len(mine)
        n_train = int(round(n * cfg.split[0]))
        n_val = int(round(n * cfg.split[1]))
        n_val = min(n_val, n - n_train)
        for rank, idx in enumerate(order):
            if rank < n_train:
                mine[idx].split = Split.TRAIN
            elif rank < n_train + n_val:
                mine[idx].split = Split.VAL
            else:
                mine[idx].split = Split.TEST


def build_dataset(cfg: DatasetConfig = DatasetConfig()) -> Dataset:
    """Generate or ingest images, balance classes, split and standardize.

    Balancing happens in two passes: totals are equalized with augmented
    variants before splitting, each variant landing in the same split as
    its source; if rounding still leaves the train split lopsided, extra
    variants of train-split minority sources top it up exactly. Train
    per-class counts always come out equal.
    """
    cfg.validate()
    skipped = 0
    if cfg.source == "synthetic":
        originals = _synth_originals(cfg)
    else:
        originals, skipped = _ingest_originals(cfg)

    by_label = {
        Label.BENIGN: [i for i in originals if i.label is Label.BENIGN],
        Label.MALIGNANT: [i for i in originals if i.label is Label.MALIGNANT],
    }
    variant_counts: dict[str, int] = {}
    pre_variants = _balance_with_variants(by_label, variant_counts)

    _assign_splits(originals, cfg)
    by_source = {it.id: it for it in originals}
    for v in pre_variants:
        v.split = by_source[v.source].split

    items = originals + pre_variants

    # exact train balance: rounding or uneven variant flow can leave a gap
    def train_counts():
        c = {Label.BENIGN: 0, Label.MALIGNANT: 0}
        for it in items:
            if it.split is Split.TRAIN:
                c[it.label] += 1
        return c

    counts = train_counts()
    if counts[Label.BENIGN] != counts[Label.MALIGNANT]:
        minority = (Label.BENIGN if counts[Label.BENIGN] < counts[Label.MALIGNANT]
                    else Label.MALIGNANT)
        gap = abs(counts[Label.BENIGN] - counts[Label.MALIGNANT])
        train_sources = [it for it in originals
                         if it.label is minority and it.split is Split.TRAIN]
        if not train_sources:
            raise EmptyClassError(f"no {minority.name.lower()} sources in the train split")
        cycle = default_augment_cycle()
        si = 0
        while gap > 0:
            src = train_sources[si % len(train_sources)]
            k = variant_counts.get(src.id, 0)
            if k >= len(cycle):
                raise ValueError(
                    f"augmentation recipe exhausted for {src.id}; cannot balance train split")
            op = cycle[k]
            variant_counts[src.id] = k + 1
            items.append(LabeledImage(
                id=f"{src.id}+{op.suffix}", label=src.label,
                image=apply_augment(src.image, op), source=src.id, split=Split.TRAIN))
            si += 1
            gap -= 1

    for label in (Label.BENIGN, Label.MALIGNANT):
        if not any(it.label is label for it in items):
            raise EmptyClassError(f"class {label.name.lower()} is empty")

    train_pixels = [it.image.pixels for it in items if it.split is Split.TRAIN]
    if not train_pixels:
        raise EmptyClassError("train split is empty")
    stacked = np.concatenate([p.reshape(-1) for p in train_pixels]).astype(np.float64) / 255.0
    mean = float(stacked.mean())
    std = float(max(stacked.std(), 1e-6))
    return Dataset(items=items, seed=cfg.seed, mean=mean, std=std, skipped=skipped)


# -- manifest ----------------------------------------------------------------


def write_manifest(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "source", "split"])
        for it in ds.items:
            w.writerow([it.id, it.label.name.lower(), it.source,
                        it.split.value if it.split else ""])


def export_images(ds: Dataset, out_dir: str | Path, fmt: str = "png") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for it in ds.items:
        write_image(it.image, out_dir / f"{it.id}.{fmt}")


# -- model input -------------------------------------------------------------


def bilinear_resize(pixels: Array, out_h: int, out_w: int) -> Array:
    """Continuous bilinear resample (half-pixel centers, edge clamped).

    Identity when the size already matches, returned as float64 either way.
    """
    src = pixels.astype(np.float64)
    h, w = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()

    def axis_coords(n_out, n_src):
        coords = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
        i0 = np.floor(coords).astype(np.int64)
        f = coords - i0
        lo = np.clip(i0, 0, n_src - 1)
        hi = np.clip(i0 + 1, 0, n_src - 1)
        return lo, hi, f

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def standardize(pixels: Array, side: int, mean: float, std: float) -> Array:
    """Resize to side x side, scale to [0, 1] and normalize. Float32 [1, s, s]."""
    resized = bilinear_resize(pixels, side, side) / 255.0
    return ((resized - mean) / std).astype(np.float32)[None, :, :]


def to_model_input(img: ImageGray, side: int, mean: float, std: float) -> engine.Tensor:
    """Single-image model input: a [1, side, side] standardized tensor."""
    return engine.Tensor(standardize(img.pixels, side, mean, std))
