"""Feature enhancement transforms for 8-bit grayscale images.

Four switchable preprocessing paths feed the classifiers: the untouched
original, photographic negative, contrast-limited adaptive histogram
equalization, and an oriented-gradient descriptor rendered back into an
image so downstream models keep a uniform input contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

Array = np.ndarray


class EnhancementKind(Enum):
    ORIGINAL = "original"
    NEGATIVE = "negative"
    AHE = "ahe"
    HOG = "hog"


class ImageGray:
    """8-bit grayscale raster, row-major uint8 pixels."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: Array):
        arr = np.asarray(pixels)
        if arr.ndim != 2:
            raise ValueError(f"ImageGray expects a 2D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.floating):
                arr = np.clip(np.floor(arr + 0.5), 0, 255)
            arr = arr.astype(np.uint8)
        self.pixels = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def copy(self) -> "ImageGray":
        return ImageGray(self.pixels.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageGray) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:  # pragma: no cover
        return f"ImageGray({self.width}x{self.height})"


@dataclass(frozen=True)
class AheParams:
    """Adaptive equalization controls.

    clip_limit is a multiple of the uniform histogram bin height; math.inf
    disables clipping entirely. tile_grid counts contextual regions, not
    pixels per tile.
    """
    tile_grid: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256

    def validate(self) -> None:
        r, c = self.tile_grid
        if r < 1 or c < 1:
            raise ValueError(f"tile_grid {self.tile_grid} must be >= 1x1")
        if not (self.clip_limit >= 1.0):
            raise ValueError(f"clip_limit {self.clip_limit} must be >= 1")
        if not (2 <= self.bins <= 256):
            raise ValueError(f"bins {self.bins} must lie in [2, 256]")


@dataclass(frozen=True)
class HogParams:
    cell: int = 8
    block: int = 2
    bins: int = 9

    def validate(self) -> None:
        if self.cell < 2:
            raise ValueError(f"cell {self.cell} must be >= 2")
        if self.block < 1:
            raise ValueError(f"block {self.block} must be >= 1")
        if self.bins < 2:
            raise ValueError(f"bins {self.bins} must be >= 2")


@dataclass
class HogDescriptor:
    """Block-normalized oriented-gradient features.

    values has shape [blocks_y, blocks_x, block*block*bins]; cells_y/cells_x
    record the underlying cell grid so renderers can recover per-cell
    energies by averaging over the blocks that cover each cell.
    """
    values: Array
    cells_y: int
    cells_x: int
    params: HogParams = field(default_factory=HogParams)


def negative(img: ImageGray) -> ImageGray:
    """Photographic negative: 255 minus every pixel. Its own inverse."""
    return ImageGray(255 - img.pixels)


# -- adaptive histogram equalization ----------------------------------------


def _tile_mapping(tile: Array, clip_limit: float, bins: int) -> Array:
    """Per-tile gray-level mapping as a uint8 lookup table over `bins` bins.

    Histogram is clipped at clip_limit times the uniform bin height, the
    excess spread evenly over all bins, then the classic equalization
    formula maps through the cumulative distribution. The output range is
    stretched between the CDF at the lowest and at the highest gray level
    actually present in the tile, so those levels land on 0 and 255 even
    when redistribution parks mass in never-observed bins. Without
    clipping the upper anchor equals the total count and the formula is
    plain global histogram equalization. A constant tile has no usable
    distribution and maps identically.
    """
    n = tile.size
    hist = np.bincount((tile.astype(np.int64).ravel() * bins) >> 8,
                       minlength=bins).astype(np.float64)
    occupied = np.flatnonzero(hist)
    if occupied.size <= 1:
        lut = np.arange(bins, dtype=np.float64)
        lut = np.floor((lut + 0.5) * 256.0 / bins)
        return np.clip(lut, 0, 255).astype(np.uint8)
    if math.isfinite(clip_limit):
        limit = clip_limit * n / bins
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / bins
    cdf = np.cumsum(hist)
    cmin = cdf[occupied[0]]
    cmax = cdf[occupied[-1]]
    lut = np.floor(255.0 * (cdf - cmin) / (cmax - cmin) + 0.5)
    return np.clip(lut, 0, 255).astype(np.uint8)


def ahe(img: ImageGray, params: AheParams = AheParams()) -> ImageGray:
    """Contrast-limited adaptive histogram equalization.

    Tile mappings are computed on a grid of contextual regions (the image is
    edge-replicated out to a tile multiple) and each output pixel bilinearly
    interpolates between the mappings of its four nearest tile centers,
    which removes tile-boundary seams. With a 1x1 grid and infinite clip
    limit this degenerates to global histogram equalization exactly.
    """
    params.validate()
    rows, cols = params.tile_grid
    bins = params.bins
    h, w = img.pixels.shape
    th = (h + rows - 1) // rows
    tw = (w + cols - 1) // cols
    pad_y = rows * th - h
    pad_x = cols * tw - w
    padded = np.pad(img.pixels, ((0, pad_y), (0, pad_x)), mode="edge")

    luts = np.empty((rows, cols, bins), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            luts[r, c] = _tile_mapping(tile, params.clip_limit, bins)

    bin_idx = (img.pixels.astype(np.int64) * bins) >> 8

    # fractional tile coordinates of each pixel relative to tile centers
    fy = (np.arange(h) - (th - 1) / 2.0) / th
    fx = (np.arange(w) - (tw - 1) / 2.0) / tw
    r0 = np.clip(np.floor(fy), 0, rows - 1).astype(np.int64)
    c0 = np.clip(np.floor(fx), 0, cols - 1).astype(np.int64)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    wy = np.clip(fy - np.floor(fy), 0.0, 1.0)
    wx = np.clip(fx - np.floor(fx), 0.0, 1.0)
    wy = np.where(fy < 0, 0.0, wy)[:, None]
    wx = np.where(fx < 0, 0.0, wx)[None, :]

    tl = luts[r0[:, None], c0[None, :], bin_idx].astype(np.float64)
    tr = luts[r0[:, None], c1[None, :], bin_idx].astype(np.float64)
    bl = luts[r1[:, None], c0[None, :], bin_idx].astype(np.float64)
    br = luts[r1[:, None], c1[None, :], bin_idx].astype(np.float64)
    out = ((1 - wy) * ((1 - wx) * tl + wx * tr) + wy * ((1 - wx) * bl + wx * br))
    return ImageGray(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


# -- histogram of oriented gradients ----------------------------------------


def _gradients(pixels: Array) -> tuple[Array, Array]:
    """Centered [-1, 0, 1] differences with edge replication."""
    p = np.pad(pixels.astype(np.float64), 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def hog_descriptor(img: ImageGray, params: HogParams = HogParams()) -> HogDescriptor:
    """Unsigned-orientation HOG with magnitude-split votes and L2-Hys blocks.

    Orientation bins center on multiples of (180/bins) degrees; each
    gradient splits its magnitude linearly between the two nearest centers
    (circular over 180). Cell histograms group into overlapping block*block
    blocks that are L2-normalized, clipped at 0.2 and renormalized.
    Pixels beyond the last full cell are ignored.
    """
    params.validate()
    cell, block, bins = params.cell, params.block, params.bins
    h, w = img.pixels.shape
    cy, cx = h // cell, w // cell
    if cy < block or cx < block:
        raise ValueError(
            f"image {w}x{h} too small for {block}x{block} blocks of {cell}px cells")

    gx, gy = _gradients(img.pixels)
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0

    width = 180.0 / bins
    pos = ang / width
    b0 = np.floor(pos).astype(np.int64) % bins
    frac = pos - np.floor(pos)
    b1 = (b0 + 1) % bins

    hists = np.zeros((cy, cx, bins), dtype=np.float64)
    ys = np.arange(cy * cell) // cell
    xs = np.arange(cx * cell) // cell
    cell_of_y = ys[:, None]
    cell_of_x = xs[None, :]
    region = np.s_[:cy * cell, :cx * cell]
    np.add.at(hists, (cell_of_y, cell_of_x, b0[region]), (mag * (1 - frac))[region])
    np.add.at(hists, (cell_of_y, cell_of_x, b1[region]), (mag * frac)[region])

    by, bx = cy - block + 1, cx - block + 1
    values = np.zeros((by, bx, block * block * bins), dtype=np.float64)
    for i in range(by):
        for j in range(bx):
            v = hists[i:i + block, j:j + block].reshape(-1)
            v = v / np.sqrt((v * v).sum() + 1e-10)
            v = np.minimum(v, 0.2)
            v = v / np.sqrt((v * v).sum() + 1e-10)
            values[i, j] = v
    return HogDescriptor(values=values, cells_y=cy, cells_x=cx, params=params)


def _cell_energies(desc: HogDescriptor) -> Array:
    """Average each cell's normalized histogram over every covering block."""
    block, bins = desc.params.block, desc.params.bins
    cy, cx = desc.cells_y, desc.cells_x
    by, bx = desc.values.shape[:2]
    acc = np.zeros((cy, cx, bins), dtype=np.float64)
    cnt = np.zeros((cy, cx, 1), dtype=np.float64)
    vals = desc.values.reshape(by, bx, block, block, bins)
    for i in range(by):
        for j in range(bx):
            acc[i:i + block, j:j + block] += vals[i, j]
            cnt[i:i + block, j:j + block] += 1.0
    return acc / cnt


def hog_render(desc: HogDescriptor, out_h: int, out_w: int) -> ImageGray:
    """Draw the descriptor as oriented glyphs, one per cell.

    Each orientation bin contributes a line segment through the cell center,
    rotated 90 degrees from the gradient direction (so glyphs trace edges,
    not gradients), with intensity proportional to the cell's normalized
    bin energy. Segments are splatted with bilinear anti-aliasing and the
    result is rescaled so the brightest pixel is 255; an all-zero
    descriptor renders to an all-zero image.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"render size {out_w}x{out_h} must be positive")
    energies = _cell_energies(desc)
    cy, cx = desc.cells_y, desc.cells_x
    bins = desc.params.bins
    canvas = np.zeros((out_h, out_w), dtype=np.float64)
    ch = out_h / cy
    cw = out_w / cx
    half = min(ch, cw) / 2.0 - 0.5
    width = 180.0 / bins
    steps = max(2, int(math.ceil(half * 4)))
    ts = np.linspace(-1.0, 1.0, steps)
    yc = ((np.arange(cy) + 0.5) * ch - 0.5)[:, None, None]
    xc = ((np.arange(cx) + 0.5) * cw - 0.5)[None, :, None]
    for b in range(bins):
        theta = math.radians(b * width + 90.0)
        dy, dx = math.sin(theta), math.cos(theta)
        py = np.broadcast_to(yc + ts[None, None, :] * (half * dy), (cy, cx, steps)).ravel()
        px = np.broadcast_to(xc + ts[None, None, :] * (half * dx), (cy, cx, steps)).ravel()
        wgt = np.repeat(energies[:, :, b].reshape(-1), steps)
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        ry = py - y0
        rx = px - x0
        for oy, wy_ in ((0, 1 - ry), (1, ry)):
            for ox, wx_ in ((0, 1 - rx), (1, rx)):
                yy = y0 + oy
                xx = x0 + ox
                ok = (yy >= 0) & (yy < out_h) & (xx >= 0) & (xx < out_w)
                np.add.at(canvas, (yy[ok], xx[ok]), (wgt * wy_ * wx_)[ok])
    peak = canvas.max()
    if peak > 0:
        canvas = canvas * (255.0 / peak)
    return ImageGray(np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8))


def enhance(img: ImageGray, kind: EnhancementKind,
            ahe_params: AheParams = AheParams(),
            hog_params: HogParams | None = None) -> ImageGray:
    """Apply one enhancement, returning a fresh image of the same size.

    The HOG path renders the descriptor at the input resolution so every
    enhancement yields the same shape. Small inputs fall back to a smaller
    cell size so at least one block fits.
    """
    if kind is EnhancementKind.ORIGINAL:
        return img.copy()
    if kind is EnhancementKind.NEGATIVE:
        return negative(img)
    if kind is EnhancementKind.AHE:
        return ahe(img, ahe_params)
    if kind is EnhancementKind.HOG:
        params = hog_params
        if params is None:
            params = HogParams()
            short = min(img.height, img.width)
            while short // params.cell < params.block and params.cell > 2:
                params = HogParams(cell=params.cell // 2, block=params.block,
                                   bins=params.bins)
        desc = hog_descriptor(img, params)
        return hog_render(desc, img.height, img.width)
    raise ValueError(f"unknown enhancement kind {kind!r}")


# -- image I/O ---------------------------------------------------------------


def read_image(path: str | Path) -> ImageGray:
    """Read a PGM (P5) or 8-bit grayscale PNG file."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return ImageGray(np.asarray(im, dtype=np.uint8))


def write_image(img: ImageGray, path: str | Path) -> None:
    """Write PGM (P5) or PNG based on the file extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + img.pixels.tobytes())
    elif suffix == ".png":
        Image.fromarray(img.pixels, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image extension {suffix!r} (use .pgm or .png)")
