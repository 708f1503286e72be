"""Mask generation, loading, application and compositing.

Masks follow the multiplicative convention ``I_in = I_gt * M``: ``1`` marks a
known pixel, ``0`` a hole.  On disk, irregular masks use the usual
white-is-hole convention and are inverted on load.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

# Half-open hole-fraction intervals [lo, hi).
BUCKETS = {
    "10-20": (0.10, 0.20),
    "20-30": (0.20, 0.30),
    "30-40": (0.30, 0.40),
    "40-50": (0.40, 0.50),
    "50-60": (0.50, 0.60),
}
REGULAR_BUCKET = "regular25"
BUCKET_ORDER = (*BUCKETS, REGULAR_BUCKET)
BINARIZE_THRESHOLD = 127
MASK_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class MaskGeometryError(ValueError):
    pass


class MaskDatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    kind: str  # "regular" | "irregular"
    grid: np.ndarray  # (H, W) uint8, 1 = known, 0 = hole
    ratio_bucket: Optional[str] = None
    rect: Optional[tuple] = None  # (top, left, height, width) of the hole
    source: Optional[str] = None

    @property
    def hole_count(self) -> int:
        return int(self.grid.size - int(self.grid.sum()))

    @property
    def hole_fraction(self) -> float:
        return self.hole_count / self.grid.size

    def tensor(self, channels: int = 1, dtype=torch.float32) -> torch.Tensor:
        t = torch.from_numpy(self.grid.astype(np.float32)).to(dtype)
        return t.unsqueeze(0).expand(channels, -1, -1).contiguous()


def bucket_of(hole_fraction: float) -> Optional[str]:
    for name, (lo, hi) in BUCKETS.items():
        if lo <= hole_fraction < hi:
            return name
    return None


def in_bucket(hole_fraction: float, bucket: str) -> bool:
    lo, hi = BUCKETS[bucket]
    return lo <= hole_fraction < hi


def regular_side(h: int, w: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise MaskGeometryError(f"hole ratio must be in (0, 1], got {ratio}")
    side = int(round(math.sqrt(ratio * h * w)))
    if side > min(h, w):
        raise MaskGeometryError(f"square hole of side {side} does not fit a {h}x{w} grid")
    return side


def gen_regular_mask(h: int, w: int, ratio: float = 0.25, seed=None) -> MaskSpec:
    """Randomly placed square hole covering ``ratio`` of the image."""
    side = regular_side(h, w, ratio)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    grid = np.ones((h, w), dtype=np.uint8)
    grid[top:top + side, left:left + side] = 0
    bucket = REGULAR_BUCKET if math.isclose(ratio, 0.25) else None
    return MaskSpec("regular", grid, bucket, (top, left, side, side))


def _stroke_layer(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """One random brush stroke as a boolean hole image."""
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    n_vertices = int(rng.integers(2, 6))
    width = int(rng.integers(max(2, h // 32), max(3, h // 8) + 1))
    x, y = rng.uniform(0, w), rng.uniform(0, h)
    pts = [(x, y)]
    for _ in range(n_vertices):
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(h / 8, h / 3)
        x = float(np.clip(x + length * np.cos(angle), 0, w - 1))
        y = float(np.clip(y + length * np.sin(angle), 0, h - 1))
        pts.append((x, y))
    draw.line(pts, fill=255, width=width, joint="curve")
    r = width / 2
    for px, py in pts:
        draw.ellipse((px - r, py - r, px + r, py + r), fill=255)
    return np.asarray(img) > 0


def gen_irregular_mask(h: int, w: int, bucket: str, seed=None, max_tries: int = 200) -> MaskSpec:
    """Free-form brush-stroke mask whose hole fraction falls inside ``bucket``.

    Strokes are accumulated until the hole fraction reaches a target drawn
    uniformly from the bucket; an overshoot past the bucket restarts.
    """
    lo, hi = BUCKETS[bucket]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(max_tries):
        target = rng.uniform(lo, hi)
        hole = np.zeros((h, w), dtype=bool)
        while hole.mean() < target:
            hole |= _stroke_layer(h, w, rng)
        if in_bucket(float(hole.mean()), bucket):
            grid = (~hole).astype(np.uint8)
            return MaskSpec("irregular", grid, bucket)
    raise MaskGeometryError(f"could not draw a mask in bucket {bucket} after {max_tries} tries")


def save_mask_png(m: MaskSpec, path) -> None:
    """Write in the on-disk convention (white = hole)."""
    Image.fromarray(((1 - m.grid) * 255).astype(np.uint8), mode="L").save(path)


def _center_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return arr[top:top + s, left:left + s]


def decode_mask_file(path, size: Optional[int] = None) -> np.ndarray:
    """Read an on-disk mask and return the ``1 = known`` grid."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    gray = _center_square(gray)
    if size is not None and gray.shape != (size, size):
        gray = np.asarray(Image.fromarray(gray).resize((size, size), Image.NEAREST))
    return (gray <= BINARIZE_THRESHOLD).astype(np.uint8)


def augment_grid(grid: np.ndarray) -> list:
    """Rotations by 0/90/180/270 degrees, each with and without a horizontal flip."""
    out = []
    for k in range(4):
        r = np.rot90(grid, k)
        out.append(np.ascontiguousarray(r))
        out.append(np.ascontiguousarray(r[:, ::-1]))
    return out


def load_irregular_masks(
    directory,
    bucket: Optional[str] = None,
    augment: bool = False,
    size: Optional[int] = None,
) -> list:
    """Load and bucket the mask images in ``directory``.

    When ``bucket`` is ``None`` it is taken from the directory name (e.g.
    ``masks/20-30``).  Masks are always re-measured and only those whose hole
    fraction lies inside the bucket are kept.
    """
    directory = Path(directory)
    if bucket is None:
        match = re.search(r"(\d{2})-(\d{2})", directory.name)
        if not match or match.group(0) not in BUCKETS:
            raise MaskDatasetError(f"cannot infer a mask bucket from directory {directory}")
        bucket = match.group(0)
    if bucket not in BUCKETS:
        raise MaskDatasetError(f"unknown bucket {bucket!r}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in MASK_SUFFIXES)
    out = []
    for path in files:
        try:
            grid = decode_mask_file(path, size)
        except Exception as exc:  # PIL raises a zoo of exception types
            log.warning("skipping unreadable mask %s: %s", path, exc)
            continue
        hole = 1.0 - grid.mean()
        if not in_bucket(hole, bucket):
            continue
        variants = augment_grid(grid) if augment else [grid]
        out.extend(MaskSpec("irregular", g, bucket, source=str(path)) for g in variants)
    if not out:
        raise MaskDatasetError(f"no masks in {directory} fall in bucket {bucket}")
    return out


def _mask_tensor(m, like: torch.Tensor) -> torch.Tensor:
    t = m.tensor() if isinstance(m, MaskSpec) else torch.as_tensor(m)
    t = t.to(dtype=like.dtype, device=like.device)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"mask {tuple(t.shape)} does not match image {tuple(like.shape)}")
    return t


def apply_mask(img: torch.Tensor, m) -> torch.Tensor:
    """``img * M`` with the mask broadcast across channels."""
    return img * _mask_tensor(m, img)


def composite(in_img: torch.Tensor, pred: torch.Tensor, m) -> torch.Tensor:
    """``in_img + pred * (1 - M)``; ``in_img`` must already be zero inside the hole."""
    if in_img.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(in_img.shape)} vs {tuple(pred.shape)}")
    mask = _mask_tensor(m, in_img)
    return in_img + pred * (1 - mask)


class MaskSampler:
    """Draws per-sample training masks as ``(B, 1, H, W)`` tensors.

    ``mode="regular"`` places a random square of area ``ratio``;
    ``mode="irregular"`` picks from ``pool`` (a list of :class:`MaskSpec`).
    """

    def __init__(self, size: int, mode: str = "regular", ratio: float = 0.25,
                 pool: Optional[Sequence[MaskSpec]] = None):
        if mode not in ("regular", "irregular"):
            raise ValueError(f"unknown mask mode {mode!r}")
        if mode == "irregular" and not pool:
            raise MaskDatasetError("irregular mask mode needs a non-empty mask pool")
        self.size, self.mode, self.ratio = size, mode, ratio
        self.pool = list(pool or [])
        if mode == "regular":
            regular_side(size, size, ratio)

    def sample(self, n: int, rng: np.random.Generator) -> torch.Tensor:
        grids = []
        for _ in range(n):
            if self.mode == "regular":
                grids.append(gen_regular_mask(self.size, self.size, self.ratio, rng).grid)
            else:
                grids.append(self.pool[int(rng.integers(len(self.pool)))].grid)
        return torch.from_numpy(np.stack(grids).astype(np.float32)).unsqueeze(1)
