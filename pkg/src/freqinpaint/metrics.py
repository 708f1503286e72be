"""PSNR / SSIM / l1% on [0, 1] images and per-bucket aggregation.

All metric functions take arrays already mapped to [0, 1] (use
:func:`freqinpaint.dataio.to_unit` on network tensors) with a dynamic range
of one.  Images are ``(C, H, W)``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.signal import convolve2d

from .masking import BUCKET_ORDER

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRICS = ("psnr", "ssim", "l1_pct")


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(gt, pred):
    a, b = _as_array(gt), _as_array(pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _select(a, b, hole: Optional[np.ndarray]):
    if hole is None:
        return a, b
    sel = np.broadcast_to(_as_array(hole) > 0.5, a.shape)
    if not sel.any():
        raise ValueError("hole-only metric requested for a mask without holes")
    return a[sel], b[sel]


def mse(gt, pred, hole=None) -> float:
    a, b = _select(*_pair(gt, pred), hole)
    return float(np.mean((a - b) ** 2))


def psnr(gt, pred, hole=None) -> float:
    """``10 log10(1 / MSE)``; ``inf`` for identical inputs."""
    err = mse(gt, pred, hole)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def l1_pct(gt, pred, hole=None) -> float:
    a, b = _select(*_pair(gt, pred), hole)
    return float(100.0 * np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x: np.ndarray, y: np.ndarray, window: Optional[np.ndarray] = None) -> np.ndarray:
    """Single-channel SSIM map over the valid window positions."""
    w = gaussian_window() if window is None else window
    if x.shape[0] < w.shape[0] or x.shape[1] < w.shape[1]:
        raise ValueError(f"image {x.shape} is smaller than the {w.shape} SSIM window")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    def filt(z):
        return convolve2d(z, w, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx ** 2
    syy = filt(y * y) - my ** 2
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(gt, pred) -> float:
    """Mean SSIM over channels and valid positions (11x11 Gaussian, sigma 1.5, L = 1)."""
    a, b = _pair(gt, pred)
    if a.ndim == 2:
        a, b = a[None], b[None]
    return float(np.mean([ssim_map(a[c], b[c]).mean() for c in range(a.shape[0])]))


@dataclass
class ImageMetrics:
    name: str
    bucket: str
    psnr: float
    ssim: float
    l1_pct: float

    def as_row(self) -> dict:
        return {"image": self.name, "bucket": self.bucket, "psnr": _fmt(self.psnr),
                "ssim": _fmt(self.ssim), "l1_pct": _fmt(self.l1_pct)}


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.8f}"


def evaluate_pair(gt, pred, name: str = "", bucket: str = "", hole=None) -> ImageMetrics:
    if hole is not None:
        return ImageMetrics(name, bucket, psnr(gt, pred, hole), ssim(gt, pred), l1_pct(gt, pred, hole))
    return ImageMetrics(name, bucket, psnr(gt, pred), ssim(gt, pred), l1_pct(gt, pred))


@dataclass
class BucketSummary:
    bucket: str
    n: int
    psnr: float
    ssim: float
    l1_pct: float
    n_inf_psnr: int = 0


@dataclass
class MetricReport:
    images: list = field(default_factory=list)
    buckets: dict = field(default_factory=dict)  # bucket -> BucketSummary

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["image", "bucket", "psnr", "ssim", "l1_pct"])
        w.writeheader()
        for m in self.images:
            w.writerow(m.as_row())
        for s in self.buckets.values():
            w.writerow({"image": "MEAN", "bucket": s.bucket, "psnr": _fmt(s.psnr),
                        "ssim": _fmt(s.ssim), "l1_pct": _fmt(s.l1_pct)})
        return buf.getvalue()


def _bucket_key(name: str):
    return (BUCKET_ORDER.index(name), name) if name in BUCKET_ORDER else (len(BUCKET_ORDER), name)


def aggregate(images: Iterable[ImageMetrics], buckets: Optional[Sequence[str]] = None) -> MetricReport:
    """Arithmetic means per bucket; infinite PSNRs are left out of the mean and counted."""
    images = list(images)
    if not images:
        raise ValueError("cannot aggregate an empty metric list")
    names = sorted({m.bucket for m in images}, key=_bucket_key)
    if buckets is not None:
        for b in buckets:
            if b not in names:
                log.warning("bucket %s has no images; omitted", b)
        names = [b for b in buckets if b in names]
    report = MetricReport(images=images)
    for b in names:
        group = [m for m in images if m.bucket == b]
        finite = [m.psnr for m in group if not math.isinf(m.psnr)]
        report.buckets[b] = BucketSummary(
            bucket=b,
            n=len(group),
            psnr=float(np.mean(finite)) if finite else math.inf,
            ssim=float(np.mean([m.ssim for m in group])),
            l1_pct=float(np.mean([m.l1_pct for m in group])),
            n_inf_psnr=len(group) - len(finite),
        )
    return report


def _bucket_label(b: str) -> str:
    return "Regular" if b.startswith("regular") else f"{b}%"


def format_table(reports: dict) -> str:
    """Aligned text table: rows = metric x bucket, one column per model.

    ``reports`` maps a column name to a :class:`MetricReport`.
    """
    cols = list(reports)
    buckets = []
    for r in reports.values():
        buckets += [b for b in r.buckets if b not in buckets]
    buckets.sort(key=_bucket_key)
    header = ["Metric", "Mask"] + cols
    lines = []
    footnotes = []
    for metric, label, fmt in (("psnr", "PSNR+", "{:.2f}"), ("ssim", "SSIM+", "{:.3f}"),
                               ("l1_pct", "l1(%)-", "{:.2f}")):
        for b in buckets:
            row = [label, _bucket_label(b)]
            for c in cols:
                s = reports[c].buckets.get(b)
                if s is None:
                    row.append("-")
                    continue
                v = getattr(s, metric)
                cell = "inf" if math.isinf(v) else fmt.format(v)
                if metric == "psnr" and s.n_inf_psnr:
                    cell += "*"
                    footnotes.append(f"* {c} / {b}: {s.n_inf_psnr} of {s.n} images with infinite PSNR excluded")
                row.append(cell)
            lines.append(row)
    widths = [max(len(str(r[i])) for r in [header, *lines]) for i in range(len(header))]
    fmt_row = lambda r: "  ".join(str(v).rjust(w) for v, w in zip(r, widths))
    out = [fmt_row(header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    out += [fmt_row(r) for r in lines]
    out += sorted(set(footnotes))
    return "\n".join(out) + "\n"


def summary_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["model", "bucket", "n", "psnr", "ssim", "l1_pct", "n_inf_psnr"])
    for name, r in reports.items():
        for s in r.buckets.values():
            w.writerow([name, s.bucket, s.n, _fmt(s.psnr), _fmt(s.ssim), _fmt(s.l1_pct), s.n_inf_psnr])
    return buf.getvalue()
