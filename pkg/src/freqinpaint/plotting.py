"""Figure export: comparison grids, spectrum maps, training curves, bucket charts."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from .dataio import to_unit  # noqa: E402
from .spectral import forward_dft, spectrum_magnitude_map  # noqa: E402

GRID_COLUMNS = ("Input", "Ours", "GT", "DFT (ours)", "DFT (GT)")


def _rgb(img: torch.Tensor) -> np.ndarray:
    return to_unit(img.detach().cpu()).permute(1, 2, 0).numpy()


def spectrum_map(img: torch.Tensor) -> np.ndarray:
    """Centered log-magnitude map in [0, 1] of a ``(C, H, W)`` image in [-1, 1]."""
    return spectrum_magnitude_map(forward_dft(img.detach().cpu().double())).numpy()


def save_spectrum_png(img: torch.Tensor, path) -> None:
    """8-bit grayscale PNG of :func:`spectrum_map`."""
    m = spectrum_map(img)
    Image.fromarray(np.floor(m * 255 + 0.5).astype(np.uint8), mode="L").save(path)


def comparison_grid(inputs, outputs, gts, spectra_src=None, path=None, titles=GRID_COLUMNS):
    """Grid of ``len(inputs)`` rows x 5 columns.

    Columns are input, composite output, ground truth, spectrum of
    ``spectra_src`` (the stage-1 guidance; defaults to the output) and the
    spectrum of the ground truth.  Returns the figure, saving it if ``path``.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("comparison grid needs at least one row")
    spectra_src = outputs if spectra_src is None else spectra_src
    fig, axes = plt.subplots(n, len(titles), figsize=(2 * len(titles), 2 * n), squeeze=False)
    for r in range(n):
        cells = [_rgb(inputs[r]), _rgb(outputs[r]), _rgb(gts[r]),
                 spectrum_map(spectra_src[r]), spectrum_map(gts[r])]
        for c, cell in enumerate(cells):
            ax = axes[r, c]
            if cell.ndim == 2:
                ax.imshow(cell, cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(np.clip(cell, 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(titles[c], fontsize=9)
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=80)
        plt.close(fig)
    return fig


def plot_curves(rows: Sequence[dict], x: str, ys: Sequence[str], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [r[x] for r in rows]
    for y in ys:
        vals = [r.get(y) for r in rows]
        if any(v is not None for v in vals):
            ax.plot(xs, [np.nan if v is None else v for v in vals], label=y)
    ax.set_xlabel(x)
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bucket_metrics(reports: dict, path, metric: str = "psnr") -> None:
    """Bar chart of one metric per bucket, one bar group per model."""
    names = list(reports)
    buckets = []
    for r in reports.values():
        buckets += [b for b in r.buckets if b not in buckets]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(buckets) + 2), 3.2))
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        vals = [getattr(reports[name].buckets[b], metric) if b in reports[name].buckets else np.nan
                for b in buckets]
        ax.bar(np.arange(len(buckets)) + i * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(buckets)) + width * (len(names) - 1) / 2)
    ax.set_xticklabels(buckets)
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_mask_profile(profile: np.ndarray, reference: Optional[np.ndarray], path) -> None:
    """Mask power profile along one axis against its closed-form envelope."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    p = np.arange(len(profile))
    ax.semilogy(p, np.maximum(profile, 1e-12), "o-", ms=3, label="measured")
    if reference is not None:
        ax.semilogy(p, np.maximum(reference, 1e-12), "--", label="rectangular window")
    ax.set_xlabel("p")
    ax.set_ylabel("|M(p, 0)|^2")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(results: dict, path) -> None:
    """``results`` maps arm -> list of per-seed PSNRs."""
    arms = list(results)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for i, arm in enumerate(arms):
        vals = np.asarray(results[arm], dtype=float)
        ax.scatter(np.full(len(vals), i), vals, s=18)
        ax.hlines(vals.mean(), i - 0.25, i + 0.25)
    ax.set_xticks(range(len(arms)))
    ax.set_xticklabels(arms)
    ax.set_ylabel("held-out PSNR (dB)")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100)
    plt.close(fig)
