"""Procedural tileable textures used as a desk-scale image corpus."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

FAMILIES = ("gratings", "plaid", "checker")


def _freq(rng: np.random.Generator, max_freq: int) -> tuple:
    while True:
        kx, ky = (int(v) for v in rng.integers(-max_freq, max_freq + 1, size=2))
        if 2 <= abs(kx) + abs(ky):
            return kx, ky


def generate_texture(rng: np.random.Generator, size: int = 64, max_freq: int = 8,
                     noise: float = 0.02) -> np.ndarray:
    """One ``(size, size, 3)`` float image in [0, 1].

    Frequencies are integer cycles per image so every texture tiles exactly.
    """
    y, x = np.mgrid[0:size, 0:size] / size
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    base = rng.uniform(0.3, 0.7, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    if family == "checker":
        kx, ky = _freq(rng, max_freq // 2)
        phase = 2 * np.pi * (kx * x + ky * y) + rng.uniform(0, 2 * np.pi)
        kx2, ky2 = -ky, kx
        phase2 = 2 * np.pi * (kx2 * x + ky2 * y) + rng.uniform(0, 2 * np.pi)
        wave = np.tanh(3 * np.sin(phase)) * np.tanh(3 * np.sin(phase2))
        img += wave[..., None] * rng.uniform(0.1, 0.25, size=3)
    else:
        n = 2 if family == "plaid" else int(rng.integers(2, 4))
        for _ in range(n):
            kx, ky = _freq(rng, max_freq)
            if family == "plaid" and _ == 1:
                kx, ky = -ky, kx
            phase = 2 * np.pi * (kx * x + ky * y) + rng.uniform(0, 2 * np.pi)
            img += np.sin(phase)[..., None] * rng.uniform(-0.2, 0.2, size=3)
    if noise > 0:
        img += rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0, 1)


def write_corpus(root, n: int = 500, size: int = 64, seed: int = 0, **kwargs) -> list:
    """Write ``n`` textures as PNGs under ``root``; returns their paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        arr = generate_texture(rng, size, **kwargs)
        path = root / f"tex_{i:05d}.png"
        Image.fromarray(np.floor(arr * 255 + 0.5).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
