"""Image folder ingestion, splits and batch iteration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SPLITS = ("train", "val", "test")


class ImageLoadError(IOError):
    pass


class DatasetError(RuntimeError):
    pass


def to_unit(img: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1]."""
    return (img + 1) / 2


def load_image(path, size: Optional[int] = 64, center_crop: bool = False) -> torch.Tensor:
    """Decode an RGB image to a ``(3, size, size)`` float32 tensor in [-1, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if center_crop:
                w, h = im.size
                s = min(w, h)
                im = im.crop(((w - s) // 2, (h - s) // 2, (w - s) // 2 + s, (h - s) // 2 + s))
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ImageLoadError(f"cannot decode {path}: {exc}") from exc
    arr = arr / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` in [-1, 1] -> ``(H, W, C)`` uint8, rounding half away from zero."""
    v = (img.detach().cpu().double().clamp(-1, 1) + 1) * 127.5
    v = torch.floor(v + 0.5)
    return v.to(torch.uint8).permute(1, 2, 0).numpy()


def save_image(img: torch.Tensor, path) -> None:
    arr = to_uint8(img)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    Image.fromarray(arr[..., 0] if mode == "L" else arr, mode=mode).save(path)


@dataclass
class DatasetManifest:
    root: str
    items: list = field(default_factory=list)  # dicts {path, split[, mask]}

    def paths(self, split: str) -> list:
        return [it["path"] for it in self.items if it["split"] == split]

    def split_sizes(self) -> dict:
        return {s: len(self.paths(s)) for s in SPLITS}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"root": self.root}, sort_keys=True)]
        lines += [json.dumps(it, sort_keys=True) for it in self.items]
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DatasetError(f"empty manifest {path}")
        head = json.loads(lines[0])
        return cls(head["root"], [json.loads(l) for l in lines[1:] if l.strip()])

    def check(self) -> None:
        seen = set()
        for it in self.items:
            if it["path"] in seen:
                raise DatasetError(f"{it['path']} listed in more than one split")
            seen.add(it["path"])
            if not (Path(self.root) / it["path"]).is_file():
                raise DatasetError(f"missing file {it['path']} under {self.root}")


def list_images(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"image folder {root} does not exist")
    return sorted(str(p.relative_to(root)) for p in root.rglob("*")
                  if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def make_split(root, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
               out_path=None) -> DatasetManifest:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    files = list_images(root)
    if not files:
        raise DatasetError(f"no images found under {root}")
    order = np.random.default_rng(seed).permutation(len(files))
    n = len(files)
    edges = np.rint(np.cumsum(fractions) * n).astype(int)
    edges[-1] = n
    bounds = [0, *edges]
    items = []
    for split, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        items += [{"path": files[i], "split": split} for i in order[lo:hi]]
    manifest = DatasetManifest(str(root), items)
    if out_path is not None:
        manifest.save(out_path)
    return manifest


def load_split(manifest: DatasetManifest, split: str, size: int = 64,
               center_crop: bool = False) -> torch.Tensor:
    """Load every image in ``split`` into one ``(N, 3, size, size)`` tensor."""
    paths = manifest.paths(split)
    if not paths:
        raise DatasetError(f"split {split!r} is empty")
    root = Path(manifest.root)
    return torch.stack([load_image(root / p, size, center_crop) for p in paths])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def index_batches(n: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """Shuffled index batches for one epoch; the final partial batch is kept."""
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(data, split: str = "train", batch_size: int = 128, seed: int = 0, epoch: int = 0,
            size: int = 64) -> Iterator[torch.Tensor]:
    """Batches of ``(B, 3, H, W)`` images for one epoch.

    ``data`` is a :class:`DatasetManifest` or an already loaded image tensor.
    """
    images = load_split(data, split, size) if isinstance(data, DatasetManifest) else data
    if len(images) == 0:
        raise DatasetError("cannot iterate an empty split")
    for idx in index_batches(len(images), batch_size, seed, epoch):
        yield images[torch.from_numpy(idx)]
