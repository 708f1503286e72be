"""Stage 1: deconvolution network operating on packed DFT planes."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import spectral
from .dataio import index_batches
from .masking import MaskSampler, apply_mask
from .netblocks import (ChainNet, act, chain_from_json, conv, he_init, load_checkpoint, norm,
                        save_checkpoint)

log = logging.getLogger(__name__)

IN_PLANES = 12
OUT_PLANES = 6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectrumFormat:
    """How images are turned into network planes (see :func:`spectral.to_network`)."""

    layout: str = "real_imag"
    scale: str = "unitary"
    centered: bool = True


@dataclass
class Stage1Config:
    lr_hi: float = 1e-1
    lr_lo: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    depth: int = 17
    width: int = 64
    optimizer: str = "sgd"  # or "adam" (momentum then unused)
    layout: str = "real_imag"
    spectrum_scale: str = "unitary"
    centered: bool = True
    # output = masked-image planes - net(x); the loss is still on the clean spectrum
    residual: bool = False
    zero_init_last: bool = True
    grad_clip: float = 0.0  # element-wise; 0 disables

    @property
    def fmt(self) -> SpectrumFormat:
        return SpectrumFormat(self.layout, self.spectrum_scale, self.centered)

    def validate(self) -> None:
        if not self.lr_hi > self.lr_lo > 0:
            raise ValueError("stage1: need lr_hi > lr_lo > 0")
        if self.depth < 2 or self.width < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("stage1: depth >= 2, width, batch_size and epochs >= 1 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"stage1: unknown optimizer {self.optimizer!r}")
        if self.layout not in spectral.LAYOUTS or self.spectrum_scale not in spectral.SCALES:
            raise ValueError("stage1: unknown spectrum layout or scale")


def deconv_chain(depth: int = 17, width: int = 64, in_planes: int = IN_PLANES,
                 out_planes: int = OUT_PLANES) -> list:
    """conv+ReLU, (depth-2) x conv+BN+ReLU, conv; all 3x3 stride 1 pad 1."""
    chain = [conv(in_planes, width, 3, 1, 1), act("relu")]
    for _ in range(depth - 2):
        chain += [conv(width, width, 3, 1, 1), norm("batch_norm", width), act("relu")]
    chain.append(conv(width, out_planes, 3, 1, 1))
    return chain


class DeconvNet(ChainNet):
    def __init__(self, depth: int = 17, width: int = 64, residual: bool = False,
                 fmt: SpectrumFormat = SpectrumFormat(), chain=None):
        super().__init__(chain if chain is not None else deconv_chain(depth, width))
        self.residual = residual
        self.fmt = fmt

    @classmethod
    def from_chain(cls, chain, residual: bool = False, fmt: SpectrumFormat = SpectrumFormat()):
        return cls(chain=chain, residual=residual, fmt=fmt)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.layers(x)
        if self.residual:
            # predicts the correction to the masked-image planes
            out = x[:, :OUT_PLANES] - out
        return out


DEFAULT_FORMAT = SpectrumFormat()


def _planes(img: torch.Tensor, fmt: SpectrumFormat) -> torch.Tensor:
    return spectral.to_network(img, fmt.layout, fmt.scale, fmt.centered)


def spectral_input(masked: torch.Tensor, mask: torch.Tensor,
                   fmt: SpectrumFormat = DEFAULT_FORMAT) -> torch.Tensor:
    """12 planes: packed spectrum of the masked image, then of the 3-plane mask."""
    if mask.shape[-3] == 1:
        mask = mask.expand(*mask.shape[:-3], 3, *mask.shape[-2:])
    mask = mask.to(masked.dtype).contiguous()
    return torch.cat((_planes(masked, fmt), _planes(mask, fmt)), dim=-3)


def spectral_target(gt: torch.Tensor, fmt: SpectrumFormat = DEFAULT_FORMAT) -> torch.Tensor:
    return _planes(gt, fmt)


def stage1_forward(x: torch.Tensor, net: DeconvNet) -> torch.Tensor:
    if x.ndim != 4 or x.shape[1] != IN_PLANES:
        raise ValueError(f"stage 1 expects (B, {IN_PLANES}, H, W) planes, got {tuple(x.shape)}")
    return net(x)


def stage1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target, reduction="mean")


def reconstruct_stage1(pred: torch.Tensor, fmt: SpectrumFormat = DEFAULT_FORMAT) -> torch.Tensor:
    """Predicted planes -> guidance image clamped to [-1, 1]."""
    return spectral.from_network(pred, fmt.layout, fmt.scale, fmt.centered).clamp(-1, 1)


@torch.no_grad()
def guidance(net: DeconvNet, masked: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Stage-1 guidance image for a batch, with frozen batch-norm statistics."""
    was_training = net.training
    net.eval()
    try:
        return reconstruct_stage1(net(spectral_input(masked, mask, net.fmt)), net.fmt)
    finally:
        net.train(was_training)


def lr_at(epoch: int, cfg: Stage1Config) -> float:
    """Exponential decay from ``lr_hi`` at epoch 0 to ``lr_lo`` at the last epoch."""
    if cfg.epochs == 1:
        return cfg.lr_hi
    if epoch == cfg.epochs - 1:
        return cfg.lr_lo
    return cfg.lr_hi * (cfg.lr_lo / cfg.lr_hi) ** (epoch / (cfg.epochs - 1))


def build_stage1(cfg: Stage1Config) -> DeconvNet:
    net = he_init(DeconvNet(cfg.depth, cfg.width, cfg.residual, cfg.fmt), cfg.seed)
    if cfg.zero_init_last:
        last = net.layers[-1]
        torch.nn.init.zeros_(last.weight)
        torch.nn.init.zeros_(last.bias)
    return net


def make_optimizer(net: DeconvNet, cfg: Stage1Config) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.lr_hi, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(net.parameters(), lr=cfg.lr_hi, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def checkpoint_meta(net: DeconvNet, cfg: Optional[Stage1Config] = None, **extra) -> dict:
    meta = {"residual": net.residual, "format": asdict(net.fmt)}
    if cfg is not None:
        meta["config"] = asdict(cfg)
    meta.update(extra)
    return meta


def load_stage1(path) -> DeconvNet:
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "stage1":
        raise ValueError(f"{path} holds a {ckpt['kind']} checkpoint, not stage1")
    meta = ckpt["meta"]
    net = DeconvNet.from_chain(chain_from_json(ckpt["layers"]), meta["residual"],
                               SpectrumFormat(**meta["format"]))
    net.load_state_dict(ckpt["state_dict"])
    return net.eval()


def train_stage1(images: torch.Tensor, cfg: Stage1Config, sampler: MaskSampler,
                 out_dir=None, net: Optional[DeconvNet] = None):
    """Train the deconvolution net on ``images`` ``(N, 3, H, W)``.

    Returns ``(net, log)`` where ``log`` holds one dict per epoch with the
    mean training loss and the learning rate, plus ``first_step_loss``.
    """
    cfg.validate()
    if len(images) == 0:
        raise ValueError("stage 1 needs a non-empty training set")
    torch.manual_seed(cfg.seed)
    net = net if net is not None else build_stage1(cfg)
    opt = make_optimizer(net, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    first_step_loss = None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        total, count = 0.0, 0
        for idx in index_batches(len(images), cfg.batch_size, cfg.seed, epoch):
            gt = images[torch.from_numpy(idx)]
            mask = sampler.sample(len(idx), rng)
            masked = apply_mask(gt, mask)
            pred = stage1_forward(spectral_input(masked, mask, net.fmt), net)
            loss = stage1_loss(pred, spectral_target(gt, net.fmt))
            if not torch.isfinite(loss):
                raise DivergenceError(f"stage 1 loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_value_(net.parameters(), cfg.grad_clip)
            opt.step()
            value = loss.item()
            if first_step_loss is None:
                first_step_loss = value
            total += value * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "loss": total / count, "lr": lr}
        history.append(row)
        log.info("stage1 epoch %d loss %.6g lr %.3g", epoch, row["loss"], lr)
        if out_dir is not None:
            save_checkpoint(out_dir / f"stage1_epoch{epoch}.ckpt", net, "stage1",
                            checkpoint_meta(net, cfg, epoch=epoch))
    if out_dir is not None:
        write_log_csv(out_dir / "stage1_log.csv", history, ("epoch", "loss", "lr"))
    return net, {"epochs": history, "first_step_loss": first_step_loss}


def write_log_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def closed_form_param_count(depth: int = 17, width: int = 64) -> int:
    first = IN_PLANES * width * 9 + width
    middle = (depth - 2) * (width * width * 9 + width + 2 * width)
    last = width * OUT_PLANES * 9 + OUT_PLANES
    return first + middle + last


def passthrough_loss(images: torch.Tensor, sampler: MaskSampler, seed: int = 0,
                     fmt: SpectrumFormat = DEFAULT_FORMAT) -> float:
    """Loss of the trivial predictor that returns the masked-image planes unchanged."""
    rng = np.random.default_rng(seed)
    mask = sampler.sample(len(images), rng)
    x = spectral_input(apply_mask(images, mask), mask, fmt)
    return float(stage1_loss(x[:, :OUT_PLANES], spectral_target(images, fmt)))

