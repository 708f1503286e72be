"""Stage 2: refinement GAN (encoder/residual/decoder generator, PatchGAN critic)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataio import index_batches
from .masking import MaskSampler, apply_mask, composite
from .netblocks import (ChainNet, act, conv, he_init, load_checkpoint, model_from_checkpoint, norm,
                        residual, save_checkpoint, tconv)
from .stage1 import DeconvNet, DivergenceError, guidance, write_log_csv

log = logging.getLogger(__name__)

LOG_EPS = 1e-8
ENCODER_LAYERS = 9  # conv/norm/relu x 3


class CompositeError(AssertionError):
    pass


@dataclass
class LossConfig:
    l1_weight: float = 1.0
    adv_weight: float = 0.1
    adv_form: str = "nonsaturating"  # or "minimax"

    def validate(self) -> None:
        if self.l1_weight < 0 or self.adv_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.adv_form not in ("nonsaturating", "minimax"):
            raise ValueError(f"unknown adversarial form {self.adv_form!r}")


@dataclass
class Stage2Config:
    lr_g: float = 1e-4
    lr_d: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 14
    epochs: int = 100
    seed: int = 0
    base: int = 64
    n_res: int = 8
    d_base: int = 64
    use_guide: bool = True
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("stage2: learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.base < 1 or self.d_base < 1 or self.n_res < 0:
            raise ValueError("stage2: sizes and epochs must be positive")


def generator_chain(base: int = 64, n_res: int = 8, in_ch: int = 9, out_ch: int = 3) -> list:
    b = base
    return [
        conv(in_ch, b, 7, 1, 3), norm("instance_norm", b), act("relu"),
        conv(b, 2 * b, 4, 2, 1), norm("instance_norm", 2 * b), act("relu"),
        conv(2 * b, 4 * b, 4, 2, 1), norm("instance_norm", 4 * b), act("relu"),
        *[residual(4 * b) for _ in range(n_res)],
        tconv(4 * b, 2 * b, 4, 2, 1), norm("instance_norm", 2 * b), act("relu"),
        tconv(2 * b, b, 4, 2, 1), norm("instance_norm", b), act("relu"),
        conv(b, out_ch, 7, 1, 3), act("tanh"),
    ]


def discriminator_chain(base: int = 64, in_ch: int = 3) -> list:
    b = base
    return [
        conv(in_ch, b, 4, 2, 1, spectral_norm=True), act("leaky_relu", 0.2),
        conv(b, 2 * b, 4, 2, 1, spectral_norm=True), act("leaky_relu", 0.2),
        conv(2 * b, 4 * b, 4, 2, 1, spectral_norm=True), act("leaky_relu", 0.2),
        conv(4 * b, 8 * b, 4, 1, 1, spectral_norm=True), act("leaky_relu", 0.2),
        conv(8 * b, 1, 4, 1, 1, spectral_norm=True), act("sigmoid"),
    ]


class Generator(ChainNet):
    def __init__(self, base: int = 64, n_res: int = 8, chain=None):
        super().__init__(chain if chain is not None else generator_chain(base, n_res))

    @classmethod
    def from_chain(cls, chain) -> "Generator":
        return cls(chain=chain)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.run_until(x, ENCODER_LAYERS)


class Discriminator(ChainNet):
    def __init__(self, base: int = 64, chain=None):
        super().__init__(chain if chain is not None else discriminator_chain(base))

    @classmethod
    def from_chain(cls, chain) -> "Discriminator":
        return cls(chain=chain)


def generator_input(in_img: torch.Tensor, mask: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
    if mask.shape[-3] == 1:
        mask = mask.expand(*mask.shape[:-3], 3, *mask.shape[-2:])
    return torch.cat((in_img, mask.to(in_img.dtype), guide), dim=-3)


def generator_forward(in_img: torch.Tensor, mask: torch.Tensor, guide: torch.Tensor,
                      G: Generator) -> torch.Tensor:
    x = generator_input(in_img, mask, guide)
    if x.ndim != 4 or x.shape[1] != 9:
        raise ValueError(f"generator expects (B, 9, H, W) input, got {tuple(x.shape)}")
    return G(x)


def discriminator_forward(img: torch.Tensor, D: Discriminator) -> torch.Tensor:
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"discriminator expects (B, 3, H, W) input, got {tuple(img.shape)}")
    return D(img)


def l1_loss(gt: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    return (gt - pred).abs().mean()


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp_min(LOG_EPS))


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return -_log(real_scores).mean() - _log(1 - fake_scores).mean()


def generator_adv_loss(fake_scores: torch.Tensor, form: str = "nonsaturating") -> torch.Tensor:
    if form == "minimax":
        return _log(1 - fake_scores).mean()
    return -_log(fake_scores).mean()


def adversarial_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor,
                       form: str = "nonsaturating"):
    """``(d_loss, g_loss)``; the critic term sees the fake scores detached."""
    d_loss = discriminator_loss(real_scores, fake_scores.detach())
    return d_loss, generator_adv_loss(fake_scores, form)


def build_stage2(cfg: Stage2Config, losses: LossConfig):
    G = he_init(Generator(cfg.base, cfg.n_res), cfg.seed)
    D = he_init(Discriminator(cfg.d_base), cfg.seed + 1) if losses.adv_weight > 0 else None
    return G, D


def zero_guide(in_img: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(in_img)


def check_composite(in_img: torch.Tensor, out: torch.Tensor, mask: torch.Tensor) -> None:
    known = mask.expand_as(in_img) > 0.5
    if not torch.equal(out[known], in_img[known]):
        raise CompositeError("known pixels of the composite differ from the input")


StepHook = Callable[[int, Generator, Optional[Discriminator]], None]


def train_refinement(images: torch.Tensor, stage1_net: Optional[DeconvNet], cfg: Stage2Config,
                     losses: LossConfig, sampler: MaskSampler, out_dir=None,
                     hooks: Sequence[StepHook] = (), max_steps: Optional[int] = None):
    """Algorithm-1 loop: G step on ``l1 + adv``, then a critic step on (gt, composite).

    With ``losses.adv_weight == 0`` no discriminator is built.  Without a
    stage-1 net (or ``cfg.use_guide=False``) the guide planes are zeros.
    Returns ``(G, D, rows)`` with one log row per step.
    """
    cfg.validate()
    losses.validate()
    torch.manual_seed(cfg.seed)
    G, D = build_stage2(cfg, losses)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2)) if D else None
    use_guide = cfg.use_guide and stage1_net is not None
    if use_guide:
        stage1_net.eval()
        for p in stage1_net.parameters():
            p.requires_grad_(False)
    rng = np.random.default_rng([cfg.seed, 2])
    out_dir = Path(out_dir) if out_dir is not None else None
    rows, step = [], 0
    for epoch in range(cfg.epochs):
        G.train()
        if D is not None:
            D.train()
        for idx in index_batches(len(images), cfg.batch_size, cfg.seed, epoch):
            gt = images[torch.from_numpy(idx)]
            mask = sampler.sample(len(idx), rng)
            in_img = apply_mask(gt, mask)
            guide = guidance(stage1_net, in_img, mask) if use_guide else zero_guide(in_img)

            pred2 = generator_forward(in_img, mask, guide, G)
            out = composite(in_img, pred2, mask)
            check_composite(in_img, out, mask)
            l1 = l1_loss(gt, out)
            total = losses.l1_weight * l1
            row = {"step": step, "epoch": epoch, "l1": l1.item()}
            if D is not None:
                g_adv = generator_adv_loss(discriminator_forward(out, D), losses.adv_form)
                total = total + losses.adv_weight * g_adv
                row["g_adv"] = g_adv.item()
            if not torch.isfinite(total):
                _dump(out_dir, gt, mask, guide, pred2)
                raise DivergenceError(f"stage 2 generator loss became {total.item()} at step {step}")
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()

            if D is not None:
                d_loss = discriminator_loss(discriminator_forward(gt, D),
                                            discriminator_forward(out.detach(), D))
                if not torch.isfinite(d_loss):
                    _dump(out_dir, gt, mask, guide, pred2)
                    raise DivergenceError(f"stage 2 critic loss became {d_loss.item()} at step {step}")
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                row["d_loss"] = d_loss.item()
            rows.append(row)
            for hook in hooks:
                hook(step, G, D)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        last = epoch == cfg.epochs - 1 or (max_steps is not None and step >= max_steps)
        if out_dir is not None and (last or (epoch + 1) % cfg.checkpoint_every == 0):
            meta = {"config": asdict(cfg), "losses": asdict(losses), "epoch": epoch}
            save_checkpoint(out_dir / f"stage2_G_epoch{epoch}.ckpt", G, "generator", meta)
            if D is not None:
                save_checkpoint(out_dir / f"stage2_D_epoch{epoch}.ckpt", D, "discriminator", meta)
        if rows:
            log.info("stage2 epoch %d last l1 %.5f", epoch, rows[-1]["l1"])
        if max_steps is not None and step >= max_steps:
            break
    if out_dir is not None:
        columns = ("step", "l1", "g_adv", "d_loss") if D is not None else ("step", "l1")
        write_log_csv(out_dir / "stage2_log.csv", rows, columns)
    return G, D, rows


def _dump(out_dir, gt, mask, guide, pred2) -> None:
    if out_dir is None:
        return
    torch.save({"gt": gt, "mask": mask, "guide": guide, "pred2": pred2.detach()},
               Path(out_dir) / "diverged_batch.pt")


@torch.no_grad()
def inpaint(in_img: torch.Tensor, mask: torch.Tensor, stage1_net: Optional[DeconvNet],
            G: Generator, return_guide: bool = False):
    """End-to-end inference on a batch ``(B, 3, H, W)`` with masks ``(B, 1, H, W)``."""
    G.eval()
    in_img = apply_mask(in_img, mask)
    guide = guidance(stage1_net, in_img, mask) if stage1_net is not None else zero_guide(in_img)
    out = composite(in_img, generator_forward(in_img, mask, guide, G), mask)
    return (out, guide) if return_guide else out


def load_generator(path) -> Generator:
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "generator":
        raise ValueError(f"{path} holds a {ckpt['kind']} checkpoint, not a generator")
    return model_from_checkpoint(ckpt, Generator).eval()


def load_discriminator(path) -> Discriminator:
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "discriminator":
        raise ValueError(f"{path} holds a {ckpt['kind']} checkpoint, not a discriminator")
    return model_from_checkpoint(ckpt, Discriminator).eval()
