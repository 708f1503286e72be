"""Run directories, stage orchestration, evaluation and the ablation sweep."""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import PRESETS, ConfigError, ExperimentConfig, derive_seed, resolve, seed_record
from .dataio import DatasetManifest, load_image, load_split, make_split, to_unit
from .masking import (BUCKETS, REGULAR_BUCKET, MaskSampler, bucket_of, decode_mask_file,
                      gen_irregular_mask, gen_regular_mask, load_irregular_masks)
from .metrics import MetricReport, aggregate, evaluate_pair, format_table, summary_csv
from .plotting import comparison_grid, plot_ablation, plot_bucket_metrics, plot_curves
from .stage1 import DeconvNet, DivergenceError, load_stage1, train_stage1
from .stage2 import Generator, inpaint, load_generator, train_refinement

log = logging.getLogger(__name__)

FALLBACK_FROM = (1e-1, 1e-4)
FALLBACK_TO = (1e-2, 1e-5)


def prepare_run(cfg: ExperimentConfig, command: str) -> tuple:
    """Resolve ``cfg`` and lay out its run directory.

    Writes the config snapshot, the seed record, the split manifest and a
    ``run.json`` carrying the manifest hash.  Returns ``(cfg, out_dir, manifest)``.
    """
    cfg = resolve(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = resolve_manifest(cfg)
    manifest.save(out / "manifest.jsonl")
    (out / "config.json").write_text(cfg.to_json())
    (out / "seeds.json").write_text(json.dumps(seed_record(cfg), indent=2) + "\n")
    _update_run_info(out, {"version": __version__, "manifest_sha256": manifest.sha256(),
                           "last_command": command})
    return cfg, out, manifest


def _update_run_info(out: Path, values: dict) -> None:
    path = out / "run.json"
    info = json.loads(path.read_text()) if path.is_file() else {}
    info.update(values)
    path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def resolve_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    if cfg.data.manifest:
        manifest = DatasetManifest.load(cfg.data.manifest)
    else:
        manifest = make_split(cfg.data.root, cfg.data.split, seed=derive_seed(cfg.seed, "split"))
    manifest.check()
    return manifest


def mask_pool(cfg: ExperimentConfig, bucket: str) -> list:
    """Irregular masks for ``bucket``: from ``masks.mask_dir`` or synthetic strokes."""
    size = cfg.data.image_size
    if cfg.masks.mask_dir:
        root = Path(cfg.masks.mask_dir)
        sub = root / bucket if (root / bucket).is_dir() else root
        return load_irregular_masks(sub, bucket=bucket, augment=cfg.masks.augment, size=size)
    seed = derive_seed(cfg.seed, f"masks/{bucket}")
    return [gen_irregular_mask(size, size, bucket, seed=[seed, i]) for i in range(cfg.masks.synthetic_count)]


def training_sampler(cfg: ExperimentConfig) -> MaskSampler:
    size = cfg.data.image_size
    if cfg.masks.mode == "regular":
        return MaskSampler(size, "regular", cfg.masks.ratio)
    buckets = [cfg.masks.bucket] if cfg.masks.bucket else list(BUCKETS)
    pool = [m for b in buckets for m in mask_pool(cfg, b)]
    return MaskSampler(size, "irregular", pool=pool)


def evaluation_masks(cfg: ExperimentConfig, bucket: str, n: int, items: Sequence[dict] = (),
                     root=".") -> list:
    """Deterministic ``(H, W)`` known-pixel grids for ``n`` evaluation images."""
    size = cfg.data.image_size
    seed = derive_seed(cfg.seed, f"eval/{bucket}")
    if bucket == REGULAR_BUCKET:
        return [gen_regular_mask(size, size, cfg.masks.ratio, seed=[seed, i]).grid for i in range(n)]
    if bucket == "paired":
        grids = []
        for it in items:
            if "mask" not in it:
                raise ConfigError(f"eval.buckets: item {it['path']} has no paired mask")
            grids.append(decode_mask_file(Path(root) / it["mask"], size))
        return grids
    if cfg.masks.mask_dir:
        pool = mask_pool(cfg, bucket)
        rng = np.random.default_rng(seed)
        return [pool[int(rng.integers(len(pool)))].grid for _ in range(n)]
    return [gen_irregular_mask(size, size, bucket, seed=[seed, i]).grid for i in range(n)]


def run_stage1(cfg: ExperimentConfig, out: Path, manifest: DatasetManifest):
    images = load_split(manifest, "train", cfg.data.image_size, cfg.data.center_crop)
    try:
        net, history = train_stage1(images, cfg.stage1, training_sampler(cfg), out_dir=out)
    except DivergenceError:
        if cfg.stage1.optimizer != "sgd" or (cfg.stage1.lr_hi, cfg.stage1.lr_lo) != FALLBACK_FROM:
            raise
        # The SGD schedule starting at 1e-1 can blow up; retry once a decade lower.
        log.warning("stage 1 diverged with lr %g -> %g; retrying with %g -> %g", *FALLBACK_FROM, *FALLBACK_TO)
        cfg.stage1.lr_hi, cfg.stage1.lr_lo = FALLBACK_TO
        (out / "config.json").write_text(cfg.to_json())
        _update_run_info(out, {"stage1_lr_fallback": list(FALLBACK_TO)})
        net, history = train_stage1(images, cfg.stage1, training_sampler(cfg), out_dir=out)
    plot_curves(history["epochs"], "epoch", ["loss"], out / "stage1_loss.png", "stage 1 loss")
    _update_run_info(out, {"stage1_first_step_loss": history["first_step_loss"],
                           "stage1_checkpoint": str(out / f"stage1_epoch{cfg.stage1.epochs - 1}.ckpt")})
    return net, history


def latest_checkpoint(out: Path, pattern: str) -> Optional[Path]:
    found = sorted(out.glob(pattern), key=lambda p: int(p.stem.rsplit("epoch", 1)[1]))
    return found[-1] if found else None


def run_stage2(cfg: ExperimentConfig, out: Path, manifest: DatasetManifest,
               stage1_net: Optional[DeconvNet] = None, hooks=()):
    if cfg.stage2.use_guide and stage1_net is None:
        raise ConfigError("stage1 checkpoint: preset full_dft needs a trained stage-1 network")
    images = load_split(manifest, "train", cfg.data.image_size, cfg.data.center_crop)
    G, D, rows = train_refinement(images, stage1_net if cfg.stage2.use_guide else None, cfg.stage2,
                                  cfg.losses, training_sampler(cfg), out_dir=out, hooks=hooks)
    ys = ["l1", "g_adv", "d_loss"] if D is not None else ["l1"]
    plot_curves(rows, "step", ys, out / "stage2_loss.png", f"stage 2 ({cfg.preset})")
    _update_run_info(out, {"stage2_first_step_l1": rows[0]["l1"] if rows else None,
                           "generator_checkpoint": str(out / f"stage2_G_epoch{cfg.stage2.epochs - 1}.ckpt")})
    return G, D, rows


def inpaint_one(img: torch.Tensor, grid, stage1_net: Optional[DeconvNet], G: Generator):
    """Single-image inference: ``img`` ``(3, H, W)`` in [-1, 1], ``grid`` ``(H, W)`` known=1."""
    mask = torch.as_tensor(np.asarray(grid, dtype=np.float32))[None, None]
    out, guide = inpaint(img[None], mask, stage1_net, G, return_guide=True)
    return out[0], guide[0], mask[0]


def evaluate_model(cfg: ExperimentConfig, stage1_net: Optional[DeconvNet], G: Generator,
                   manifest: DatasetManifest, split: str = "test", out: Optional[Path] = None,
                   label: str = "ours") -> MetricReport:
    """Inpaint every image of ``split`` for each ``cfg.eval.buckets`` and score it.

    Images are processed one at a time so single-image inference reproduces
    every number exactly.  With ``out`` the per-image CSV, the text table and
    one comparison grid per bucket are written there.
    """
    items = [it for it in manifest.items if it["split"] == split]
    if not items:
        raise ValueError(f"split {split!r} is empty")
    root = Path(manifest.root)
    images = [load_image(root / it["path"], cfg.data.image_size, cfg.data.center_crop) for it in items]
    results = []
    for bucket in cfg.eval.buckets:
        grids = evaluation_masks(cfg, bucket, len(items), items, root)
        rows = []
        for it, img, grid in zip(items, images, grids):
            pred, guide, mask = inpaint_one(img, grid, stage1_net, G)
            hole = (1 - mask) if cfg.eval.hole_only else None
            name_bucket = bucket
            if bucket == "paired":
                name_bucket = bucket_of(1 - float(np.mean(grid))) or "paired"
            results.append(evaluate_pair(to_unit(img), to_unit(pred), it["path"], name_bucket,
                                         hole=hole))
            if len(rows) < cfg.eval.grid_rows:
                rows.append((img * mask, pred, img, guide if stage1_net is not None else pred))
        if out is not None and rows:
            ins, preds, gts, specs = zip(*rows)
            comparison_grid(ins, preds, gts, specs, path=out / f"grid_{split}_{bucket}.png")
    report = aggregate(results)
    if out is not None:
        (out / f"metrics_{split}.csv").write_text(report.per_image_csv())
        (out / f"summary_{split}.csv").write_text(summary_csv({label: report}))
        (out / f"table_{split}.txt").write_text(format_table({label: report}))
        plot_bucket_metrics({label: report}, out / f"buckets_{split}_psnr.png", "psnr")
    return report


def load_models(stage1_path=None, generator_path=None):
    net1 = load_stage1(stage1_path) if stage1_path else None
    if generator_path is None:
        raise ConfigError("generator checkpoint: a trained generator is required")
    return net1, load_generator(generator_path)


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int], out_dir, arms: Sequence[str] = PRESETS,
                 split: str = "test") -> dict:
    """Train every arm for every root seed with identical budgets and score the held-out split.

    Stage 1 is trained once per seed and shared.  Returns
    ``{"psnr": {arm: [per-seed mean PSNR]}, "reports": {(seed, arm): MetricReport}}``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    psnrs = {arm: [] for arm in arms}
    reports = {}
    for seed in seeds:
        base = copy.deepcopy(cfg)
        base.seed = int(seed)
        stage1_net = None
        if "full_dft" in arms:
            s1cfg = copy.deepcopy(base)
            s1cfg.preset = "full_dft"
            s1cfg.out_dir = str(out_dir / f"seed{seed}" / "stage1")
            s1cfg, s1out, manifest = prepare_run(s1cfg, "ablation-stage1")
            stage1_net, _ = run_stage1(s1cfg, s1out, manifest)
        for arm in arms:
            acfg = copy.deepcopy(base)
            acfg.preset = arm
            acfg.out_dir = str(out_dir / f"seed{seed}" / arm)
            acfg, aout, manifest = prepare_run(acfg, "ablation-stage2")
            G, _, _ = run_stage2(acfg, aout, manifest, stage1_net if arm == "full_dft" else None)
            rep = evaluate_model(acfg, stage1_net if arm == "full_dft" else None, G, manifest, split,
                                 out=aout, label=arm)
            reports[(seed, arm)] = rep
            psnrs[arm].append(float(np.mean([s.psnr for s in rep.buckets.values()])))
            log.info("ablation seed %s arm %s psnr %.3f", seed, arm, psnrs[arm][-1])
    lines = ["seed," + ",".join(arms)]
    for i, seed in enumerate(seeds):
        lines.append(f"{seed}," + ",".join(f"{psnrs[a][i]:.6f}" for a in arms))
    lines.append("mean," + ",".join(f"{np.mean(psnrs[a]):.6f}" for a in arms))
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    per_arm = {arm: aggregate([m for s in seeds for m in reports[(s, arm)].images]) for arm in arms}
    (out_dir / "ablation_table.txt").write_text(format_table(per_arm))
    plot_ablation(psnrs, out_dir / "ablation_psnr.png")
    return {"psnr": psnrs, "reports": reports}
