"""Command-line entry point: ``freqinpaint <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .dataio import DatasetError, ImageLoadError, load_image, save_image, to_unit
from .masking import (BUCKETS, MaskDatasetError, MaskGeometryError, decode_mask_file, gen_irregular_mask,
                      save_mask_png)
from .metrics import l1_pct, psnr, ssim
from .netblocks import load_checkpoint
from .stage1 import DivergenceError, load_stage1
from .stage2 import CompositeError, load_generator

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("freqinpaint")


class NumericFailure(RuntimeError):
    pass


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    return cfg


def _stage1_path(args, out: Path):
    from .experiment import latest_checkpoint

    if args.stage1:
        return Path(args.stage1)
    return latest_checkpoint(out, "stage1_epoch*.ckpt")


def cmd_train_stage1(args) -> int:
    from .experiment import prepare_run, run_stage1

    cfg, out, manifest = prepare_run(_load(args), "train-stage1")
    _, history = run_stage1(cfg, out, manifest)
    last = history["epochs"][-1]
    print(f"stage 1 done: {len(history['epochs'])} epochs, final loss {last['loss']:.6g}, "
          f"first-step loss {history['first_step_loss']!r}, checkpoints in {out}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    from .experiment import prepare_run, run_stage2

    cfg, out, manifest = prepare_run(_load(args), "train-stage2")
    net1 = None
    if cfg.stage2.use_guide:
        path = _stage1_path(args, out)
        if path is None or not path.is_file():
            raise ConfigError("stage1 checkpoint: preset full_dft needs --stage1 or a stage1_epoch*.ckpt in out_dir")
        net1 = load_stage1(path)
    _, D, rows = run_stage2(cfg, out, manifest, net1)
    print(f"stage 2 ({cfg.preset}) done: {len(rows)} steps, final l1 {rows[-1]['l1']:.5f}, "
          f"critic {'on' if D is not None else 'off'}, checkpoints in {out}")
    return EXIT_OK


def _models(args, out=None):
    """Stage-1 net (or None) and generator; the stage-1 net is used only if the generator was trained with it."""
    from .experiment import latest_checkpoint

    g_path = Path(args.generator) if args.generator else None
    if g_path is None and out is not None:
        g_path = latest_checkpoint(out, "stage2_G_epoch*.ckpt")
    if g_path is None or not g_path.is_file():
        raise ConfigError("generator checkpoint: pass --generator or train stage 2 into out_dir first")
    meta = load_checkpoint(g_path)["meta"]
    use_guide = bool(meta.get("config", {}).get("use_guide", True))
    net1 = None
    if use_guide:
        s1 = _stage1_path(args, out) if out is not None else (Path(args.stage1) if args.stage1 else None)
        if s1 is None or not Path(s1).is_file():
            raise ConfigError("stage1 checkpoint: this generator was trained with guidance; pass --stage1")
        net1 = load_stage1(s1)
    return net1, load_generator(g_path)


def cmd_evaluate(args) -> int:
    from .experiment import evaluate_model, prepare_run

    cfg = _load(args)
    if args.buckets:
        cfg.eval.buckets = tuple(args.buckets)
    cfg, out, manifest = prepare_run(cfg, "evaluate")
    net1, G = _models(args, out)
    evaluate_model(cfg, net1, G, manifest, args.split, out=out)
    print((out / f"table_{args.split}.txt").read_text(), end="")
    print(f"per-image metrics: {out / f'metrics_{args.split}.csv'}")
    return EXIT_OK


def cmd_inpaint(args) -> int:
    from .experiment import inpaint_one

    try:
        img = load_image(args.image, args.size, args.center_crop)
        grid = decode_mask_file(args.mask, args.size)
    except (ImageLoadError, OSError) as exc:
        raise ConfigError(f"input: {exc}") from exc
    if grid.shape != tuple(img.shape[-2:]):
        raise ConfigError(f"mask: size {grid.shape} does not match image {tuple(img.shape[-2:])}")
    net1, G = _models(args)
    out, _, mask = inpaint_one(img, grid, net1, G)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image(out, args.out)
    print(f"wrote {args.out} ({int((1 - grid).sum())} hole pixels)")
    if args.gt:
        gt = load_image(args.gt, args.size, args.center_crop)
        hole = (1 - mask) if args.hole_only else None
        a, b = to_unit(gt), to_unit(out)
        print(f"PSNR {psnr(a, b, hole):.8f}")
        print(f"SSIM {ssim(a, b):.8f}")
        print(f"L1% {l1_pct(a, b, hole):.8f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .masking import gen_regular_mask
    from .plotting import plot_mask_profile
    from .spectral import dirichlet_power, mask_spectrum_profile
    from .verify import run_all

    checks = run_all(args.pairs, live=not args.no_live)
    for c in checks:
        print(c.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        m = gen_regular_mask(64, 64, 0.25, seed=0)
        _, _, rh, rw = m.rect
        # Known region = ones minus the hole square: a scaled Dirichlet kernel off DC.
        ref = dirichlet_power(rh, 64) * (rw / 64) ** 2
        ref[0] = ((64 * 64 - rh * rw) / 64) ** 2
        prof = mask_spectrum_profile(m)
        plot_mask_profile(prof, ref, out / "mask_profile.png")
        np.savetxt(out / "mask_profile.csv", np.column_stack([np.arange(64), prof, ref]),
                   delimiter=",", header="p,power,rectangular_window", comments="")
        (out / "verify.txt").write_text("\n".join(c.line() for c in checks) + "\n")
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_make_corpus(args) -> int:
    from .textures import write_corpus

    paths = write_corpus(args.out, n=args.n, size=args.size, seed=args.seed)
    print(f"wrote {len(paths)} textures to {args.out}")
    return EXIT_OK


def cmd_make_masks(args) -> int:
    out = Path(args.out)
    buckets = args.buckets or list(BUCKETS)
    for b in buckets:
        (out / b).mkdir(parents=True, exist_ok=True)
        for i in range(args.n):
            save_mask_png(gen_irregular_mask(args.size, args.size, b, seed=[args.seed, i]), out / b / f"mask_{i:05d}.png")
    print(f"wrote {args.n} masks per bucket for {', '.join(buckets)} under {out}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .experiment import run_ablation

    cfg = _load(args)
    res = run_ablation(cfg, args.seeds, cfg.out_dir)
    for arm, vals in res["psnr"].items():
        print(f"{arm:>9}: " + " ".join(f"{v:.3f}" for v in vals) + f"  mean {np.mean(vals):.3f}")
    print(f"tables and figures in {cfg.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freqinpaint", description="Two-stage frequency-guided image inpainting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="JSON or TOML experiment config")
        sp.add_argument("--out", help="override out_dir")
        sp.add_argument("--seed", type=int, help="override the root seed")
        sp.add_argument("--preset", choices=("l1_only", "l1_adv", "full_dft"))
        return sp

    sp = with_config(sub.add_parser("train-stage1", help="train the frequency-domain deconvolution net"))
    sp.set_defaults(func=cmd_train_stage1)

    sp = with_config(sub.add_parser("train-stage2", help="train the refinement generator and critic"))
    sp.add_argument("--stage1", help="stage-1 checkpoint (default: latest in out_dir)")
    sp.set_defaults(func=cmd_train_stage2)

    sp = with_config(sub.add_parser("evaluate", help="score a split and export tables and figure grids"))
    sp.add_argument("--stage1")
    sp.add_argument("--generator")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--buckets", nargs="+", help="override eval.buckets")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("inpaint", help="complete one image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True, help="mask PNG, white = hole")
    sp.add_argument("--generator", required=True)
    sp.add_argument("--stage1")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt", help="ground truth; prints PSNR/SSIM/l1%%")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--center-crop", action="store_true")
    sp.add_argument("--hole-only", action="store_true")
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("verify", help="run the spectral identity and shape conformance checks")
    sp.add_argument("--pairs", type=int, default=100)
    sp.add_argument("--no-live", action="store_true", help="skip live forward passes")
    sp.add_argument("--out", help="also write a report and the mask spectrum profile here")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("make-corpus", help="write a procedural texture corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("make-masks", help="write synthetic irregular masks per ratio bucket")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=50)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--buckets", nargs="+", choices=list(BUCKETS))
    sp.set_defaults(func=cmd_make_masks)

    sp = with_config(sub.add_parser("ablation", help="train and score all three arms over several seeds"))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, MaskDatasetError, MaskGeometryError, ImageLoadError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, CompositeError, NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
