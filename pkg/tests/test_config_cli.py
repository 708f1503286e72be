import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from freqinpaint.cli import main
from freqinpaint.config import (PRESETS, ConfigError, ExperimentConfig, apply_preset, derive_seed, from_dict,
                                load_config, resolve)
from freqinpaint.dataio import load_image, save_image, to_uint8
from freqinpaint.netblocks import load_checkpoint


def flat(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flat(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def small_config(root, out, **over):
    cfg = {
        "seed": 0, "out_dir": str(out), "preset": "full_dft",
        "data": {"root": str(root), "split": [0.5, 0.0, 0.5]},
        "stage1": {"depth": 3, "width": 8, "epochs": 2, "batch_size": 8, "optimizer": "adam",
                   "lr_hi": 1e-3, "lr_lo": 1e-4},
        "stage2": {"base": 8, "n_res": 1, "d_base": 8, "epochs": 1, "batch_size": 8},
        "eval": {"grid_rows": 3},
    }
    for k, v in over.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    return cfg


def write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    """Stage 1 and a full_dft generator trained through the CLI on the 20-image corpus."""
    d = tmp_path_factory.mktemp("run")
    conf = write(d / "cfg.json", small_config(corpus, d / "out"))
    assert main(["train-stage1", "--config", conf]) == 0
    assert main(["train-stage2", "--config", conf]) == 0
    return d, conf


def test_unknown_and_mistyped_keys_name_the_field():
    with pytest.raises(ConfigError, match="stage1.dpeth"):
        from_dict({"stage1": {"dpeth": 3}})
    with pytest.raises(ConfigError, match="stage2.lr_g"):
        from_dict({"stage2": {"lr_g": "fast"}})
    with pytest.raises(ConfigError, match="data.center_crop"):
        from_dict({"data": {"center_crop": 1}})
    with pytest.raises(ConfigError, match="eval.buckets"):
        from_dict({"eval": {"buckets": "10-20"}})
    assert from_dict({"stage1": {"lr_hi": 1}}).stage1.lr_hi == 1.0


@pytest.mark.parametrize("field,value,needle", [
    ("masks", {"mode": "random"}, "masks.mode"),
    ("masks", {"bucket": "15-25"}, "masks.bucket"),
    ("eval", {"buckets": ["70-80"]}, "eval.buckets"),
    ("stage1", {"lr_hi": 1e-5, "lr_lo": 1e-4}, "stage1"),
    ("data", {"split": [0.5, 0.5, 0.5]}, "data.split"),
    ("preset", "gan", "preset"),
])
def test_config_errors_exit_2(tmp_path, corpus, capsys, field, value, needle):
    conf = write(tmp_path / "c.json", small_config(corpus, tmp_path / "o", **{field: value}))
    assert main(["train-stage1", "--config", conf]) == 2
    assert needle in capsys.readouterr().err


def test_missing_data_root_exits_2(tmp_path, capsys):
    conf = write(tmp_path / "c.json", small_config(tmp_path / "nope", tmp_path / "o"))
    assert main(["train-stage1", "--config", conf]) == 2
    assert "data.root" in capsys.readouterr().err
    assert main(["train-stage1", "--config", str(tmp_path / "absent.json")]) == 2


def test_toml_and_json_load_identically(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 4\npreset = "l1_adv"\n[stage1]\ndepth = 5\n[eval]\nbuckets = ["10-20"]\n')
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "preset": "l1_adv", "stage1": {"depth": 5},
                                                 "eval": {"buckets": ["10-20"]}}))
    assert load_config(tmp_path / "c.toml") == load_config(tmp_path / "c.json")


def test_presets_differ_only_in_documented_fields():
    base = ExperimentConfig()
    dicts = {p: flat(apply_preset(base, p).to_dict()) for p in PRESETS}
    keys = set(dicts["full_dft"])
    changed = {k for k in keys if len({json.dumps(dicts[p][k]) for p in PRESETS}) > 1}
    assert changed == {"preset", "losses.adv_weight", "stage2.use_guide"}
    assert dicts["l1_only"]["losses.adv_weight"] == 0 and not dicts["l1_only"]["stage2.use_guide"]
    assert dicts["l1_adv"]["losses.adv_weight"] == 0.1 and not dicts["l1_adv"]["stage2.use_guide"]
    assert dicts["full_dft"]["stage2.use_guide"]
    bad = ExperimentConfig()
    bad.losses.adv_weight = 0.0
    with pytest.raises(ConfigError, match="losses.adv_weight"):
        apply_preset(bad, "l1_adv")


def test_seed_split_is_deterministic_and_distinct(corpus):
    cfg = from_dict({"seed": 3, "data": {"root": str(corpus)}})
    a, b = resolve(cfg), resolve(cfg)
    assert a.stage1.seed == b.stage1.seed == derive_seed(3, "stage1")
    assert len({derive_seed(3, c) for c in ("stage1", "stage2", "split", "eval")}) == 4
    assert derive_seed(3, "stage1") != derive_seed(4, "stage1")


def test_stage1_smoke_writes_checkpoints_and_reproduces(trained, tmp_path, corpus):
    d, conf = trained
    out = d / "out"
    assert sorted(p.name for p in out.glob("stage1_epoch*.ckpt")) == ["stage1_epoch0.ckpt", "stage1_epoch1.ckpt"]
    for name in ("config.json", "seeds.json", "manifest.jsonl", "run.json", "stage1_log.csv", "stage1_loss.png"):
        assert (out / name).is_file(), name
    info = json.loads((out / "run.json").read_text())
    again = write(tmp_path / "c.json", small_config(corpus, tmp_path / "again"))
    assert main(["train-stage1", "--config", again]) == 0
    info2 = json.loads((tmp_path / "again" / "run.json").read_text())
    assert info["stage1_first_step_loss"] == info2["stage1_first_step_loss"]
    assert info["manifest_sha256"] == info2["manifest_sha256"]


def test_stage2_full_dft_outputs(trained):
    out = trained[0] / "out"
    assert (out / "stage2_G_epoch0.ckpt").is_file() and (out / "stage2_D_epoch0.ckpt").is_file()
    assert (out / "stage2_log.csv").read_text().splitlines()[0] == "step,l1,g_adv,d_loss"
    assert load_checkpoint(out / "stage2_G_epoch0.ckpt")["meta"]["config"]["use_guide"] is True


def test_full_dft_without_stage1_exits_2(tmp_path, corpus, capsys):
    conf = write(tmp_path / "c.json", small_config(corpus, tmp_path / "o"))
    assert main(["train-stage2", "--config", conf]) == 2
    assert "stage1" in capsys.readouterr().err


def test_l1_only_has_no_critic(tmp_path, corpus):
    conf = write(tmp_path / "c.json", small_config(corpus, tmp_path / "o", preset="l1_only"))
    assert main(["train-stage2", "--config", conf]) == 0
    out = tmp_path / "o"
    assert (out / "stage2_log.csv").read_text().splitlines()[0] == "step,l1"
    assert not list(out.glob("stage2_D_*.ckpt"))


def test_l1_adv_feeds_zero_guide(tmp_path, corpus, monkeypatch):
    import freqinpaint.stage2 as s2

    seen = []
    orig = s2.generator_forward

    def spy(in_img, mask, guide, G):
        seen.append(float(guide.abs().max()))
        return orig(in_img, mask, guide, G)

    monkeypatch.setattr(s2, "generator_forward", spy)
    conf = write(tmp_path / "c.json", small_config(corpus, tmp_path / "o", preset="l1_adv"))
    assert main(["train-stage2", "--config", conf]) == 0
    assert seen and max(seen) == 0.0
    assert (tmp_path / "o" / "stage2_log.csv").read_text().splitlines()[0] == "step,l1,g_adv,d_loss"


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_evaluate_regular(trained, capsys):
    d, conf = trained
    out = d / "out"
    assert main(["evaluate", "--config", conf]) == 0
    rows = read_rows(out / "metrics_test.csv")
    n_test = sum(1 for line in (out / "manifest.jsonl").read_text().splitlines()[1:]
                 if json.loads(line)["split"] == "test")
    assert n_test == 10
    assert len(rows) == 11 and rows[-1]["image"] == "MEAN"
    assert all(r["bucket"] == "regular25" for r in rows)
    mean = np.mean([float(r["psnr"]) for r in rows[:-1]])
    assert float(rows[-1]["psnr"]) == pytest.approx(mean, abs=1e-6)
    assert (out / "grid_test_regular25.png").is_file() and (out / "table_test.txt").is_file()
    w, h = Image.open(out / "grid_test_regular25.png").size
    assert w > h  # 3 rows x 5 columns
    assert "PSNR+" in capsys.readouterr().out


def test_evaluate_irregular_buckets(trained):
    d, conf = trained
    buckets = ["10-20", "20-30", "30-40", "40-50", "50-60"]
    assert main(["evaluate", "--config", conf, "--buckets", *buckets]) == 0
    out = d / "out"
    rows = read_rows(out / "metrics_test.csv")
    assert [r["bucket"] for r in rows if r["image"] == "MEAN"] == buckets
    table = (out / "table_test.txt").read_text().splitlines()
    for label in ("PSNR+", "SSIM+", "l1(%)-"):
        assert len([l for l in table if l.strip().startswith(label)]) == 5


def test_inpaint_matches_evaluate(trained, tmp_path, capsys):
    d, conf = trained
    out = d / "out"
    assert main(["evaluate", "--config", conf]) == 0
    row = read_rows(out / "metrics_test.csv")[0]
    from freqinpaint.config import derive_seed as ds
    from freqinpaint.masking import gen_regular_mask

    root = json.loads((out / "manifest.jsonl").read_text().splitlines()[0])["root"]
    grid = gen_regular_mask(64, 64, 0.25, seed=[ds(0, "eval/regular25"), 0]).grid
    Image.fromarray(((1 - grid) * 255).astype(np.uint8)).save(tmp_path / "m.png")
    img = f"{root}/{row['image']}"
    capsys.readouterr()
    rc = main(["inpaint", "--image", img, "--mask", str(tmp_path / "m.png"), "--generator",
               str(out / "stage2_G_epoch0.ckpt"), "--stage1", str(out / "stage1_epoch1.ckpt"),
               "--out", str(tmp_path / "o.png"), "--gt", img])
    assert rc == 0
    psnr_line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("PSNR")][0]
    assert abs(float(psnr_line.split()[1]) - float(row["psnr"])) <= 1e-6
    assert Image.open(tmp_path / "o.png").size == (64, 64) and Image.open(tmp_path / "o.png").mode == "RGB"


def test_inpaint_without_hole_returns_input(trained, tmp_path, corpus):
    out = trained[0] / "out"
    src = sorted(corpus.glob("*.png"))[0]
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(tmp_path / "m.png")
    assert main(["inpaint", "--image", str(src), "--mask", str(tmp_path / "m.png"), "--generator",
                 str(out / "stage2_G_epoch0.ckpt"), "--stage1", str(out / "stage1_epoch1.ckpt"),
                 "--out", str(tmp_path / "o.png")]) == 0
    assert np.array_equal(np.asarray(Image.open(tmp_path / "o.png")), to_uint8(load_image(src, 64)))


def test_inpaint_errors(trained, tmp_path, corpus):
    out = trained[0] / "out"
    src = sorted(corpus.glob("*.png"))[0]
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(tmp_path / "m.png")
    args = ["inpaint", "--image", str(src), "--mask", str(tmp_path / "m.png"), "--out", str(tmp_path / "o.png")]
    assert main(args + ["--generator", str(out / "stage2_G_epoch0.ckpt")]) == 2  # needs --stage1
    assert main(["inpaint", "--image", str(tmp_path / "none.png"), "--mask", str(tmp_path / "m.png"),
                 "--generator", str(out / "stage2_G_epoch0.ckpt"), "--out", str(tmp_path / "o.png")]) == 2


def test_verify_exits_0(tmp_path, capsys):
    assert main(["verify", "--pairs", "20", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "FAIL" not in text
    for name in ("verify.txt", "mask_profile.png", "mask_profile.csv"):
        assert (tmp_path / name).is_file()
    prof = np.loadtxt(tmp_path / "mask_profile.csv", delimiter=",", skiprows=1)
    assert np.allclose(prof[:, 1], prof[:, 2], rtol=1e-9, atol=1e-9)


def test_divergence_exits_3(tmp_path, corpus, capsys):
    conf = write(tmp_path / "c.json", small_config(corpus, tmp_path / "o", stage1={
        "depth": 3, "width": 8, "epochs": 30, "batch_size": 8, "optimizer": "sgd", "lr_hi": 1e12, "lr_lo": 1e11,
        "zero_init_last": False}))
    assert main(["train-stage1", "--config", conf]) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_make_corpus_and_masks(tmp_path):
    assert main(["make-corpus", "--out", str(tmp_path / "c"), "--n", "3"]) == 0
    assert len(list((tmp_path / "c").glob("*.png"))) == 3
    assert main(["make-masks", "--out", str(tmp_path / "m"), "--n", "2", "--buckets", "10-20"]) == 0
    assert len(list((tmp_path / "m" / "10-20").glob("*.png"))) == 2
