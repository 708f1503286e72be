import math

import numpy as np
import pytest
import torch

from freqinpaint.masking import MaskSampler, apply_mask, composite
from freqinpaint.netblocks import he_init, param_count, shape_of, sn_layers
from freqinpaint.stage1 import Stage1Config, build_stage1
from freqinpaint.stage2 import (CompositeError, Discriminator, Generator, LossConfig, Stage2Config,
                                adversarial_losses, build_stage2, check_composite, discriminator_chain,
                                discriminator_forward, discriminator_loss, generator_adv_loss, generator_chain,
                                generator_forward, inpaint, l1_loss, load_discriminator, load_generator,
                                train_refinement)

from gradcheck import KinkPattern, directional_probes


def images(n, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1


def masks(n, size=32, seed=0):
    return MaskSampler(size, "regular").sample(n, np.random.default_rng(seed))


def test_generator_shapes_and_bound():
    G = he_init(Generator(), 0).eval()
    y = G(torch.randn(2, 9, 64, 64) * 10)
    assert y.shape == (2, 3, 64, 64)
    assert y.abs().max() <= 1
    assert G.encode(torch.randn(1, 9, 64, 64)).shape == (1, 256, 16, 16)
    with pytest.raises(ValueError):
        generator_forward(torch.zeros(1, 3, 64, 64), torch.ones(1, 1, 64, 64), torch.zeros(1, 6, 64, 64), G)


def test_discriminator_range_and_patch_grid():
    D = he_init(Discriminator(), 0).eval()
    s = D(torch.randn(3, 3, 64, 64))
    assert s.shape == (3, 1, 6, 6)
    assert bool(((s > 0) & (s < 1)).all())
    assert shape_of(discriminator_chain(), (1, 3, 128, 128)) == (1, 1, 14, 14)
    with pytest.raises(ValueError):
        discriminator_forward(torch.zeros(1, 9, 64, 64), D)


def test_param_counts_match_closed_form():
    # conv7: 9*64*49+64, down: 64*128*16+128, 128*256*16+256, residual block: 2*(256*256*9+256)
    # up: 256*128*16+128, 128*64*16+64, conv7 out: 64*3*49+3
    g = (9 * 64 * 49 + 64) + (64 * 128 * 16 + 128) + (128 * 256 * 16 + 256) + 8 * 2 * (256 * 256 * 9 + 256) \
        + (256 * 128 * 16 + 128) + (128 * 64 * 16 + 64) + (64 * 3 * 49 + 3)
    d = (3 * 64 * 16 + 64) + (64 * 128 * 16 + 128) + (128 * 256 * 16 + 256) + (256 * 512 * 16 + 512) + (512 * 16 + 1)
    assert param_count(generator_chain()) == g
    assert param_count(discriminator_chain()) == d
    assert sum(p.numel() for p in Generator().parameters()) == g
    assert sum(p.numel() for p in Discriminator().parameters()) == d


def test_l1_values(rng):
    a = torch.from_numpy(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(a, a + 0.5)) == pytest.approx(0.5)
    b = torch.from_numpy(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    assert float(l1_loss(a, b)) == pytest.approx(np.abs(a.numpy() - b.numpy()).sum() / a.numel())
    with pytest.raises(ValueError):
        l1_loss(a, b[:, :2])


def test_adversarial_closed_forms():
    half = torch.full((2, 1, 6, 6), 0.5)
    assert float(discriminator_loss(half, half)) == pytest.approx(2 * math.log(2))
    assert float(generator_adv_loss(half)) == pytest.approx(math.log(2))
    assert float(generator_adv_loss(half, "minimax")) == pytest.approx(-math.log(2))
    assert float(discriminator_loss(torch.ones(1, 1, 6, 6), torch.zeros(1, 1, 6, 6))) == pytest.approx(0, abs=1e-7)
    assert float(generator_adv_loss(torch.ones(1, 1, 6, 6))) == pytest.approx(0, abs=1e-7)
    assert math.isfinite(float(discriminator_loss(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2))))


def test_adversarial_losses_detach_fake_for_critic():
    fake = torch.full((1, 1, 2, 2), 0.3, requires_grad=True)
    d_loss, g_loss = adversarial_losses(torch.full((1, 1, 2, 2), 0.7), fake)
    assert not d_loss.requires_grad
    g_loss.backward()
    assert fake.grad is not None


def test_no_critic_when_adv_weight_zero():
    G, D = build_stage2(Stage2Config(base=8, n_res=1, d_base=8), LossConfig(adv_weight=0.0))
    assert D is None


def small_cfg(**kw):
    base = dict(base=8, n_res=1, d_base=8, batch_size=4, epochs=1, lr_g=1e-3, lr_d=1e-4, seed=3)
    base.update(kw)
    return Stage2Config(**base)


def test_zero_adv_gradient_is_pure_l1():
    imgs = images(4)
    cfg = small_cfg(use_guide=False)
    torch.manual_seed(0)
    G_ref, _ = build_stage2(cfg, LossConfig(adv_weight=0.0))
    mask = masks(4)
    in_img = apply_mask(imgs, mask)
    out = composite(in_img, generator_forward(in_img, mask, torch.zeros_like(in_img), G_ref), mask)
    l1_loss(imgs, out).backward()
    ref = [p.grad.clone() for p in G_ref.parameters()]

    G_b, _ = build_stage2(cfg, LossConfig(adv_weight=0.0))
    out_b = composite(in_img, generator_forward(in_img, mask, torch.zeros_like(in_img), G_b), mask)
    (LossConfig(adv_weight=0.0).l1_weight * l1_loss(imgs, out_b)).backward()
    for a, p in zip(ref, G_b.parameters()):
        assert torch.equal(a, p.grad)
    _, D, rows = train_refinement(imgs, None, cfg, LossConfig(adv_weight=0.0), MaskSampler(32, "regular"))
    assert D is None and set(rows[0]) == {"step", "epoch", "l1"}


@pytest.mark.parametrize("seed", range(10))
def test_one_generator_step_reduces_l1(seed):
    torch.manual_seed(seed)
    imgs = images(4, seed=seed)
    mask = masks(4, seed=seed)
    G = he_init(Generator(8, 1), seed)
    opt = torch.optim.Adam(G.parameters(), lr=1e-4, betas=(0.5, 0.999))
    in_img = apply_mask(imgs, mask)
    guide = torch.zeros_like(in_img)

    def loss():
        return l1_loss(imgs, composite(in_img, generator_forward(in_img, mask, guide, G), mask))

    before = loss()
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        assert float(loss()) < float(before)


def test_gradient_finite_difference_l1_and_adv():
    torch.manual_seed(0)
    G = he_init(Generator(8, 2), 0).double().train()
    D = he_init(Discriminator(8), 1).double().eval()
    gt = images(2).double()
    mask = masks(2).double()
    in_img = apply_mask(gt, mask)
    guide = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    lc = LossConfig()
    kinks = KinkPattern(G, D)

    def pred():
        out = composite(in_img, generator_forward(in_img, mask, guide, G), mask)
        kinks.note(gt - out)
        return out

    def l1_only():
        return l1_loss(gt, pred())

    def total():
        out = pred()
        return lc.l1_weight * l1_loss(gt, out) + lc.adv_weight * generator_adv_loss(D(out))

    def critic():
        out = composite(in_img, generator_forward(in_img, mask, guide, G), mask).detach()
        return discriminator_loss(D(gt), D(out))

    for fn, params in ((l1_only, G.parameters()), (total, [*G.parameters(), *D.parameters()]),
                       (critic, D.parameters())):
        kinks.take()
        assert max(directional_probes(fn, list(params), eps=1e-6, pattern=kinks)) <= 1e-3


def test_composite_checked_every_step():
    imgs = images(6)
    seen = []

    def hook(step, G, D):
        seen.append(step)

    _, D, rows = train_refinement(imgs, None, small_cfg(epochs=2, use_guide=False), LossConfig(),
                                  MaskSampler(32, "regular"), hooks=[hook])
    assert seen == list(range(len(rows))) == [r["step"] for r in rows]
    assert {"g_adv", "d_loss"} <= set(rows[0])


def test_check_composite_detects_leak():
    x = images(1)
    mask = masks(1)
    in_img = apply_mask(x, mask)
    out = composite(in_img, torch.zeros_like(x), mask)
    check_composite(in_img, out, mask)
    bad = out.clone()
    bad[mask.expand_as(bad) > 0.5] += 1e-6
    with pytest.raises(CompositeError):
        check_composite(in_img, bad, mask)


def test_training_checkpoints_and_inpaint(tmp_path):
    torch.manual_seed(0)
    net1 = build_stage1(Stage1Config(depth=3, width=8, zero_init_last=False))
    imgs = images(4)
    G, D, rows = train_refinement(imgs, net1, small_cfg(epochs=2), LossConfig(), MaskSampler(32, "regular"),
                                  out_dir=tmp_path)
    assert all(p.requires_grad is False for p in net1.parameters())
    for e in (0, 1):
        assert (tmp_path / f"stage2_G_epoch{e}.ckpt").is_file()
        assert (tmp_path / f"stage2_D_epoch{e}.ckpt").is_file()
    header = (tmp_path / "stage2_log.csv").read_text().splitlines()[0]
    assert header == "step,l1,g_adv,d_loss"
    G2, D2 = load_generator(tmp_path / "stage2_G_epoch1.ckpt"), load_discriminator(tmp_path / "stage2_D_epoch1.ckpt")
    mask = masks(4, seed=9)
    a = inpaint(imgs, mask, net1, G2)
    b = inpaint(imgs, mask, net1, G2)
    assert torch.equal(a, b)
    known = mask.expand_as(imgs) > 0.5
    assert torch.equal(a[known], apply_mask(imgs, mask)[known])
    assert torch.equal(a, inpaint(imgs, mask, net1, G.eval()))
    assert len(sn_layers(D2)) == 5
    with pytest.raises(ValueError):
        load_generator(tmp_path / "stage2_D_epoch1.ckpt")


def test_batch_rows_independent_at_inference():
    G = he_init(Generator(8, 1), 0)
    imgs, mask = images(3), masks(3)
    full = inpaint(imgs, mask, None, G)
    one = inpaint(imgs[1:2], mask[1:2], None, G)
    assert torch.allclose(full[1:2], one, atol=1e-5)  # float32 conv kernels vary with batch size


def test_max_steps_and_reproducibility():
    imgs = images(8)
    a = train_refinement(imgs, None, small_cfg(epochs=5), LossConfig(), MaskSampler(32, "regular"), max_steps=3)[2]
    b = train_refinement(imgs, None, small_cfg(epochs=5), LossConfig(), MaskSampler(32, "regular"), max_steps=3)[2]
    assert len(a) == 3 and a == b
