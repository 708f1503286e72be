"""Self-checks run by ``freqinpaint verify``: spectral identities and layer shapes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .netblocks import WEIGHTED, trace_shapes
from .spectral import forward_dft, inverse_dft, verify_masking_identity
from .stage1 import DeconvNet, deconv_chain
from .stage2 import Discriminator, Generator, discriminator_chain, generator_chain

# Output size after every weighted layer, batch of one.
DECONV_SHAPES = {"input": (1, 12, 64, 64), "output": (1, 6, 64, 64)}
GENERATOR_SHAPES = [
    (1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16),
    *[(1, 256, 16, 16)] * 8,
    (1, 128, 32, 32), (1, 64, 64, 64), (1, 3, 64, 64),
]
GENERATOR_INPUT = (1, 9, 64, 64)
DISCRIMINATOR_SHAPES = [(1, 64, 32, 32), (1, 128, 16, 16), (1, 256, 8, 8), (1, 512, 7, 7), (1, 1, 6, 6)]
DISCRIMINATOR_INPUT = (1, 3, 64, 64)

ROUNDTRIP_TOL = 1e-5
PARSEVAL_TOL = 1e-4
MASKING_TOL = 1e-5


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _pairs(n: int, sizes, seed: int):
    rng = np.random.default_rng(seed)
    for i in range(n):
        s = sizes[i % len(sizes)]
        img = rng.uniform(-1, 1, size=(3, s, s))
        mask = (rng.uniform(size=(s, s)) < rng.uniform(0.2, 0.9)).astype(np.float64)
        yield img, mask


def spectral_checks(n_pairs: int = 100, sizes=(4, 8, 16, 64), seed: int = 0) -> list:
    t0 = time.perf_counter()
    rt, pv, mk = 0.0, 0.0, 0.0
    for img, mask in _pairs(n_pairs, sizes, seed):
        x = torch.from_numpy(img).float()
        spec = forward_dft(x)
        rt = max(rt, float((inverse_dft(spec) - x).abs().max()))
        e_x = float((x.double() ** 2).sum())
        e_f = float((spec.data.abs().double() ** 2).sum())
        pv = max(pv, abs(e_f - e_x) / e_x)
        mk = max(mk, verify_masking_identity(torch.from_numpy(img), torch.from_numpy(mask)))
    dt = time.perf_counter() - t0
    return [
        Check("dft_roundtrip_float32", rt <= ROUNDTRIP_TOL, f"max-abs {rt:.2e} (tol {ROUNDTRIP_TOL:g})"),
        Check("parseval", pv <= PARSEVAL_TOL, f"max relative error {pv:.2e} (tol {PARSEVAL_TOL:g})"),
        Check("masking_as_convolution", mk <= MASKING_TOL,
              f"max residual {mk:.2e} over {n_pairs} pairs (tol {MASKING_TOL:g})"),
        Check("spectral_runtime", dt < 60.0, f"{dt:.1f}s (limit 60s)"),
    ]


def _weighted_trace(chain, input_shape) -> list:
    shapes = trace_shapes(chain, input_shape)
    return [shape for spec, shape in zip(chain, shapes) if spec.kind in WEIGHTED]


def _live_trace(model, x) -> list:
    out = []
    with torch.no_grad():
        for spec, layer in zip(model.chain, model.layers):
            x = layer(x)
            if spec.kind in WEIGHTED:
                out.append(tuple(x.shape))
    return out


def shape_checks(live: bool = True) -> list:
    checks = []
    d_chain = deconv_chain()
    got = _weighted_trace(d_chain, DECONV_SHAPES["input"])[-1]
    checks.append(Check("deconv_shape_of", got == DECONV_SHAPES["output"], f"{DECONV_SHAPES['input']} -> {got}"))
    g_got = _weighted_trace(generator_chain(), GENERATOR_INPUT)
    checks.append(Check("generator_shape_of", g_got == GENERATOR_SHAPES, f"{len(g_got)} rows, last {g_got[-1]}"))
    d_got = _weighted_trace(discriminator_chain(), DISCRIMINATOR_INPUT)
    checks.append(Check("discriminator_shape_of", d_got == DISCRIMINATOR_SHAPES, f"last {d_got[-1]}"))
    if live:
        torch.manual_seed(0)
        net = DeconvNet().eval()
        y = net(torch.randn(DECONV_SHAPES["input"]))
        checks.append(Check("deconv_forward", tuple(y.shape) == DECONV_SHAPES["output"], f"{tuple(y.shape)}"))
        g_live = _live_trace(Generator().eval(), torch.randn(GENERATOR_INPUT))
        checks.append(Check("generator_forward", g_live == GENERATOR_SHAPES, f"last {g_live[-1]}"))
        d_live = _live_trace(Discriminator().eval(), torch.randn(DISCRIMINATOR_INPUT))
        checks.append(Check("discriminator_forward", d_live == DISCRIMINATOR_SHAPES, f"last {d_live[-1]}"))
    return checks


def run_all(n_pairs: int = 100, live: bool = True) -> list:
    return spectral_checks(n_pairs) + shape_checks(live)
