"""Layer specifications, shape arithmetic and shared network blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "freqinpaint-checkpoint"
CHECKPOINT_VERSION = 1
SN_EPS = 1e-12
SN_UPDATE_ITERS = 50  # power-iteration steps per weight update

WEIGHTED = ("conv", "transpose_conv", "residual_block")
KINDS = (*WEIGHTED, "batch_norm", "instance_norm", "relu", "leaky_relu", "tanh", "sigmoid")


class ShapeSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    slope: float = 0.0
    spectral_norm: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeSpecError(f"unknown layer kind {self.kind!r}")


def conv(in_ch, out_ch, kernel, stride=1, padding=0, spectral_norm=False) -> LayerSpec:
    return LayerSpec("conv", in_ch, out_ch, kernel, stride, padding, spectral_norm=spectral_norm)


def tconv(in_ch, out_ch, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("transpose_conv", in_ch, out_ch, kernel, stride, padding)


def norm(kind: str, ch: int) -> LayerSpec:
    return LayerSpec(kind, ch, ch)


def act(kind: str, slope: float = 0.0) -> LayerSpec:
    return LayerSpec(kind, slope=slope)


def residual(ch: int) -> LayerSpec:
    return LayerSpec("residual_block", ch, ch, 3, 1, 1)


def _conv_out(n: int, k: int, s: int, p: int, strict: bool) -> int:
    span = n + 2 * p - k
    if span < 0:
        raise ShapeSpecError(f"kernel {k} with padding {p} does not fit input size {n}")
    if strict and span % s:
        raise ShapeSpecError(f"non-integer output size ({n} + 2*{p} - {k}) / {s} + 1")
    return span // s + 1


def layer_output_shape(spec: LayerSpec, shape: Sequence[int], strict: bool = True) -> tuple:
    c, h, w = shape
    if spec.kind in WEIGHTED or spec.kind in ("batch_norm", "instance_norm"):
        if spec.in_ch != c:
            raise ShapeSpecError(f"{spec.kind} expects {spec.in_ch} channels, got {c}")
    if spec.kind == "conv":
        return (spec.out_ch, _conv_out(h, spec.kernel, spec.stride, spec.padding, strict),
                _conv_out(w, spec.kernel, spec.stride, spec.padding, strict))
    if spec.kind == "transpose_conv":
        def up(n):
            out = (n - 1) * spec.stride - 2 * spec.padding + spec.kernel
            if out <= 0:
                raise ShapeSpecError(f"transpose conv collapses size {n}")
            return out
        return (spec.out_ch, up(h), up(w))
    return (c, h, w)


def shape_of(chain: Sequence[LayerSpec], input_shape: Sequence[int], strict: bool = True) -> tuple:
    """Output ``(C, H, W)`` of a layer chain; a leading batch dim is carried through."""
    shape = tuple(input_shape)
    batch = ()
    if len(shape) == 4:
        batch, shape = shape[:1], shape[1:]
    for spec in chain:
        shape = layer_output_shape(spec, shape, strict)
    return (*batch, *shape)


def trace_shapes(chain: Sequence[LayerSpec], input_shape: Sequence[int]) -> list:
    """Shape after every layer of ``chain``."""
    out, shape = [], tuple(input_shape)
    for spec in chain:
        shape = shape_of([spec], shape)
        out.append(shape)
    return out


def param_count(chain: Sequence[LayerSpec]) -> int:
    total = 0
    for s in chain:
        if s.kind in ("conv", "transpose_conv"):
            total += s.in_ch * s.out_ch * s.kernel ** 2 + s.out_ch
        elif s.kind == "residual_block":
            total += 2 * (s.in_ch * s.in_ch * 9 + s.in_ch)
        elif s.kind == "batch_norm":
            total += 2 * s.in_ch
    return total


def _normalize(x: torch.Tensor, eps: float = SN_EPS) -> torch.Tensor:
    return x / x.norm().clamp_min(eps)


def power_iteration(w2d: torch.Tensor, u: torch.Tensor, iters: int = 1):
    """Run ``iters`` power-iteration steps; returns ``(u, v, sigma)``."""
    v = None
    with torch.no_grad():
        for _ in range(max(iters, 1)):
            v = _normalize(w2d.t() @ u)
            u = _normalize(w2d @ v)
        sigma = torch.dot(u, w2d @ v)
    return u, v, sigma


def spectral_normalize(weight: torch.Tensor, iters: int = 1, u: Optional[torch.Tensor] = None,
                       generator: Optional[torch.Generator] = None):
    """``W / sigma_hat`` with ``sigma_hat`` from power iteration on the ``(out, rest)`` view.

    Returns ``(normalized_weight, u, sigma_hat)`` so callers can keep ``u``
    across steps.
    """
    w2d = weight.reshape(weight.shape[0], -1)
    if u is None:
        u = torch.randn(w2d.shape[0], dtype=w2d.dtype, generator=generator)
        u = _normalize(u)
    u, _, sigma = power_iteration(w2d, u, iters)
    sigma = torch.clamp(sigma, min=SN_EPS)
    return weight / sigma, u, sigma


class SNConv2d(nn.Module):
    """Conv2d whose effective weight is ``W / sigma_hat``.

    The power-iteration vectors persist as buffers and advance by
    ``update_iters`` steps per change of the raw weight (i.e. once per
    optimizer update), the first time the layer runs in training mode
    afterwards.  A single step lets the estimate lag by several percent in
    the wide late layers when the top singular values are close together.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 warmup_iters: int = 200, update_iters: int = SN_UPDATE_ITERS):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight_orig = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        nn.init.kaiming_normal_(self.weight_orig, nonlinearity="leaky_relu", a=0.2)
        self.register_buffer("u", torch.zeros(out_ch))
        self.register_buffer("v", torch.zeros(in_ch * kernel * kernel))
        self.warmup_iters, self.update_iters = warmup_iters, update_iters
        self._seen_version = None
        self.reset_power_iteration()

    def _w2d(self) -> torch.Tensor:
        return self.weight_orig.reshape(self.weight_orig.shape[0], -1)

    def reset_power_iteration(self, iters: Optional[int] = None, generator=None) -> None:
        w2d = self._w2d().detach()
        u0 = _normalize(torch.randn(w2d.shape[0], generator=generator).to(w2d))
        u, v, _ = power_iteration(w2d, u0, iters or self.warmup_iters)
        self.u.copy_(u)
        self.v.copy_(v)
        self._seen_version = self.weight_orig._version

    def _maybe_step(self, force: bool = False) -> None:
        version = self.weight_orig._version
        if (self.training or force) and version != self._seen_version:
            u, v, _ = power_iteration(self._w2d().detach(), self.u, self.update_iters)
            self.u.copy_(u)
            self.v.copy_(v)
            self._seen_version = self.weight_orig._version

    def sigma(self) -> torch.Tensor:
        w2d = self._w2d()
        return torch.dot(self.u.clone(), w2d @ self.v.clone()).clamp_min(SN_EPS)

    def normalized_weight(self) -> torch.Tensor:
        return self.weight_orig / self.sigma()

    @torch.no_grad()
    def effective_weight(self) -> torch.Tensor:
        """Weight the next training forward will use (applies a pending power-iteration step)."""
        self._maybe_step(force=True)
        return self.normalized_weight().detach().clone()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._maybe_step()
        return F.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


class ResidualBlock(nn.Module):
    """``y = x + B(x)`` with ``B`` = conv3x3, norm, ReLU, conv3x3, norm."""

    def __init__(self, ch: int, norm_kind: str = "instance"):
        super().__init__()
        Norm = nn.InstanceNorm2d if norm_kind == "instance" else nn.BatchNorm2d
        self.branch = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1),
            Norm(ch),
            nn.ReLU(),
            nn.Conv2d(ch, ch, 3, 1, 1),
            Norm(ch),
        )
        self.ch = ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.ch:
            raise ShapeSpecError(f"residual block expects {self.ch} channels, got {x.shape[-3]}")
        return x + self.branch(x)


def build_layer(spec: LayerSpec) -> nn.Module:
    k = spec.kind
    if k == "conv":
        if spec.spectral_norm:
            return SNConv2d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, spec.padding)
        return nn.Conv2d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, spec.padding)
    if k == "transpose_conv":
        return nn.ConvTranspose2d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, spec.padding)
    if k == "batch_norm":
        return nn.BatchNorm2d(spec.in_ch)
    if k == "instance_norm":
        return nn.InstanceNorm2d(spec.in_ch, affine=False)
    if k == "relu":
        return nn.ReLU()
    if k == "leaky_relu":
        return nn.LeakyReLU(spec.slope)
    if k == "tanh":
        return nn.Tanh()
    if k == "sigmoid":
        return nn.Sigmoid()
    return ResidualBlock(spec.in_ch)


class ChainNet(nn.Module):
    """A network that is exactly the sequential realization of a LayerSpec chain."""

    def __init__(self, chain: Sequence[LayerSpec]):
        super().__init__()
        self.chain = list(chain)
        self.layers = nn.Sequential(*[build_layer(s) for s in self.chain])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)

    def run_until(self, x: torch.Tensor, n_layers: int) -> torch.Tensor:
        return self.layers[:n_layers](x)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def fan_in(module: nn.Module) -> int:
    if isinstance(module, nn.ConvTranspose2d):
        in_ch, _, kh, kw = module.weight.shape
        s = module.stride[0] * module.stride[1]
        return max(in_ch * kh * kw // s, 1)
    if isinstance(module, SNConv2d):
        w = module.weight_orig
    else:
        w = module.weight
    return w[0].numel()


def he_init(model: nn.Module, seed: int = 0) -> nn.Module:
    """Zero-mean normal weights with variance ``2 / fan_in``; zero biases."""
    g = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, SNConv2d)):
            w = m.weight_orig if isinstance(m, SNConv2d) else m.weight
            std = math.sqrt(2.0 / fan_in(m))
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=g, dtype=torch.float64).to(w) * std)
                if m.bias is not None:
                    m.bias.zero_()
            if isinstance(m, SNConv2d):
                m.reset_power_iteration(generator=g)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def sn_layers(model: nn.Module) -> list:
    return [m for m in model.modules() if isinstance(m, SNConv2d)]


def chain_to_json(chain: Sequence[LayerSpec]) -> list:
    return [asdict(s) for s in chain]


def chain_from_json(rows: Sequence[dict]) -> list:
    return [LayerSpec(**r) for r in rows]


def save_checkpoint(path, model: ChainNet, kind: str, meta: Optional[dict] = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "layers": chain_to_json(model.chain),
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }, Path(path))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a freqinpaint checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def model_from_checkpoint(ckpt: dict, cls=ChainNet) -> ChainNet:
    model = cls.from_chain(chain_from_json(ckpt["layers"])) if hasattr(cls, "from_chain") \
        else cls(chain_from_json(ckpt["layers"]))
    model.load_state_dict(ckpt["state_dict"])
    for m in sn_layers(model):
        m._seen_version = m.weight_orig._version
    return model
