"""2-D DFT utilities for frequency-domain inpainting.

All transforms are unitary (``norm="ortho"``) so that Parseval holds with
constant one.  :func:`to_network` / :func:`from_network` convert between
images and the packed real planes the stage-1 network consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

LAYOUTS = ("real_imag", "mag_phase")


class InvalidInputError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class UnsupportedMaskError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum:
    """Complex unitary DFT of a ``(..., C, H, W)`` image tensor."""

    data: torch.Tensor
    norm: str = "ortho"

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


@dataclass(frozen=True)
class PackedSpectrum:
    """Real-valued planes ``(..., 2C, H, W)`` ordered ``[R(c0), I(c0), R(c1), ...]``."""

    planes: torch.Tensor
    layout: str = "real_imag"


def _check_image(img: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(img):
        img = torch.as_tensor(img)
    if img.ndim < 3:
        raise InvalidInputError(f"expected (..., C, H, W) tensor, got shape {tuple(img.shape)}")
    if torch.is_complex(img):
        raise InvalidInputError("image tensors must be real")
    if not torch.isfinite(img).all():
        raise InvalidInputError("image contains non-finite values")
    return img


def forward_dft(img: torch.Tensor) -> Spectrum:
    img = _check_image(img)
    return Spectrum(torch.fft.fft2(img, norm="ortho"))


def inverse_dft(spec: Spectrum, return_residue: bool = False):
    """Inverse transform keeping the real part.

    With ``return_residue`` the max-abs imaginary part of the raw inverse is
    returned alongside; it is non-zero whenever the spectrum lacks Hermitian
    symmetry.
    """
    if not isinstance(spec, Spectrum) or not torch.is_complex(spec.data):
        raise InvalidInputError("inverse_dft expects a complex Spectrum")
    out = torch.fft.ifft2(spec.data, norm="ortho")
    real = out.real.contiguous()
    if return_residue:
        residue = float(out.imag.abs().max()) if out.numel() else 0.0
        return real, residue
    return real


def pack_spectrum(spec: Spectrum, layout: str = "real_imag") -> PackedSpectrum:
    if layout not in LAYOUTS:
        raise LayoutError(f"unknown layout {layout!r}")
    z = spec.data
    if layout == "real_imag":
        a, b = z.real, z.imag
    else:
        a, b = z.abs(), torch.angle(z)
    planes = torch.stack((a, b), dim=-3)  # (..., C, 2, H, W)
    planes = planes.flatten(-4, -3)
    return PackedSpectrum(planes.contiguous(), layout)


def unpack_spectrum(packed: PackedSpectrum) -> Spectrum:
    planes = packed.planes
    if planes.ndim < 3 or planes.shape[-3] % 2:
        raise LayoutError(f"packed spectrum needs an even plane count, got shape {tuple(planes.shape)}")
    if packed.layout not in LAYOUTS:
        raise LayoutError(f"unknown layout {packed.layout!r}")
    pairs = planes.unflatten(-3, (planes.shape[-3] // 2, 2))
    a, b = pairs.select(-3, 0), pairs.select(-3, 1)
    if packed.layout == "real_imag":
        z = torch.complex(a, b)
    else:
        z = torch.polar(a, b)
    return Spectrum(z)


SCALES = ("unitary", "inv_sqrt_hw")


def network_scale(height: int, width: int, scale: str = "unitary") -> float:
    """Factor applied to packed spectra before they enter a network.

    ``"unitary"`` keeps the orthonormal DFT values, so a squared error on the
    planes equals the pixel-domain squared error; ``"inv_sqrt_hw"`` divides
    once more by ``sqrt(H*W)`` (the DC bin then equals the image mean).
    """
    if scale == "unitary":
        return 1.0
    if scale == "inv_sqrt_hw":
        return 1.0 / math.sqrt(height * width)
    raise ValueError(f"unknown spectrum scale {scale!r}")


def to_network(img: torch.Tensor, layout: str = "real_imag", scale: str = "unitary",
               centered: bool = True) -> torch.Tensor:
    """Image ``(..., C, H, W)`` -> packed planes ``(..., 2C, H, W)`` for a network.

    With ``centered`` the zero frequency is moved to the middle of each plane.
    """
    spec = forward_dft(img)
    z = spec.data * network_scale(spec.height, spec.width, scale)
    if centered:
        z = torch.fft.fftshift(z, dim=(-2, -1))
    return pack_spectrum(Spectrum(z), layout).planes


def from_network(planes: torch.Tensor, layout: str = "real_imag", scale: str = "unitary",
                 centered: bool = True) -> torch.Tensor:
    """Inverse of :func:`to_network`: packed planes -> real image."""
    z = unpack_spectrum(PackedSpectrum(planes, layout)).data
    if centered:
        z = torch.fft.ifftshift(z, dim=(-2, -1))
    z = z / network_scale(planes.shape[-2], planes.shape[-1], scale)
    return inverse_dft(Spectrum(z))


def circular_convolve2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct-sum 2-D circular convolution of two ``(H, W)`` arrays.

    ``out[p, q] = sum_{i, j} a[i, j] * b[(p - i) % H, (q - j) % W]``, evaluated
    without any transform so it can check the convolution theorem.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidInputError("circular_convolve2d expects two equal (H, W) arrays")
    h, w = a.shape
    cols = (np.arange(w)[None, :] - np.arange(w)[:, None]) % w  # [j, q] -> (q - j) % W
    # z[i, r, q] = sum_j a[i, j] * b[r, (q - j) % W]
    z = np.einsum("ij,rjq->irq", a, b[:, cols])
    rows = (np.arange(h)[None, :] - np.arange(h)[:, None]) % h  # [i, p] -> (p - i) % H
    return z[np.arange(h)[:, None], rows, :].sum(axis=0)


def verify_masking_identity(img: torch.Tensor, mask: torch.Tensor) -> float:
    """Max-abs residual of ``DFT(x*m) - DFT(x) (*) DFT(m) / sqrt(H*W)``.

    ``img`` is ``(C, H, W)``; ``mask`` is ``(H, W)``, ``(1, H, W)`` or
    ``(C, H, W)``.  Computed in float64.
    """
    x = _check_image(torch.as_tensor(img)).double()
    m = torch.as_tensor(mask).double()
    if m.ndim == 2:
        m = m.unsqueeze(0)
    if x.shape[-2:] != m.shape[-2:]:
        raise InvalidInputError("image and mask spatial sizes differ")
    m = m.expand_as(x)
    h, w = x.shape[-2:]
    k = 1.0 / math.sqrt(h * w)
    lhs = forward_dft(x * m).data.numpy()
    xf = forward_dft(x).data.numpy()
    mf = forward_dft(m.contiguous()).data.numpy()
    residual = 0.0
    for c in range(x.shape[0]):
        rhs = k * circular_convolve2d(xf[c], mf[c])
        residual = max(residual, float(np.abs(lhs[c] - rhs).max()))
    return residual


def spectrum_magnitude_map(spec: Spectrum) -> torch.Tensor:
    """Centered log-magnitude map ``(H, W)`` in [0, 1] for figures."""
    mag = torch.log1p(torch.fft.fftshift(spec.data, dim=(-2, -1)).abs())
    mag = mag.reshape(-1, spec.height, spec.width)
    lo = mag.amin(dim=(-2, -1), keepdim=True)
    hi = mag.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    norm = torch.where(span > 0, (mag - lo) / span.clamp_min(1e-12), torch.zeros_like(mag))
    return norm.mean(dim=0)


def mask_spectrum_profile(maskspec) -> np.ndarray:
    """Power ``|M^f(p, 0)|^2`` along the first axis for a rectangular mask."""
    if maskspec.kind != "regular" or maskspec.rect is None:
        raise UnsupportedMaskError("spectrum profile is defined for rectangular masks only")
    grid = torch.as_tensor(np.asarray(maskspec.grid, dtype=np.float64))[None]
    mf = forward_dft(grid).data[0]
    return (mf[:, 0].abs() ** 2).numpy()


def dirichlet_power(width: int, n: int) -> np.ndarray:
    """``|sin(pi p w / n) / sin(pi p / n)|^2`` for ``p = 0..n-1`` (value ``w^2`` at 0)."""
    p = np.arange(n, dtype=np.float64)
    out = np.empty(n)
    out[0] = float(width) ** 2
    q = p[1:]
    out[1:] = (np.sin(np.pi * q * width / n) / np.sin(np.pi * q / n)) ** 2
    return out
