"""2-D Fourier analysis, Gaussian low-pass filtering and noise injection.

Transforms are unitary (``1/sqrt(H*W)`` in each direction) and spectra are
kept in centered layout, so the filter's distance ``D(u, v)`` is measured
from index ``(H//2, W//2)`` exactly as written.  Power-of-two extents use
an iterative radix-2 Cooley-Tukey transform; other extents fall back to a
direct DFT along that axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ParameterError


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_radix2(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized DFT along the last axis, length a power of two."""
    n = a.shape[-1]
    lead = a.shape[:-1]
    out = a[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(*lead, n // size, size)
        even, odd = blocks[..., :half], blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def _dft_direct(a: np.ndarray, inverse: bool) -> np.ndarray:
    n = a.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    return a @ mat.T


def _dft_axis(a: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    fn = _fft_radix2 if _is_pow2(a.shape[-1]) else _dft_direct
    return np.moveaxis(fn(a, inverse), -1, axis)


def _check_image(x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise DomainError(f"expected a non-empty (..., H, W) image, got shape {x.shape}")


@dataclass
class Spectrum:
    """Centered complex coefficients with shape (..., H, W)."""

    coeffs: np.ndarray

    @property
    def height(self) -> int:
        return self.coeffs.shape[-2]

    @property
    def width(self) -> int:
        return self.coeffs.shape[-1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.coeffs)


def fft2(image) -> Spectrum:
    """Unitary 2-D DFT over the last two axes, shifted so DC sits at (H//2, W//2)."""
    x = np.asarray(image)
    _check_image(x)
    h, w = x.shape[-2:]
    f = _dft_axis(_dft_axis(x.astype(np.complex128), -1, False), -2, False) / np.sqrt(h * w)
    return Spectrum(np.fft.fftshift(f, axes=(-2, -1)))


def ifft2(spec: Spectrum | np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`; returns complex values."""
    c = spec.coeffs if isinstance(spec, Spectrum) else np.asarray(spec)
    _check_image(c)
    h, w = c.shape[-2:]
    f = np.fft.ifftshift(c, axes=(-2, -1))
    return _dft_axis(_dft_axis(f, -1, True), -2, True) / np.sqrt(h * w)


def radius_grid(width: int, height: int) -> np.ndarray:
    """D(u, v): distance of every centered frequency cell from the DC cell, shape (H, W)."""
    v, u = np.mgrid[0:height, 0:width]
    return np.sqrt((u - width // 2) ** 2 + (v - height // 2) ** 2)


@dataclass
class FilterMask:
    width: int
    height: int
    d0: float
    values: np.ndarray  # (H, W)


def gaussian_mask(width: int, height: int, d0: float) -> FilterMask:
    if not d0 > 0:
        raise ParameterError(f"cut-off D0 must be > 0, got {d0}")
    d = radius_grid(width, height)
    return FilterMask(width, height, float(d0), np.exp(-(d ** 2) / (2.0 * d0 ** 2)))


def lowpass_filter(image, d0: float, value_range=None, residue_tol: float = 1e-4) -> np.ndarray:
    """Gaussian low-pass each (H, W) plane of ``image``.

    ``value_range`` is an optional ``(low, high)`` pair (scalars or arrays
    broadcastable against ``image``) used to clamp the result.
    """
    x = np.asarray(image)
    _check_image(x)
    h, w = x.shape[-2:]
    mask = gaussian_mask(w, h, d0).values
    out = ifft2(Spectrum(fft2(x).coeffs * mask))
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue >= residue_tol:
        raise NumericError(f"imaginary residue {residue:.3e} after filtering exceeds {residue_tol}")
    real = out.real
    if value_range is not None:
        real = np.clip(real, value_range[0], value_range[1])
    return real.astype(x.dtype if x.dtype.kind == "f" else np.float32)


def rescale_d0(d0: float, side: int, reference_side: int = 224) -> float:
    """Scale a cut-off chosen at ``reference_side`` pixels to images of ``side`` pixels."""
    return d0 * side / reference_side


@dataclass
class RadialProfile:
    edges: np.ndarray  # num_bins + 1
    mean: np.ndarray   # per-bin mean amplitude across images and channels
    std: np.ndarray
    counts: np.ndarray  # frequency cells per bin

    def high_band_mean(self, fraction: float = 0.25) -> float:
        """Average of the bin means over the top ``fraction`` of radii."""
        k = max(1, int(np.ceil(len(self.mean) * fraction)))
        tail = self.mean[-k:]
        return float(np.nanmean(tail))

    def to_rows(self) -> list[tuple[int, float, float]]:
        return [(i, float(m), float(s)) for i, (m, s) in enumerate(zip(self.mean, self.std))]


def amplitude_distribution(batch, num_bins: int = 16) -> RadialProfile:
    """Radial profile of |F| for a batch shaped (N, H, W) or (N, C, H, W).

    Each image-channel plane contributes its mean amplitude per radial bin;
    the profile reports the mean and standard deviation of those values.
    """
    if num_bins < 2:
        raise ParameterError(f"num_bins must be >= 2, got {num_bins}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 3 or x.shape[0] == 0:
        raise DomainError(f"expected a non-empty batch of images, got shape {x.shape}")
    h, w = x.shape[-2:]
    planes = x.reshape(-1, h, w)
    mag = fft2(planes).magnitude.reshape(len(planes), -1)
    d = radius_grid(w, h).reshape(-1)
    edges = np.linspace(0.0, d.max(), num_bins + 1)
    which = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, num_bins - 1)
    counts = np.bincount(which, minlength=num_bins)
    per_plane = np.full((len(planes), num_bins), np.nan)
    for b in range(num_bins):
        if counts[b]:
            per_plane[:, b] = mag[:, which == b].mean(axis=1)
    with np.errstate(invalid="ignore"):
        mean = per_plane.mean(axis=0)
        std = per_plane.std(axis=0)
    return RadialProfile(edges, mean, std, counts)


NOISE_KINDS = ("gaussian", "speckle", "salt_pepper", "uniform")


def inject_noise(image, kind: str, level: float, rng: np.random.Generator | None = None,
                 value_range=None) -> np.ndarray:
    """Corrupt ``image`` with one of four noise models.

    gaussian adds N(0, level^2); speckle multiplies by 1 + N(0, level^2);
    salt_pepper sets each pixel to the range minimum or maximum with
    probability level/2 each; uniform adds U(-level, level).
    """
    if kind not in NOISE_KINDS:
        raise ParameterError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if not level >= 0:
        raise ParameterError(f"noise level must be >= 0, got {level}")
    x = np.asarray(image)
    rng = np.random.default_rng() if rng is None else rng
    dt = x.dtype if x.dtype.kind == "f" else np.float32
    if level == 0:
        return x.astype(dt, copy=True)
    if kind == "gaussian":
        return (x + rng.normal(0.0, level, x.shape)).astype(dt)
    if kind == "speckle":
        return (x * (1.0 + rng.normal(0.0, level, x.shape))).astype(dt)
    if kind == "uniform":
        return (x + rng.uniform(-level, level, x.shape)).astype(dt)
    if level > 1:
        raise ParameterError(f"salt-and-pepper probability must lie in [0, 1], got {level}")
    lo, hi = (x.min(), x.max()) if value_range is None else value_range
    u = rng.random(x.shape)
    out = x.astype(dt, copy=True)
    low_mask, high_mask = u < level / 2, (u >= level / 2) & (u < level)
    out[low_mask] = np.broadcast_to(lo, x.shape)[low_mask]
    out[high_mask] = np.broadcast_to(hi, x.shape)[high_mask]
    return out
