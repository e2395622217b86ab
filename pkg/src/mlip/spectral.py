"""Frequency-domain token mixing over the patch grid.

Token grids are real arrays shaped ``(..., h, w, C)``: the two grid axes come
right before the channel axis and each channel is transformed independently.
Transforms use zero-based frequency indices and run in complex128.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Tensor, custom_op, get_dtype

GRID_AXES = (-3, -2)
IMAG_RESIDUE = 1e-5
ORACLE_MAX_GRID = 16


class SpectralConfigError(ValueError):
    """Grid shape unsupported by the transforms."""


class SpectralResidueError(RuntimeError):
    """An inverse transform that should be real produced an imaginary part."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _check_grid(h: int, w: int):
    if not (_is_pow2(h) and _is_pow2(w)):
        raise SpectralConfigError(f"grid {h}x{w} is not a power-of-two size")


# ------------------------------------------------------------------ radix-2 FFT
def fft(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey transform along ``axis``.

    Unnormalized in both directions; ``inverse`` flips the twiddle sign.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise SpectralConfigError(f"FFT length {n} is not a power of two")
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    x = x[..., rev]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = x.reshape(x.shape[:-1] + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(x.shape)
        size *= 2
    return np.moveaxis(x, -1, axis)


def fft2(x: np.ndarray) -> np.ndarray:
    """Separable 2D transform over the grid axes: columns first, then rows."""
    return fft(fft(x, axis=GRID_AXES[1]), axis=GRID_AXES[0])


def ifft2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[GRID_AXES[0]], x.shape[GRID_AXES[1]]
    return fft(fft(x, axis=GRID_AXES[1], inverse=True), axis=GRID_AXES[0], inverse=True) / (h * w)


# -------------------------------------------------------------------- spectra
@dataclass
class Spectrum:
    real: np.ndarray
    imag: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.real.shape

    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


@dataclass
class HalfSpectrum:
    """Columns ``0 .. w/2-1`` of a real grid's spectrum.

    ``nyquist`` keeps column ``w/2``, which the ``w/2`` retained columns cannot
    reproduce; without it the inverse is exact only up to that column.
    """

    real: np.ndarray
    imag: np.ndarray
    nyquist: np.ndarray = None

    @property
    def shape(self) -> tuple:
        return self.real.shape

    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def power(self) -> np.ndarray:
        return self.real ** 2 + self.imag ** 2


def dft_2d(tokens) -> Spectrum:
    """Spectrum of a real token grid ``(..., h, w, C)`` via the radix-2 FFT."""
    y = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    _check_grid(y.shape[-3], y.shape[-2])
    return Spectrum.from_complex(fft2(y.astype(np.float64)))


def brute_dft_oracle(tokens) -> Spectrum:
    """Literal double-sum DFT for grids up to 16x16 (test oracle only)."""
    y = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
    h, w = y.shape[-3], y.shape[-2]
    if h > ORACLE_MAX_GRID or w > ORACLE_MAX_GRID:
        raise SpectralConfigError(f"oracle grid {h}x{w} exceeds {ORACLE_MAX_GRID}x{ORACLE_MAX_GRID}")
    p = np.arange(h)
    q = np.arange(w)
    out = np.zeros(y.shape, dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            phase = np.exp(-2j * np.pi * (u * p[:, None] / h + v * q[None, :] / w))
            out[..., u, v, :] = np.einsum("...pqc,pq->...c", y, phase)
    return Spectrum.from_complex(out)


def half_spectrum(spec: Spectrum) -> HalfSpectrum:
    w = spec.shape[-2]
    if w % 2:
        raise SpectralConfigError(f"half spectrum needs an even grid width, got {w}")
    k = w // 2
    z = spec.complex()
    return HalfSpectrum(np.ascontiguousarray(z.real[..., :k, :]),
                        np.ascontiguousarray(z.imag[..., :k, :]),
                        nyquist=z[..., k, :].copy())


def _hermitian_column(col: np.ndarray) -> np.ndarray:
    """Hermitian part of a column along the row axis (``(..., h, C)``)."""
    mirrored = np.roll(col[..., ::-1, :], 1, axis=-2)
    return 0.5 * (col + np.conj(mirrored))


def hermitian_extend(half: np.ndarray, nyquist=None) -> np.ndarray:
    """Full ``(..., h, w, C)`` spectrum of a real signal from its half spectrum.

    Columns 0 and w/2 map to themselves under the symmetry, so only their
    Hermitian parts are kept. A missing Nyquist column is taken as zero.
    """
    half = np.asarray(half, dtype=np.complex128)
    h, k = half.shape[-3], half.shape[-2]
    w = 2 * k
    full = np.zeros(half.shape[:-2] + (w,) + half.shape[-1:], dtype=np.complex128)
    full[..., 0, :] = _hermitian_column(half[..., 0, :])
    full[..., 1:k, :] = half[..., 1:, :]
    if nyquist is not None:
        full[..., k, :] = _hermitian_column(np.asarray(nyquist, dtype=np.complex128))
    rows = (-np.arange(h)) % h
    for v in range(k + 1, w):
        full[..., v, :] = np.conj(half[..., rows, w - v, :])
    return full


# ---------------------------------------------------------------- Lego-Filter
def lego_weights(pieces: int) -> np.ndarray:
    """Cosine weights ``cos((2j-1)pi / 2N)`` for pieces ``j = 1..N``."""
    if pieces < 2:
        raise SpectralConfigError(f"a Lego-Filter needs at least 2 pieces, got {pieces}")
    j = np.arange(1, pieces + 1)
    return np.cos((2 * j - 1) * np.pi / (2 * pieces))


@dataclass
class LegoFilter:
    """``pieces`` is a tensor shaped ``(N, h, w/2, C)``, one slice per piece."""

    pieces: Tensor

    @property
    def count(self) -> int:
        return self.pieces.shape[0]


def modulate(power: Tensor, lego: LegoFilter, grid_size: int) -> Tensor:
    """``2 * sum_j (1/hw) power * x_j * cos_j`` for a power spectrum tensor."""
    if lego.pieces.shape[1:] != power.shape[-3:]:
        raise SpectralConfigError(
            f"Lego pieces {lego.pieces.shape[1:]} do not match half spectrum {power.shape[-3:]}")
    w = lego_weights(lego.count) * (2.0 / grid_size)
    combined = (lego.pieces * w.reshape(-1, 1, 1, 1)).sum(axis=0)
    return power * combined


def lego_filter_apply(spectrum: HalfSpectrum, lego: LegoFilter) -> Tensor:
    h, k = spectrum.shape[-3], spectrum.shape[-2]
    return modulate(Tensor(spectrum.power()), lego, h * 2 * k)


# ------------------------------------------------ differentiable spectral ops
def power_half_spectrum(tokens: Tensor) -> Tensor:
    """``|Y'|^2`` of a real token grid, differentiable w.r.t. the tokens."""
    y = tokens.data.astype(np.float64)
    h, w = y.shape[-3], y.shape[-2]
    _check_grid(h, w)
    if w % 2:
        raise SpectralConfigError(f"half spectrum needs an even grid width, got {w}")
    k = w // 2
    spec = fft2(y)
    half = spec[..., :k, :]
    out = half.real ** 2 + half.imag ** 2

    def back(g):
        z = np.zeros_like(spec)
        z[..., :k, :] = g * half
        return (2.0 * h * w * ifft2(z).real,)

    return custom_op(out, (tokens,), back)


def idft_2d_real(x: Union[Tensor, np.ndarray, HalfSpectrum]):
    """Real grid whose half spectrum is ``x``.

    A :class:`HalfSpectrum` is inverted exactly (its Nyquist column included)
    and returns an ndarray. A real ``(..., h, w/2, C)`` tensor is read as a
    half spectrum with zero imaginary part and zero Nyquist column; the result
    is a tensor differentiable w.r.t. ``x``.
    """
    if isinstance(x, HalfSpectrum):
        return _inverse_real(hermitian_extend(x.complex(), x.nyquist))
    x = x if isinstance(x, Tensor) else Tensor(x)
    h, k = x.shape[-3], x.shape[-2]
    w = 2 * k
    _check_grid(h, w)
    out = _inverse_real(hermitian_extend(x.data))
    col_scale = np.full(k, 2.0)
    col_scale[0] = 1.0

    def back(g):
        spec = fft2(g.astype(np.float64)).real[..., :k, :]
        return (spec * col_scale[:, None] / (h * w),)

    return custom_op(out, (x,), back)


def _inverse_real(full: np.ndarray) -> np.ndarray:
    y = ifft2(full)
    scale = max(1.0, float(np.abs(y.real).max(initial=0.0)))
    residue = float(np.abs(y.imag).max(initial=0.0))
    if residue > IMAG_RESIDUE * scale:
        raise SpectralResidueError(f"imaginary residue {residue:.3e} after Hermitian extension")
    return y.real.astype(get_dtype())


def fourier_mix(tokens: Tensor, lego: LegoFilter) -> Tensor:
    """Token mixing on a grid: power spectrum, Lego modulation, real inverse."""
    h, w = tokens.shape[-3], tokens.shape[-2]
    return idft_2d_real(modulate(power_half_spectrum(tokens), lego, h * w))
