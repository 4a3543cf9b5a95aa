"""Radix-2 2D FFT over the spatial axes, with orthonormal scaling.

Both directions carry the symmetric 1/sqrt(HW) factor, so a forward/inverse
round trip is the identity and energy is conserved.  Spatial sizes must be
powers of two.  The transform is differentiable: the adjoint of the forward
map is the inverse map applied to the cotangent spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, check_same_dtype, record


@dataclass
class ComplexPair:
    """Real and imaginary planes of a spectrum, as two same-shape tensors."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"ComplexPair: real {self.real.shape} != imag "
                             f"{self.imag.shape}")


@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized iterative Cooley-Tukey over the last axis (power-of-two)."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    a = a[..., _bit_reversal(n)]
    sign = 2j if inverse else -2j
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * np.pi * np.arange(half) / size).astype(a.dtype)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        top = a[..., :half]
        bot = a[..., half:] * tw
        a = np.concatenate([top + bot, top - bot], axis=-1)
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def _fft2_raw(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Orthonormal 2D transform of the last two axes of a complex array."""
    h, w = a.shape[-2], a.shape[-1]
    out = _fft_last_axis(a, inverse)
    out = _fft_last_axis(out.swapaxes(-1, -2), inverse).swapaxes(-1, -2)
    return out / math.sqrt(h * w)


def _complex_dtype(dtype: np.dtype) -> np.dtype:
    return np.dtype(np.complex64 if dtype == np.float32 else np.complex128)


def _check_spatial(op: str, shape) -> None:
    h, w = shape[2], shape[3]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"{op}: spatial dims ({h},{w}) must be powers of two "
                         f"(radix-2 restriction)")


def fft2d(x: Tensor) -> ComplexPair:
    """Orthonormal 2D FFT of each (H,W) plane of a real tensor."""
    _check_spatial("fft2d", x.shape)
    spec = _fft2_raw(x.data.astype(_complex_dtype(x.dtype)), inverse=False)
    re = np.ascontiguousarray(spec.real).astype(x.dtype, copy=False)
    im = np.ascontiguousarray(spec.imag).astype(x.dtype, copy=False)

    def vjp_real(g):
        z = _fft2_raw(g.astype(_complex_dtype(x.dtype)), inverse=True)
        return (np.ascontiguousarray(z.real).astype(x.dtype, copy=False),)

    def vjp_imag(g):
        z = _fft2_raw(g.astype(_complex_dtype(x.dtype)), inverse=True)
        return (np.ascontiguousarray(-z.imag).astype(x.dtype, copy=False),)

    return ComplexPair(record("fft2d.re", re, [x], vjp_real),
                       record("fft2d.im", im, [x], vjp_imag))


def ifft2d(pair: ComplexPair) -> Tensor:
    """Real part of the orthonormal inverse 2D FFT of a spectrum pair."""
    t, _ = ifft2d_with_residue(pair)
    return t


def ifft2d_with_residue(pair: ComplexPair) -> tuple[Tensor, float]:
    """Inverse transform plus the discarded imaginary energy (sum of squares)."""
    re, im = pair.real, pair.imag
    check_same_dtype("ifft2d", re, im)
    _check_spatial("ifft2d", re.shape)
    cdt = _complex_dtype(re.dtype)
    back = _fft2_raw(re.data.astype(cdt) + 1j * im.data.astype(cdt), inverse=True)
    out = np.ascontiguousarray(back.real).astype(re.dtype, copy=False)
    residue = float(np.sum(back.imag.astype(np.float64) ** 2))

    def vjp(g):
        z = _fft2_raw(g.astype(cdt), inverse=False)
        return (np.ascontiguousarray(z.real).astype(re.dtype, copy=False),
                np.ascontiguousarray(z.imag).astype(re.dtype, copy=False))

    return record("ifft2d", out, [re, im], vjp), residue
