"""Complex fields, unitary FFTs, the amplitude/phase two-channel map and seeded RNG.

Complex fields are plain ``numpy.complex128`` arrays of shape ``(H, W)``.
Two-channel images are real ``float64`` arrays of shape ``(2, H, W)`` holding
the normalized amplitude (channel 0) and phase (channel 1).
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "DimensionError",
    "fft2",
    "ifft2",
    "to_two_channel",
    "from_two_channel",
    "make_rng",
    "clamp_count",
    "reset_clamp_count",
]


class DimensionError(ValueError):
    """Raised when an array does not have the shape an operation needs."""


_clamped = 0


def clamp_count() -> int:
    """Number of pixels clamped by :func:`to_two_channel` since the last reset."""
    return _clamped


def reset_clamp_count() -> None:
    global _clamped
    _clamped = 0


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_fft_shape(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise DimensionError(f"expected at least 2 dimensions, got shape {x.shape}")
    h, w = x.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise DimensionError(f"FFT dimensions must be powers of two, got {h}x{w}")


def fft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes (scale ``1/sqrt(H*W)``)."""
    x = np.asarray(x)
    _check_fft_shape(x)
    return np.fft.fft2(x, norm="ortho")


def ifft2(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`; also its adjoint."""
    x = np.asarray(x)
    _check_fft_shape(x)
    return np.fft.ifft2(x, norm="ortho")


def to_two_channel(x: np.ndarray) -> np.ndarray:
    """Map a complex field to the normalized ``(2, H, W)`` amplitude/phase image.

    Amplitude ``a`` in ``[0, 1]`` maps to ``2a - 1``; phase ``arg(x)`` maps to
    ``arg(x) / pi``.  Amplitudes above one are clamped and counted (see
    :func:`clamp_count`).
    """
    global _clamped
    x = np.asarray(x, dtype=np.complex128)
    amp = np.abs(x)
    over = amp > 1.0
    n_over = int(over.sum())
    if n_over:
        _clamped += n_over
        warnings.warn(f"{n_over} pixel(s) with |x| > 1 clamped", RuntimeWarning, stacklevel=2)
        amp = np.minimum(amp, 1.0)
    return np.stack([2.0 * amp - 1.0, np.angle(x) / np.pi])


def from_two_channel(t: np.ndarray, clip: bool = False) -> np.ndarray:
    """Inverse of :func:`to_two_channel`.

    With ``clip=True`` both channels are first clipped to ``[-1, 1]``, which is
    how final diffusion samples are mapped back.  Without clipping the map is
    smooth everywhere, which the guidance gradients rely on.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] != 2:
        raise DimensionError(f"expected a (2, H, W) image, got shape {t.shape}")
    if clip:
        t = np.clip(t, -1.0, 1.0)
    amp = 0.5 * (t[0] + 1.0)
    return amp * np.exp(1j * np.pi * t[1])


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    Philox is counter-based, so the n-th draw is a pure function of the key and
    the draw index regardless of platform.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
