"""Riesz transform and local amplitude/phase/orientation spectra.

The two Riesz components are computed in the frequency domain with the
multiplier pair (-i*u/|w|, -i*v/|w|) over centered integer frequencies
(u along columns, v along rows), so that a horizontal cosine maps to its
quadrature sine.  The DC bin is forced to zero; the Nyquist row/column of
each multiplier is zeroed as well, which keeps the multiplier exactly
Hermitian and the inverse transform real to machine precision.

The image with its two Riesz components forms a monogenic triple from
which local amplitude, phase and orientation follow.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass

import numpy as np

ORACLE_MAX_SIDE = 32
VALID_EPS = 1e-12


@dataclass
class RieszPair:
    """Horizontal (r1) and vertical (r2) quadrature components."""

    r1: np.ndarray
    r2: np.ndarray


@dataclass
class MonogenicComponents:
    """Per-pixel amplitude, phase, axial orientation, and validity flags."""

    amplitude: np.ndarray
    phase: np.ndarray
    orientation: np.ndarray
    valid_mask: np.ndarray


def _centered_freqs(n: int) -> np.ndarray:
    # 0, 1, ..., then the negative half; Nyquist lands on the negative
    # side for even n (matches numpy's fft bin ordering).
    return np.fft.fftfreq(n, d=1.0 / n).astype(np.float64)


def _multipliers(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    v = _centered_freqs(rows)[:, None]
    u = _centered_freqs(cols)[None, :]
    norm = np.sqrt(u * u + v * v)
    norm[0, 0] = 1.0
    m1 = -1j * u / norm
    m2 = -1j * v / norm
    m1[0, 0] = 0.0
    m2[0, 0] = 0.0
    # Nyquist bins have no +/- frequency partner on the grid; an odd
    # multiplier must vanish there to stay Hermitian.
    if cols % 2 == 0:
        m1[:, cols // 2] = 0.0
    if rows % 2 == 0:
        m2[rows // 2, :] = 0.0
    return m1, m2


def riesz_transform(img: np.ndarray) -> RieszPair:
    """FFT-based Riesz transform of a 2D image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"need at least a 2x2 image, got shape {img.shape}")
    m1, m2 = _multipliers(*img.shape)
    spectrum = np.fft.fft2(img)
    r1 = np.fft.ifft2(spectrum * m1)
    r2 = np.fft.ifft2(spectrum * m2)
    return RieszPair(r1=np.real(r1), r2=np.real(r2))


def monogenic_components(img: np.ndarray) -> MonogenicComponents:
    """Amplitude, phase, and orientation of the monogenic triple.

    amplitude = sqrt(f^2 + r1^2 + r2^2)
    phase     = atan2(sqrt(r1^2 + r2^2), f)   in [0, pi]
    orientation = atan2(r2, r1) folded to [0, pi)  (axial quantity)

    Orientation is flagged invalid where the Riesz energy r1^2 + r2^2
    falls below 1e-12 times the squared peak pixel magnitude.
    """
    img = np.asarray(img, dtype=np.float64)
    pair = riesz_transform(img)
    r1, r2 = pair.r1, pair.r2
    riesz_sq = r1 * r1 + r2 * r2
    amplitude = np.sqrt(img * img + riesz_sq)
    phase = np.arctan2(np.sqrt(riesz_sq), img)
    orientation = np.mod(np.arctan2(r2, r1), np.pi)
    # atan2 can return exactly pi for (negative, +0); fold to the open end.
    orientation[orientation >= np.pi] = 0.0
    peak = np.max(np.abs(img))
    valid = riesz_sq >= VALID_EPS * peak * peak
    orientation = np.where(valid, orientation, 0.0)
    return MonogenicComponents(
        amplitude=amplitude,
        phase=phase,
        orientation=orientation,
        valid_mask=valid,
    )


def dft_riesz_oracle(img: np.ndarray) -> RieszPair:
    """Reference Riesz transform via direct quadruple-loop DFT/IDFT.

    Same contract as :func:`riesz_transform`, kept deliberately free of
    any FFT so the two paths stay independent.  Guarded to small inputs
    (each transform is O(N^4)).
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    if rows > ORACLE_MAX_SIDE or cols > ORACLE_MAX_SIDE:
        raise ValueError(
            f"oracle is limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE}, "
            f"got {rows}x{cols}"
        )

    def signed(k: int, n: int) -> int:
        return k if k < (n + 1) // 2 else k - n

    spectrum = [[0j] * cols for _ in range(rows)]
    for fv in range(rows):
        for fu in range(cols):
            acc = 0j
            for y in range(rows):
                for x in range(cols):
                    ang = -2.0 * cmath.pi * (fu * x / cols + fv * y / rows)
                    acc += img[y, x] * cmath.exp(1j * ang)
            spectrum[fv][fu] = acc

    def multiplier(fv: int, fu: int, horizontal: bool):
        u = signed(fu, cols)
        v = signed(fv, rows)
        if u == 0 and v == 0:
            return 0j
        if horizontal and cols % 2 == 0 and fu == cols // 2:
            return 0j
        if not horizontal and rows % 2 == 0 and fv == rows // 2:
            return 0j
        mag = (u * u + v * v) ** 0.5
        return -1j * (u if horizontal else v) / mag

    def inverse(product):
        out = np.zeros((rows, cols))
        for y in range(rows):
            for x in range(cols):
                acc = 0j
                for fv in range(rows):
                    for fu in range(cols):
                        ang = 2.0 * cmath.pi * (fu * x / cols + fv * y / rows)
                        acc += product[fv][fu] * cmath.exp(1j * ang)
                acc /= rows * cols
                out[y, x] = acc.real
        return out

    prod1 = [
        [spectrum[fv][fu] * multiplier(fv, fu, True) for fu in range(cols)]
        for fv in range(rows)
    ]
    prod2 = [
        [spectrum[fv][fu] * multiplier(fv, fu, False) for fu in range(cols)]
        for fv in range(rows)
    ]
    return RieszPair(r1=inverse(prod1), r2=inverse(prod2))
