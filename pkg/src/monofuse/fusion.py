"""Fusing orientation spectra of the highest-frequency IMFs.

Orientation is axial (theta and theta + pi describe the same structure),
so maps are combined by a circular mean over doubled angles: each valid
source contributes a unit vector at angle 2*theta, the vectors are
summed, and half the resultant angle - folded back to [0, pi) - is the
fused orientation.  An optional variant weights each source by its
monogenic amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bemd import ImfStack
from .monogenic import MonogenicComponents

DEGENERATE_EPS = 1e-9


@dataclass
class FusedOrientationMap:
    """Composite orientation raster with validity and tie-break flags."""

    angles: np.ndarray
    valid_mask: np.ndarray
    sources: int
    degenerate_mask: np.ndarray


def select_top_imfs(stack: ImfStack, fraction: float = 0.4) -> list[np.ndarray]:
    """First ceil(fraction * count) IMFs, highest frequency first."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if not stack.imfs:
        raise ValueError("stack has no IMFs to select from")
    count = int(np.ceil(fraction * len(stack.imfs)))
    return stack.imfs[:count]


def fuse_orientations(
    maps: list[MonogenicComponents], weighted_by_amplitude: bool = False
) -> FusedOrientationMap:
    """Per-pixel circular mean of doubled orientation angles.

    Only sources valid at a pixel contribute.  Where the doubled vectors
    cancel (resultant length below 1e-9), the first valid source's angle
    is kept and the pixel flagged degenerate; where no source is valid,
    the angle is 0 and the pixel invalid.
    """
    if not maps:
        raise ValueError("need at least one orientation map")
    shape = maps[0].orientation.shape
    for m in maps[1:]:
        if m.orientation.shape != shape:
            raise ValueError(
                f"orientation shape {m.orientation.shape} != {shape}"
            )

    sin_sum = np.zeros(shape)
    cos_sum = np.zeros(shape)
    any_valid = np.zeros(shape, dtype=bool)
    first_angle = np.zeros(shape)
    first_set = np.zeros(shape, dtype=bool)
    for m in maps:
        valid = m.valid_mask
        if weighted_by_amplitude:
            w = np.where(valid, m.amplitude, 0.0)
        else:
            w = valid.astype(np.float64)
        doubled = 2.0 * m.orientation
        sin_sum += w * np.sin(doubled)
        cos_sum += w * np.cos(doubled)
        newly = valid & ~first_set
        first_angle[newly] = m.orientation[newly]
        first_set |= valid
        any_valid |= valid

    resultant = np.hypot(sin_sum, cos_sum)
    degenerate = any_valid & (resultant < DEGENERATE_EPS)
    fused = 0.5 * np.arctan2(sin_sum, cos_sum)
    fused = np.mod(fused, np.pi)
    fused[fused >= np.pi] = 0.0
    fused = np.where(degenerate, first_angle, fused)
    fused = np.where(any_valid, fused, 0.0)
    return FusedOrientationMap(
        angles=fused,
        valid_mask=any_valid,
        sources=len(maps),
        degenerate_mask=degenerate,
    )
