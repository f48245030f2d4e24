"""Bidimensional empirical mode decomposition by envelope sifting.

An image is peeled into intrinsic mode functions (IMFs): each sifting
cycle finds the strict local extrema, interpolates upper and lower
envelope surfaces through them with thin-plate splines, and subtracts the
envelope mean.  Repeating on successive residues yields components in
decreasing frequency order plus a low-frequency residue whose sum
reconstructs the input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

TPS_REGULARIZATION = 1e-8


class MonotoneSurfaceError(ValueError):
    """Signal that a surface has too few extrema to sift further."""


class EnvelopeSolveError(ValueError):
    """The thin-plate-spline system stayed singular after regularization."""


@dataclass
class SiftConfig:
    """Knobs for the sifting loop."""

    num_imfs: int = 3
    max_sift_iterations: int = 10
    sd_threshold: float = 0.2
    min_extrema: int = 4

    def __post_init__(self):
        if self.num_imfs < 1:
            raise ValueError("num_imfs must be >= 1")
        if self.max_sift_iterations < 1:
            raise ValueError("max_sift_iterations must be >= 1")
        if not self.sd_threshold > 0:
            raise ValueError("sd_threshold must be > 0")
        if self.min_extrema < 1:
            raise ValueError("min_extrema must be >= 1")


@dataclass
class ExtremaSet:
    """Strict local maxima and minima, each an (n, 3) row/col/value array."""

    maxima: np.ndarray
    minima: np.ndarray


@dataclass
class EnvelopePair:
    upper: np.ndarray
    lower: np.ndarray


@dataclass
class ImfStack:
    """Ordered IMFs (index 0 = highest frequency) plus the final residue."""

    imfs: list[np.ndarray]
    residue: np.ndarray
    source_dims: tuple[int, int]


def find_extrema(img: np.ndarray) -> ExtremaSet:
    """Locate pixels strictly greater (maxima) or smaller (minima) than
    every available 8-neighbor.

    Boundary pixels are compared against their in-bounds neighbors only.
    Plateau pixels tie with a neighbor and are never extrema.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"need at least a 3x3 image, got shape {img.shape}")

    # Pad with -inf / +inf so boundary pixels compare only real neighbors.
    lo = np.pad(img, 1, constant_values=-np.inf)
    hi = np.pad(img, 1, constant_values=np.inf)
    is_max = np.ones(img.shape, dtype=bool)
    is_min = np.ones(img.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            r0, c0 = 1 + dr, 1 + dc
            nb_lo = lo[r0 : r0 + img.shape[0], c0 : c0 + img.shape[1]]
            nb_hi = hi[r0 : r0 + img.shape[0], c0 : c0 + img.shape[1]]
            is_max &= img > nb_lo
            is_min &= img < nb_hi

    def collect(mask):
        rows, cols = np.nonzero(mask)
        return np.column_stack([rows, cols, img[rows, cols]]).astype(np.float64)

    return ExtremaSet(maxima=collect(is_max), minima=collect(is_min))


def _affine_lstsq(points: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    rows, cols = dims
    p = np.column_stack([np.ones(len(points)), points[:, 0], points[:, 1]])
    coef, *_ = np.linalg.lstsq(p, points[:, 2], rcond=None)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return coef[0] + coef[1] * rr + coef[2] * cc


def _tps_kernel(d2: np.ndarray) -> np.ndarray:
    # r^2 log r written as d^2 * log(d^2) / 2; the limit at d=0 is 0.
    out = np.zeros_like(d2)
    nz = d2 > 0
    out[nz] = 0.5 * d2[nz] * np.log(d2[nz])
    return out


def interpolate_envelope(
    points: np.ndarray, dims: tuple[int, int]
) -> np.ndarray:
    """Thin-plate-spline surface through scattered (row, col, value) points.

    The surface uses the radial kernel r^2 log r plus an affine term, with
    Tikhonov regularization on the kernel block for conditioning.
    Degenerate inputs fall back rather than fail: a single point gives a
    constant surface, and two points or collinear points give the
    least-squares affine fit.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError("points must be a non-empty (n, 3) array")
    rows, cols = dims
    if (
        points[:, 0].min() < 0
        or points[:, 0].max() > rows - 1
        or points[:, 1].min() < 0
        or points[:, 1].max() > cols - 1
    ):
        raise ValueError("interpolation point out of bounds")

    if len(points) == 1:
        return np.full(dims, points[0, 2])

    coords = points[:, :2]
    values = points[:, 2]
    n = len(points)
    p = np.column_stack([np.ones(n), coords])
    if n == 2 or np.linalg.matrix_rank(p) < 3:
        return _affine_lstsq(points, dims)

    d2 = (
        (coords[:, None, 0] - coords[None, :, 0]) ** 2
        + (coords[:, None, 1] - coords[None, :, 1]) ** 2
    )
    k = _tps_kernel(d2)
    k[np.diag_indices_from(k)] += TPS_REGULARIZATION
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.concatenate([values, np.zeros(3)])
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise EnvelopeSolveError(
            f"singular TPS system for {n} points: {exc}"
        ) from exc
    if not np.all(np.isfinite(sol)):
        raise EnvelopeSolveError(
            f"TPS solve produced non-finite coefficients "
            f"(cond={np.linalg.cond(lhs):.3e})"
        )
    w, a = sol[:n], sol[n:]

    grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    gr = grid_r.ravel().astype(np.float64)
    gc = grid_c.ravel().astype(np.float64)
    d2g = (
        (gr[:, None] - coords[None, :, 0]) ** 2
        + (gc[:, None] - coords[None, :, 1]) ** 2
    )
    surface = _tps_kernel(d2g) @ w + a[0] + a[1] * gr + a[2] * gc
    return surface.reshape(dims)


def build_envelopes(img: np.ndarray, extrema: ExtremaSet) -> EnvelopePair:
    """Interpolate the upper surface through maxima, lower through minima."""
    dims = img.shape
    return EnvelopePair(
        upper=interpolate_envelope(extrema.maxima, dims),
        lower=interpolate_envelope(extrema.minima, dims),
    )


def sift_once(
    current: np.ndarray, min_extrema: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """One sifting cycle: subtract the mean of the two envelope surfaces.

    Returns ``(proto_imf, mean_env)`` with ``proto_imf + mean_env ==
    current`` exactly.  Raises :class:`MonotoneSurfaceError` when either
    extrema set is smaller than ``min_extrema``, meaning sifting must stop.
    """
    current = np.asarray(current, dtype=np.float64)
    extrema = find_extrema(current)
    if len(extrema.maxima) < min_extrema or len(extrema.minima) < min_extrema:
        raise MonotoneSurfaceError(
            f"{len(extrema.maxima)} maxima / {len(extrema.minima)} minima, "
            f"need {min_extrema} of each"
        )
    env = build_envelopes(current, extrema)
    mean_env = (env.upper + env.lower) / 2.0
    return current - mean_env, mean_env


def extract_imf(
    current: np.ndarray, cfg: SiftConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Sift until the normalized squared change drops below the threshold.

    The stop statistic between consecutive proto-IMFs h_{k-1}, h_k is
    ``sum((h_{k-1} - h_k)^2) / sum(h_{k-1}^2)``; a hard iteration cap
    bounds the loop.  Returns ``(imf, next_residue)`` with
    ``imf + next_residue == current``.  A monotone-surface signal from the
    first sift propagates; on later sifts it just ends the refinement.
    """
    cfg = cfg or SiftConfig()
    current = np.asarray(current, dtype=np.float64)
    h_prev, _ = sift_once(current, cfg.min_extrema)
    for _ in range(cfg.max_sift_iterations - 1):
        try:
            h_next, _ = sift_once(h_prev, cfg.min_extrema)
        except MonotoneSurfaceError:
            break
        denom = np.sum(h_prev**2)
        if denom == 0.0:
            h_prev = h_next
            break
        sd = np.sum((h_prev - h_next) ** 2) / denom
        h_prev = h_next
        if sd < cfg.sd_threshold:
            break
    return h_prev, current - h_prev


def decompose(img: np.ndarray, cfg: SiftConfig | None = None) -> ImfStack:
    """Extract up to ``cfg.num_imfs`` IMFs, stopping early on a monotone
    residue.  Constant input yields zero IMFs and the input as residue."""
    cfg = cfg or SiftConfig()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"need at least an 8x8 image, got shape {img.shape}")
    residue = img
    imfs: list[np.ndarray] = []
    for k in range(cfg.num_imfs):
        try:
            imf, residue = extract_imf(residue, cfg)
        except MonotoneSurfaceError:
            logger.debug("stopping after %d IMFs: residue is monotone", k)
            break
        imfs.append(imf)
    return ImfStack(imfs=imfs, residue=residue, source_dims=img.shape)


def reconstruct(stack: ImfStack) -> np.ndarray:
    """Pixel-wise sum of all IMFs and the residue."""
    out = np.array(stack.residue, dtype=np.float64, copy=True)
    if out.shape != tuple(stack.source_dims):
        raise ValueError(
            f"residue shape {out.shape} != source dims {stack.source_dims}"
        )
    for imf in stack.imfs:
        if imf.shape != out.shape:
            raise ValueError(f"IMF shape {imf.shape} != {out.shape}")
        out += imf
    return out
