"""Synthetic image generators for tests, figures, and the benchmark.

The oriented-texture benchmark stands in for an illumination-variant
recognition dataset: each class is a sinusoidal texture at a fixed
orientation, and every sample is corrupted by a multiplicative
illumination ramp in a random direction plus additive noise.  Orientation
of the texture survives the lighting; raw intensity does not.

Each class texture superposes a coarse plain grating and a fine chirped
carrier, both aligned with the class angle.  The chirp's local period
sweeps across the image in a random direction with a random offset, so
its stripe spacing is nowhere stable from sample to sample — a template
matcher gets no fixed fine pattern to lock onto.  Its wavevector still
points along the class angle everywhere, though, so the local
orientation *value* stays informative at every pixel.  A gentle
direction wiggle on the carrier makes the local angle oscillate about
the class value in regular stripes, so orientation-derived maps carry
spatial pattern — not just a per-pixel value — while the envelope, and
with it the amplitude map, gains nothing.  Decomposition splits the
scales: the chirp and most of the pixel noise land in the first
component, the coarse grating arrives nearly clean in the second.
"""

from __future__ import annotations

import numpy as np

from .imageio import Dataset, LabeledSample

BENCHMARK_ANGLES_DEG = (0.0, 45.0, 90.0, 135.0)
BENCHMARK_SIZE = 64
BENCHMARK_TRAIN_PER_CLASS = 40
BENCHMARK_TEST_PER_CLASS = 20
# (period in pixels, amplitude) plain gratings at the class angle
BENCHMARK_COMPONENTS = ((16.0, 0.30),)
# fine carrier: a chirp whose local period sweeps this range across the
# image (random sweep direction and offset per sample).  Its wavevector
# points along the class angle everywhere, but its stripe spacing is
# nowhere stable — deliberately hostile to template matching while
# leaving the local-orientation value intact
BENCHMARK_CHIRP = (3.2, 6.5, 0.24)
# (degrees, period px) sinusoidal direction wiggle on the carrier: the
# local orientation oscillates about the class angle in regular stripes,
# giving orientation-derived maps spatial pattern at a fixed scale while
# the envelope — and with it the amplitude map — stays uninformative
BENCHMARK_WIGGLE = (16.0, 14.0)
# each sample's plain-grating periods are scaled by one shared draw, so
# stripe spacing is not a stable cue — only the angle is
BENCHMARK_PERIOD_JITTER = (0.875, 1.125)
BENCHMARK_NOISE_SIGMA = 0.05
BENCHMARK_GAIN_RANGE = (0.3, 1.0)


def two_tone_image(n: int = 64, p_high: float = 4.0, p_low: float = 32.0) -> np.ndarray:
    """Sum of a high- and a low-frequency 2D tone with strict extrema.

    Each tone is ``sin(2*pi*x/p) + sin(2*pi*y/p)`` so crests form isolated
    peaks rather than ridge lines (ridges tie with neighbors and would
    carry no strict extrema).
    """
    return tone_component(n, p_high) + tone_component(n, p_low)


def three_tone_image(
    n: int = 96, periods: tuple[float, float, float] = (4.0, 16.0, 48.0)
) -> np.ndarray:
    a, b, c = periods
    return tone_component(n, a) + tone_component(n, b) + tone_component(n, c)


def tone_component(n: int, period: float) -> np.ndarray:
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return np.sin(2.0 * np.pi * x / period) + np.sin(2.0 * np.pi * y / period)


def plane_wave(n: int, cycles: float, theta_rad: float, phase: float = 0.0) -> np.ndarray:
    """cos(2*pi*cycles*(x*cos(theta) + y*sin(theta))/n + phase) on n x n."""
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    proj = x * np.cos(theta_rad) + y * np.sin(theta_rad)
    return np.cos(2.0 * np.pi * cycles * proj / n + phase)


def _illumination_ramp(n: int, rng: np.random.Generator) -> np.ndarray:
    g_lo, g_hi = BENCHMARK_GAIN_RANGE
    direction = rng.uniform(0.0, 2.0 * np.pi)
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    proj = x * np.cos(direction) + y * np.sin(direction)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    return g_lo + (g_hi - g_lo) * t


def textured_sample(
    n: int, theta_rad: float, rng: np.random.Generator,
    components: tuple[tuple[float, float], ...] = BENCHMARK_COMPONENTS,
    noise_sigma: float = BENCHMARK_NOISE_SIGMA,
    period_jitter: tuple[float, float] | None = BENCHMARK_PERIOD_JITTER,
    chirp: tuple[float, float, float] | None = BENCHMARK_CHIRP,
    wiggle: tuple[float, float] | None = BENCHMARK_WIGGLE,
) -> np.ndarray:
    """One illumination-corrupted oriented texture sample in [0, 1].

    ``components`` lists ``(period, amplitude)`` gratings that are summed
    at the shared angle, each with its own random spatial offset.  One
    scale factor drawn from ``period_jitter`` stretches all periods
    together, preserving their ratio.  ``chirp = (p_lo, p_hi, amplitude)``
    adds a fine carrier along the same angle whose local period sweeps
    linearly between the bounds across the image, in a random direction
    and with a random offset per sample.  ``wiggle = (degrees, period)``
    shears the carrier's coordinate sinusoidally so its local direction
    oscillates about the class angle — pure frequency modulation, which
    structures the orientation field without touching the envelope.
    """
    scale = 1.0 if period_jitter is None else rng.uniform(*period_jitter)
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    proj = x * np.cos(theta_rad) + y * np.sin(theta_rad)
    texture = np.full((n, n), 0.5)
    for period, amplitude in components:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture += amplitude * np.cos(2.0 * np.pi * proj / (scale * period) + phase)
    if chirp is not None:
        p_lo, p_hi, amplitude = chirp
        f_start, f_end = 1.0 / p_lo, 1.0 / p_hi
        if rng.random() < 0.5:
            f_start, f_end = f_end, f_start
        phase = rng.uniform(0.0, 2.0 * np.pi)
        cproj = proj
        if wiggle is not None:
            wig_deg, wig_period = wiggle
            shear = np.tan(np.deg2rad(wig_deg)) * wig_period / (2.0 * np.pi)
            perp = -x * np.sin(theta_rad) + y * np.cos(theta_rad)
            psi = rng.uniform(0.0, 2.0 * np.pi)
            cproj = proj + shear * np.cos(2.0 * np.pi * perp / wig_period + psi)
        span = cproj.max() - cproj.min()
        t = (cproj - cproj.min()) / span
        # integrating the linear frequency sweep f_start -> f_end gives
        # the accumulated carrier phase at each pixel
        sweep = span * (f_start * t + 0.5 * (f_end - f_start) * t * t)
        texture += amplitude * np.cos(2.0 * np.pi * sweep + phase)
    gain = _illumination_ramp(n, rng)
    # noise rides inside the gain: the scene is noisy, the lighting scales
    # it — keeping spectrum quality even across bright and dim samples
    noisy = gain * (texture + rng.normal(0.0, noise_sigma, size=(n, n)))
    return np.clip(noisy, 0.0, 1.0)


def make_benchmark(
    seed: int,
    train_per_class: int = BENCHMARK_TRAIN_PER_CLASS,
    test_per_class: int = BENCHMARK_TEST_PER_CLASS,
    size: int = BENCHMARK_SIZE,
) -> tuple[Dataset, Dataset]:
    """The oriented-texture illumination benchmark (4 classes)."""
    rng = np.random.default_rng(seed)
    angles = [np.deg2rad(a) for a in BENCHMARK_ANGLES_DEG]

    def build(count_per_class, split):
        samples = []
        for label, theta in enumerate(angles):
            for _ in range(count_per_class):
                samples.append(
                    LabeledSample(
                        image=textured_sample(size, theta, rng), label=label
                    )
                )
        names = [f"deg{int(a):03d}" for a in BENCHMARK_ANGLES_DEG]
        return Dataset(
            samples=samples,
            num_classes=len(angles),
            split=split,
            class_names=names,
        )

    return build(train_per_class, "train"), build(test_per_class, "test")


def make_toy_overfit(
    seed: int, per_class: int = 10, size: int = 12
) -> Dataset:
    """A 3-class, 30-sample grating set small enough to overfit quickly."""
    rng = np.random.default_rng(seed)
    angles = [np.deg2rad(a) for a in (0.0, 60.0, 120.0)]
    samples = []
    for label, theta in enumerate(angles):
        for _ in range(per_class):
            img = textured_sample(
                size, theta, rng, components=((6.0, 0.4),),
                noise_sigma=0.02, period_jitter=None, chirp=None,
            )
            samples.append(LabeledSample(image=img, label=label))
    return Dataset(samples=samples, num_classes=3, split="train")
