"""Illumination-robust grayscale recognition pipeline.

Decomposes images into intrinsic mode functions (bidimensional EMD),
derives monogenic amplitude/phase/orientation spectra through the Riesz
transform, fuses orientation maps of the high-frequency components, and
trains a small CNN on the resulting spectra, optionally with data-parallel
parameter averaging.
"""

__version__ = "0.1.0"
