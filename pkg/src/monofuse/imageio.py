"""Raster I/O: grayscale loading, normalization, matrix files, heatmaps.

A grayscale image is represented throughout the package as a 2D float64
numpy array (row-major, ``shape == (rows, cols)``).  This module owns the
conversions at the boundary: PGM/PNG ingestion, the ``MFM1`` matrix file
format used for intermediate spectra, heatmap rendering for figures, and
the labeled-dataset directory layout.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MFM_MAGIC = b"MFM1"

# viridis sampled every 32 steps (plus the endpoint); expanded to a fixed
# 256-entry table by linear interpolation so heatmap output is identical
# on every platform.
_COLORMAP_ANCHORS = (
    (68, 1, 84),
    (71, 45, 123),
    (59, 82, 139),
    (44, 114, 142),
    (33, 145, 140),
    (40, 174, 128),
    (94, 201, 98),
    (173, 220, 48),
    (253, 231, 37),
)


class MalformedImageError(ValueError):
    """Raised when an image file's header or payload cannot be parsed."""


class UnsupportedImageError(ValueError):
    """Raised for recognizable files in a depth/mode we do not accept."""


class MatrixFormatError(ValueError):
    """Raised when an MFM1 matrix file is corrupt or inconsistent."""


class ConstantImageError(ValueError):
    """Raised when z-score normalization is asked of a zero-variance image."""


def _require_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a 2D raster, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("raster contains non-finite values")
    return img


# ---------------------------------------------------------------------------
# Grayscale loading


def _pgm_tokens(data: bytes):
    """Yield whitespace-separated header tokens, skipping '#' comments."""
    i = 0
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < n and data[j : j + 1] not in b" \t\r\n":
                j += 1
            yield data[i:j], j
            i = j


def _parse_pgm(data: bytes, path: str) -> np.ndarray:
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
        fields = []
        for _ in range(3):
            tok, end = next(tokens)
            fields.append((tok, end))
    except StopIteration:
        raise MalformedImageError(f"{path}: truncated PGM header") from None

    try:
        cols, rows, maxval = (int(tok) for tok, _ in fields)
    except ValueError:
        raise MalformedImageError(f"{path}: non-numeric PGM header field") from None
    if cols < 1 or rows < 1:
        raise MalformedImageError(f"{path}: bad PGM dimensions {cols}x{rows}")
    if not 1 <= maxval <= 65535:
        raise MalformedImageError(f"{path}: PGM maxval {maxval} out of range")

    if magic == b"P2":
        values = []
        for tok, _ in tokens:
            try:
                values.append(int(tok))
            except ValueError:
                raise MalformedImageError(f"{path}: non-numeric P2 sample") from None
        if len(values) != rows * cols:
            raise MalformedImageError(
                f"{path}: expected {rows * cols} samples, found {len(values)}"
            )
        raw = np.array(values, dtype=np.float64)
    else:  # P5: raster starts one whitespace byte after the maxval token
        start = fields[2][1] + 1
        width = 1 if maxval < 256 else 2
        payload = data[start : start + rows * cols * width]
        if len(payload) < rows * cols * width:
            raise MalformedImageError(f"{path}: truncated P5 raster")
        dtype = np.uint8 if width == 1 else np.dtype(">u2")
        raw = np.frombuffer(payload, dtype=dtype).astype(np.float64)

    if np.any(raw > maxval):
        raise MalformedImageError(f"{path}: sample exceeds declared maxval {maxval}")
    return (raw / maxval).reshape(rows, cols)


def load_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Load a PGM (P2/P5) or 8-bit grayscale PNG as a float64 raster.

    Pixel values are scaled to [0, 1] by the format's declared maximum
    (the PGM maxval, 255 for 8-bit PNG).

    Raises
    ------
    FileNotFoundError
        The path does not exist.
    MalformedImageError
        Unrecognized magic or a corrupt header/payload.
    UnsupportedImageError
        A valid PNG that is not 8-bit single-channel grayscale.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()

    if data[:2] in (b"P2", b"P5"):
        return _parse_pgm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                mode = im.mode
                if mode != "L":
                    raise UnsupportedImageError(
                        f"{path}: PNG mode {mode!r}, need 8-bit grayscale ('L')"
                    )
                arr = np.asarray(im, dtype=np.float64)
        except UnsupportedImageError:
            raise
        except Exception as exc:
            raise MalformedImageError(f"{path}: undecodable PNG ({exc})") from exc
        return arr / 255.0
    raise MalformedImageError(f"{path}: not a PGM (P2/P5) or PNG file")


def save_pgm(img: np.ndarray, path: str | os.PathLike, maxval: int = 65535) -> None:
    """Write a [0, 1] raster as a binary (P5) PGM, quantized to ``maxval``."""
    img = _require_image(img)
    if not 1 <= maxval <= 65535:
        raise ValueError(f"maxval {maxval} out of range")
    quant = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        payload = quant.astype(np.uint8).tobytes()
    else:
        payload = quant.astype(">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


# ---------------------------------------------------------------------------
# Normalization


def normalize(img: np.ndarray) -> np.ndarray:
    """Z-score an image to mean 0 and population standard deviation 1.

    Raises :class:`ConstantImageError` for zero-variance input; callers
    that can tolerate flat images should skip normalization themselves.
    """
    img = _require_image(img)
    std = img.std()
    if std == 0.0:
        raise ConstantImageError("constant image has no z-score normalization")
    return (img - img.mean()) / std


# ---------------------------------------------------------------------------
# MFM1 matrix files


def save_matrix(m: np.ndarray, path: str | os.PathLike) -> None:
    """Write a float64 matrix as MFM1: magic, u32le rows/cols, f64le data."""
    m = _require_image(m)
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MFM_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_matrix(path: str | os.PathLike) -> np.ndarray:
    """Read an MFM1 matrix file written by :func:`save_matrix`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise MatrixFormatError(f"{path}: shorter than the MFM1 header")
    magic, rows, cols = struct.unpack_from("<4sII", data)
    if magic != MFM_MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if rows < 1 or cols < 1:
        raise MatrixFormatError(f"{path}: bad dimensions {rows}x{cols}")
    count = rows * cols
    if count > (len(data) - 12) // 8:
        raise MatrixFormatError(
            f"{path}: payload holds {(len(data) - 12) // 8} values, header claims {count}"
        )
    if len(data) != 12 + 8 * count:
        raise MatrixFormatError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=12)
    return values.reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# Heatmap rendering


def _colormap_table() -> np.ndarray:
    anchors = np.array(_COLORMAP_ANCHORS, dtype=np.float64)
    pos = np.linspace(0.0, 255.0, len(anchors))
    idx = np.arange(256, dtype=np.float64)
    table = np.stack(
        [np.interp(idx, pos, anchors[:, c]) for c in range(3)], axis=1
    )
    return np.rint(table).astype(np.uint8)


_TABLE = _colormap_table()


def render_heatmap(m: np.ndarray, path: str | os.PathLike) -> None:
    """Render a matrix as a PNG heatmap, one pixel per cell.

    The minimum value maps to the low end of the embedded 256-entry
    colormap and the maximum to the high end; constant input maps
    entirely to the low end.
    """
    m = _require_image(m)
    lo = m.min()
    hi = m.max()
    if hi > lo:
        t = (m - lo) / (hi - lo)
    else:
        t = np.zeros_like(m)
    idx = np.rint(t * 255).astype(np.intp)
    rgb = _TABLE[idx]
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Labeled datasets


@dataclass
class LabeledSample:
    """One grayscale image with its class index."""

    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """An ordered, uniformly-sized collection of labeled samples."""

    samples: list[LabeledSample]
    num_classes: int
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("dataset is empty")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        shape = self.samples[0].image.shape
        for i, s in enumerate(self.samples):
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"sample {i}: label {s.label} out of range")
            if s.image.shape != shape:
                raise ValueError(
                    f"sample {i}: shape {s.image.shape} != {shape}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.samples[0].image.shape

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.intp)

    def stacked(self) -> np.ndarray:
        """All images as one (n, rows, cols) array."""
        return np.stack([s.image for s in self.samples])


def load_dataset(root: str | os.PathLike, split: str = "train") -> Dataset:
    """Load ``<root>/<class_name>/<frame>.pgm|png`` into a Dataset.

    Class indices follow lexicographic class_name order; frames within a
    class are loaded in filename order.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root {root!r} is not a directory")
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise ValueError(f"dataset root {root!r} has no class directories")
    samples = []
    for label, name in enumerate(class_names):
        cdir = os.path.join(root, name)
        frames = sorted(
            f for f in os.listdir(cdir)
            if f.lower().endswith((".pgm", ".png"))
        )
        for frame in frames:
            img = load_grayscale(os.path.join(cdir, frame))
            samples.append(LabeledSample(image=img, label=label))
    return Dataset(
        samples=samples,
        num_classes=len(class_names),
        split=split,
        class_names=class_names,
    )
