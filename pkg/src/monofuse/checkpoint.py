"""Model checkpoints: a zip of MFM1 parameter matrices plus a manifest.

Layout inside the archive::

    manifest.json              layer list, shapes, hyperparameters, seed
    params/<idx>_<name>_weights.mfm
    params/<idx>_<name>_biases.mfm

Weights are flattened to 2D for the matrix format (conv kernels become
(out_channels, in*kh*kw)); the manifest records the true shapes.  Archive
entries are stored uncompressed with a fixed timestamp so identical
models produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zipfile

import numpy as np

from .cnn import (
    CnnModel, Conv, Dense, Flatten, Lrn, MaxPool, Relu, Softmax,
)
from .imageio import MFM_MAGIC

FORMAT_NAME = "monofuse-checkpoint-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


def _matrix_bytes(arr: np.ndarray) -> bytes:
    flat = np.asarray(arr, dtype=np.float64)
    if flat.ndim == 1:
        flat = flat[None, :]
    elif flat.ndim > 2:
        flat = flat.reshape(flat.shape[0], -1)
    rows, cols = flat.shape
    return struct.pack("<4sII", MFM_MAGIC, rows, cols) + np.ascontiguousarray(
        flat, dtype="<f8"
    ).tobytes()


def _matrix_from_bytes(data: bytes, path: str) -> np.ndarray:
    if len(data) < 12 or data[:4] != MFM_MAGIC:
        raise CheckpointError(f"{path}: not an MFM1 matrix")
    rows, cols = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 8 * rows * cols:
        raise CheckpointError(f"{path}: truncated matrix payload")
    return (
        np.frombuffer(data, dtype="<f8", count=rows * cols, offset=12)
        .reshape(rows, cols)
        .copy()
    )


def _layer_entry(layer) -> dict:
    if isinstance(layer, Conv):
        return {
            "type": "conv",
            "out_channels": layer.out_channels,
            "kernel": list(layer.kernel),
            "weights_shape": list(layer.weights.shape),
        }
    if isinstance(layer, Relu):
        return {"type": "relu"}
    if isinstance(layer, MaxPool):
        return {"type": "maxpool", "size": layer.size, "stride": layer.stride}
    if isinstance(layer, Lrn):
        return {
            "type": "lrn",
            "radius": layer.radius,
            "alpha": layer.alpha,
            "beta": layer.beta,
            "k": layer.k,
        }
    if isinstance(layer, Flatten):
        return {"type": "flatten"}
    if isinstance(layer, Dense):
        return {
            "type": "dense",
            "out_features": layer.out_features,
            "weights_shape": list(layer.weights.shape),
        }
    if isinstance(layer, Softmax):
        return {"type": "softmax"}
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def save_checkpoint(
    model: CnnModel,
    path: str | os.PathLike,
    hyperparameters: dict | None = None,
) -> None:
    """Persist a model (and an optional hyperparameter echo) to ``path``."""
    manifest = {
        "format": FORMAT_NAME,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "hyperparameters": hyperparameters or {},
        "layers": [_layer_entry(l) for l in model.layers],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:

        def write(name, data):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        write(
            "manifest.json",
            json.dumps(manifest, indent=2, sort_keys=True).encode("ascii"),
        )
        for idx, name, layer in model.param_layers():
            write(f"params/{idx:03d}_{name}_weights.mfm", _matrix_bytes(layer.weights))
            write(f"params/{idx:03d}_{name}_biases.mfm", _matrix_bytes(layer.biases))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple[CnnModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, manifest)."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing manifest.json") from None
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(
                f"{path}: unknown format {manifest.get('format')!r}"
            )

        layers = []
        param_counter = {"conv": 0, "dense": 0}
        for idx, entry in enumerate(manifest["layers"]):
            kind = entry["type"]
            if kind in ("conv", "dense"):
                param_counter[kind] += 1
                tag = f"{kind}{param_counter[kind]}"
                wdata = zf.read(f"params/{idx:03d}_{tag}_weights.mfm")
                bdata = zf.read(f"params/{idx:03d}_{tag}_biases.mfm")
                weights = _matrix_from_bytes(wdata, f"{path}:{tag} weights")
                biases = _matrix_from_bytes(bdata, f"{path}:{tag} biases")[0]
                shape = tuple(entry["weights_shape"])
                weights = weights.reshape(shape)
                if kind == "conv":
                    layers.append(
                        Conv(
                            out_channels=entry["out_channels"],
                            kernel=tuple(entry["kernel"]),
                            weights=weights,
                            biases=biases,
                        )
                    )
                else:
                    layers.append(
                        Dense(
                            out_features=entry["out_features"],
                            weights=weights,
                            biases=biases,
                        )
                    )
            elif kind == "relu":
                layers.append(Relu())
            elif kind == "maxpool":
                layers.append(MaxPool(size=entry["size"], stride=entry["stride"]))
            elif kind == "lrn":
                layers.append(
                    Lrn(
                        radius=entry["radius"],
                        alpha=entry["alpha"],
                        beta=entry["beta"],
                        k=entry["k"],
                    )
                )
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "softmax":
                layers.append(Softmax())
            else:
                raise CheckpointError(f"{path}: unknown layer type {kind!r}")

    model = CnnModel(
        layers=layers,
        input_shape=tuple(manifest["input_shape"]),
        num_classes=manifest["num_classes"],
        seed=manifest.get("seed", 0),
    )
    return model, manifest
