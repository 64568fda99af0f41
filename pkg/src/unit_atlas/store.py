"""On-disk formats for models and datasets.

Model directory::

    manifest.json   format version, input shape, layers, tensor table
    weights.bin     float32 little-endian tensors concatenated in table order
    checksum.txt    hex SHA-256 of weights.bin

Dataset directory::

    index.json      shape, class names, per-class counts
    images.bin      uint8 [n, ch, y, x] row-major
    labels.bin      uint16 little-endian
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import LayerSpec, ModelGraph
from .errors import (
    ChecksumError,
    SizeMismatchError,
    TruncationError,
    ValidationError,
    VersionError,
)

MODEL_FORMAT = 1
DATASET_FORMAT = 1


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def model_manifest(model: ModelGraph) -> dict:
    tensors = []
    offset = 0
    for name in model.tensor_names():
        dims = list(model.weights[name].shape)
        tensors.append({"name": name, "dims": dims, "offset": offset})
        offset += 4 * int(np.prod(dims, dtype=np.int64))
    return {
        "format_version": MODEL_FORMAT,
        "input_shape": list(model.input_shape),
        "layers": [l.to_dict() for l in model.layers],
        "tensors": tensors,
        "weights_bytes": offset,
    }


def save_model(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = model.weights_blob()
    (path / "weights.bin").write_bytes(blob)
    (path / "checksum.txt").write_text(hashlib.sha256(blob).hexdigest() + "\n")
    _write_json(path / "manifest.json", model_manifest(model))
    return path


def _check_tensor_table(manifest):
    expected = 0
    for t in manifest["tensors"]:
        if t["offset"] != expected:
            raise SizeMismatchError(
                f"tensor {t['name']!r} at offset {t['offset']}, expected {expected}"
            )
        expected += 4 * int(np.prod(t["dims"], dtype=np.int64))
    if expected != manifest["weights_bytes"]:
        raise SizeMismatchError(
            f"tensor table covers {expected} bytes, manifest declares {manifest['weights_bytes']}"
        )
    return expected


def load_model(path) -> ModelGraph:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    version = manifest.get("format_version")
    if version != MODEL_FORMAT:
        raise VersionError(f"model format {version!r} is not supported (expected {MODEL_FORMAT})")
    total = _check_tensor_table(manifest)
    blob = (path / "weights.bin").read_bytes()
    if len(blob) < total:
        raise TruncationError(f"weights.bin has {len(blob)} bytes, expected {total}")
    if len(blob) > total:
        raise SizeMismatchError(f"weights.bin has {len(blob)} bytes, tensor table covers {total}")
    want = (path / "checksum.txt").read_text().strip()
    got = hashlib.sha256(blob).hexdigest()
    if want != got:
        raise ChecksumError(f"weights.bin checksum {got} does not match recorded {want}")
    weights = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["dims"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=t["offset"])
        weights[t["name"]] = arr.reshape(t["dims"]).astype(np.float32)
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    return ModelGraph(manifest["input_shape"], layers, weights)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # uint8 [n, ch, y, x]
    labels: np.ndarray          # int64 [n]
    class_names: tuple

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.uint8)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValidationError(f"images must be [n, ch, y, x] with n >= 1, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValidationError("one label per image required")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def __len__(self):
        return self.images.shape[0]

    def as_float(self, rows=None) -> np.ndarray:
        """Pixels scaled to [0, 1] as float32, the engine's input convention."""
        imgs = self.images if rows is None else self.images[rows]
        return imgs.astype(np.float32) / np.float32(255.0)

    def class_index(self, key) -> int:
        """Resolve a class name or integer-like string to an index."""
        if isinstance(key, (int, np.integer)):
            idx = int(key)
        elif key in self.class_names:
            return self.class_names.index(key)
        else:
            try:
                idx = int(key)
            except (TypeError, ValueError):
                raise ValidationError(f"unknown class {key!r}") from None
        if not 0 <= idx < self.n_classes:
            raise ValidationError(f"class index {idx} out of range")
        return idx

    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        h.update(json.dumps(list(self.class_names)).encode())
        return h.hexdigest()


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if ds.n_classes > 65536:
        raise ValidationError("labels are stored as uint16")
    (path / "images.bin").write_bytes(ds.images.tobytes())
    (path / "labels.bin").write_bytes(ds.labels.astype("<u2").tobytes())
    _write_json(path / "index.json", {
        "format_version": DATASET_FORMAT,
        "n_images": len(ds),
        "shape": list(ds.image_shape),
        "class_names": list(ds.class_names),
        "counts": ds.counts(),
    })
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    if index.get("format_version") != DATASET_FORMAT:
        raise VersionError(f"dataset format {index.get('format_version')!r} is not supported")
    n = int(index["n_images"])
    shape = [int(d) for d in index["shape"]]
    img_bytes = (path / "images.bin").read_bytes()
    lab_bytes = (path / "labels.bin").read_bytes()
    want = n * int(np.prod(shape))
    if len(img_bytes) < want or len(lab_bytes) < 2 * n:
        raise TruncationError(f"dataset at {os.fspath(path)} is truncated")
    if len(img_bytes) > want or len(lab_bytes) > 2 * n:
        raise SizeMismatchError(f"dataset at {os.fspath(path)} is larger than its index declares")
    images = np.frombuffer(img_bytes, dtype=np.uint8).reshape([n] + shape).copy()
    labels = np.frombuffer(lab_bytes, dtype="<u2").astype(np.int64)
    ds = Dataset(images, labels, index["class_names"])
    if ds.counts() != index["counts"]:
        raise SizeMismatchError("per-class counts in index.json do not match labels.bin")
    return ds
