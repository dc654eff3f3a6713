"""Datasets: synthetic Gaussian blobs, IDX files, label noise and corruption."""

from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    split: str = "train"
    noise_mask: np.ndarray | None = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise InputError(f"inputs {inputs.shape} and labels {labels.shape} do not match")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        mask = np.zeros(labels.size, dtype=bool) if self.noise_mask is None else np.asarray(self.noise_mask, bool)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "noise_mask", mask)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).astype("<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels).astype("<i8").tobytes())
        return h.hexdigest()


def synth_blobs(seed: int, n: int, d: int, k: int, spread: float, split: str = "train") -> Dataset:
    """Balanced Gaussian clusters around ``k`` random centers in ``[0.2, 0.8]^d``.

    The centers depend on ``seed`` only; the samples also depend on ``split``
    so that train and test sets are disjoint draws around the same centers.
    Inputs are clipped to ``[0, 1]``.
    """
    if k < 2 or n < k or d < 1:
        raise InputError(f"need n >= k >= 2 and d >= 1, got n={n}, k={k}, d={d}")
    if spread < 0:
        raise InputError("spread must be non-negative")
    centers = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,))).uniform(0.2, 0.8, size=(k, d))
    split_key = int.from_bytes(hashlib.sha256(split.encode()).digest()[:4], "little")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, split_key)))
    labels = np.arange(n) % k
    rng.shuffle(labels)
    inputs = centers[labels] + spread * rng.standard_normal((n, d))
    return Dataset(np.clip(inputs, 0.0, 1.0), labels, k, name=f"blobs-{seed}", split=split)


def synth_split(seed: int, n_train: int, n_test: int, d: int, k: int, spread: float):
    return (
        synth_blobs(seed, n_train, d, k, spread, "train"),
        synth_blobs(seed, n_test, d, k, spread, "test"),
    )


def _open(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) < header + size:
        raise FormatError(f"{what}: truncated data at offset {len(raw)}, expected {header + size} bytes")
    if len(raw) > header + size:
        raise FormatError(f"{what}: trailing bytes after offset {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255 and flattened row-major."""
    images = _parse_idx(_open(images_path), IDX_IMAGES_MAGIC, f"images file {images_path}")
    labels = _parse_idx(_open(labels_path), IDX_LABELS_MAGIC, f"labels file {labels_path}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch at offset 4: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    k = int(num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 1))
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), max(k, 2), name=Path(images_path).name, split=split)


def _square_shape(d: int) -> tuple[int, int]:
    r = math.isqrt(d)
    return (r, r) if r * r == d else (1, d)


def write_idx(dataset: Dataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Write ``dataset`` as IDX; inputs are quantized to bytes with ``round(255 x)``."""
    rows, cols = shape or _square_shape(dataset.dim)
    if rows * cols != dataset.dim:
        raise InputError(f"shape {rows}x{cols} does not hold {dataset.dim} features")
    if dataset.num_classes > 256:
        raise InputError("IDX labels hold at most 256 classes")
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    n = len(dataset)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def _floor_fraction(c: float, n: int) -> int:
    # guards against c * n landing one ulp below an integer (e.g. 0.29 * 100)
    return int(math.floor(c * n + 1e-9))


def inject_label_noise(dataset: Dataset, c: float, seed: int) -> Dataset:
    """Replace the labels of ``floor(c N)`` random examples with uniform random labels.

    New labels are drawn over all classes, so some coincide with the originals.
    """
    if not 0.0 <= c <= 1.0:
        raise InputError(f"noise fraction must lie in [0, 1], got {c}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
    n = len(dataset)
    idx = rng.choice(n, size=_floor_fraction(c, n), replace=False)
    labels = dataset.labels.copy()
    labels[idx] = rng.integers(0, dataset.num_classes, size=idx.size)
    mask = dataset.noise_mask.copy()
    mask[idx] = True
    return replace(dataset, labels=labels, noise_mask=mask, name=f"{dataset.name}+noise{c:g}")


def corrupt_gaussian(dataset: Dataset, severity: float, seed: int) -> Dataset:
    """Add N(0, severity^2) noise to every input and clip back to ``[0, 1]``."""
    if severity < 0:
        raise InputError("severity must be non-negative")
    if severity == 0:
        return dataset
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(6,)))
    noisy = np.clip(dataset.inputs + severity * rng.standard_normal(dataset.inputs.shape), 0.0, 1.0)
    return replace(dataset, inputs=noisy, name=f"{dataset.name}+gauss{severity:g}")
