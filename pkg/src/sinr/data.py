"""Datasets and file plumbing: CIFAR-10 binary batches, IDX, synthetic blobs, CSV, run configs."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DatasetError, InvalidLabelError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10_000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidLabelError(f"{self.name}: labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.name)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DatasetError(f"missing CIFAR-10 batch {path} (expected {CIFAR_PER_FILE * CIFAR_RECORD} bytes)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DatasetError(f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records "
                           f"(expected {CIFAR_PER_FILE * CIFAR_RECORD} bytes)")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise InvalidLabelError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def read_cifar_batch(path: str | os.PathLike) -> Dataset:
    images, labels = _read_cifar_file(Path(path))
    return Dataset(images, labels, 10, Path(path).name)


def write_cifar_batch(path: str | os.PathLike, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``pixels`` (N, 3, 32, 32) and labels in the binary batch format."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    rec.tofile(path)


def load_cifar10(directory: str | os.PathLike, strict: bool = True) -> tuple[Dataset, Dataset]:
    """Train (five batches) and test split from the CIFAR-10 binary distribution.

    With ``strict`` every file must hold exactly 10 000 records.
    """
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    parts = []
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        images, labels = _read_cifar_file(d / name)
        if strict and len(labels) != CIFAR_PER_FILE:
            raise DatasetError(f"{d / name}: {len(labels) * CIFAR_RECORD} bytes, "
                               f"expected {CIFAR_PER_FILE * CIFAR_RECORD}")
        parts.append((images, labels))
    train = Dataset(np.concatenate([p[0] for p in parts[:5]]), np.concatenate([p[1] for p in parts[:5]]),
                    10, "cifar10-train")
    test = Dataset(parts[5][0], parts[5][1], 10, "cifar10-test")
    return train, test


def _read_idx(path: Path, magic: int) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing IDX file {path}")
    buf = path.read_bytes()
    if len(buf) < 4:
        raise DatasetError(f"{path}: too short for an IDX header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise DatasetError(f"{path}: IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    body = np.frombuffer(buf, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: {body.size} data bytes, header dims {dims} need {int(np.prod(dims))}")
    return body.reshape(dims)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike,
             n_classes: int | None = None) -> Dataset:
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise DatasetError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images[:, None, :, :].astype(np.float64) / 255.0, labels, n_classes, Path(images_path).name)


def write_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike,
              pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 grayscale ``pixels`` (N, H, W) and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *pixels.shape) + pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass
class SyntheticSpec:
    """Gaussian-blob images.

    Every class gets a prototype made of a few random Gaussian bumps per
    channel.  A sample is ``0.5 + separation * (prototype - 0.5)`` shifted by
    up to ``jitter`` pixels, plus i.i.d. noise of scale ``noise``, clipped
    to [0, 1].
    """

    n_classes: int = 10
    samples_per_class: int = 200
    channels: int = 3
    size: int = 16
    seed: int = 0
    separation: float = 1.0
    noise: float = 0.1
    jitter: int = 1
    bumps: int = 3


def _prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(float)
    protos = np.zeros((spec.n_classes, spec.channels, spec.size, spec.size))
    for k in range(spec.n_classes):
        for c in range(spec.channels):
            for _ in range(spec.bumps):
                cy, cx = rng.uniform(0, spec.size, size=2)
                width = rng.uniform(0.1, 0.3) * spec.size
                sign = rng.choice([-1.0, 1.0])
                protos[k, c] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return 0.5 + 0.5 * np.clip(protos, -1, 1)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.n_classes < 1 or spec.samples_per_class < 1 or spec.size < 1 or spec.channels < 1:
        raise ConfigError("synthetic dataset sizes must be positive")
    rng = np.random.default_rng(spec.seed)
    protos = _prototypes(spec, rng)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    rng.shuffle(labels)
    base = 0.5 + spec.separation * (protos[labels] - 0.5)
    if spec.jitter:
        shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=(len(labels), 2))
        for i, (dy, dx) in enumerate(shifts):
            base[i] = np.roll(base[i], (dy, dx), axis=(1, 2))
    images = np.clip(base + spec.noise * rng.standard_normal(base.shape), 0.0, 1.0)
    return Dataset(images, labels, spec.n_classes, f"synthetic-{spec.seed}")


# --- CSV and config files ---------------------------------------------------------

def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: CSV header row required")
        return list(reader)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_config(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def env_overrides(prefix: str = "SINR_", environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """``SINR_MAX_EPOCHS=3`` becomes ``{"max_epochs": "3"}``."""
    environ = os.environ if environ is None else environ
    return {k[len(prefix):].lower(): v for k, v in environ.items() if k.startswith(prefix)}
