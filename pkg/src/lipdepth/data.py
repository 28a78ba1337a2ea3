"""CIFAR-10 binary batches and small synthetic datasets."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng

logger = logging.getLogger(__name__)

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
SPLIT_SIZES = {"train": 50_000, "test": 10_000}
DATA_DIR_ENV = "LIPDEPTH_DATA_DIR"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    meta: dict | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.split, self.meta)


def _decode(raw: bytes, source: str, dtype) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD_BYTES:
        raise DataError(f"{source}: size {len(raw)} is not a multiple of {RECORD_BYTES} (truncated file?)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{source}: corrupt record {bad[0]} has label byte {labels[bad[0]]}")
    images = (rec[:, 1:].reshape((-1,) + IMAGE_SHAPE).astype(dtype) / dtype(255.0))
    return images, labels


def read_cifar10_file(path, dtype=np.float32) -> Dataset:
    path = Path(path)
    images, labels = _decode(path.read_bytes(), str(path), np.dtype(dtype).type)
    return Dataset(images, labels, "test" if path.name.startswith("test") else "train")


def resolve_data_dir(path=None) -> Path:
    """``path`` or the environment fallback, descending into the standard archive folder."""
    if path is None:
        path = os.environ.get(DATA_DIR_ENV)
    if not path:
        raise DataError(f"no data directory given (pass --data-dir or set {DATA_DIR_ENV})")
    p = Path(path)
    if (p / "cifar-10-batches-bin").is_dir():
        p = p / "cifar-10-batches-bin"
    if not p.is_dir():
        raise DataError(f"data directory {p} does not exist")
    return p


def load_cifar10_binary(path, split: str = "train", strict: bool = True, dtype=np.float32) -> Dataset:
    """Load a CIFAR-10 split from the binary batch files in ``path``.

    With ``strict`` the record count must equal the official split size;
    otherwise a mismatch is only logged (used for synthetic stand-in data).
    """
    if split not in SPLIT_SIZES:
        raise DataError(f"unknown split {split!r}")
    p = Path(path)
    if p.is_file():
        ds = read_cifar10_file(p, dtype)
        return Dataset(ds.images, ds.labels, split)
    p = resolve_data_dir(p)
    names = TRAIN_FILES if split == "train" else TEST_FILES
    missing = [n for n in names if not (p / n).is_file()]
    if missing:
        raise DataError(f"{p}: missing {', '.join(missing)}")
    parts = [read_cifar10_file(p / n, dtype) for n in names]
    images = np.concatenate([d.images for d in parts])
    labels = np.concatenate([d.labels for d in parts])
    if labels.shape[0] != SPLIT_SIZES[split]:
        msg = f"{p}: {split} split has {labels.shape[0]} records, expected {SPLIT_SIZES[split]}"
        if strict:
            raise DataError(msg)
        logger.warning(msg)
    return Dataset(images, labels, split)


def write_cifar10_binary(path, dataset: Dataset) -> None:
    """Inverse of ``read_cifar10_file`` for images on the k/255 grid."""
    imgs = np.asarray(dataset.images, dtype=np.float64).reshape(len(dataset), -1)
    if imgs.shape[1] != RECORD_BYTES - 1:
        raise DataError(f"images must be {IMAGE_SHAPE}, got {dataset.images.shape[1:]}")
    if np.any(dataset.labels < 0) or np.any(dataset.labels > 9):
        raise DataError("labels must be in [0, 9]")
    rec = np.empty((len(dataset), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(rec.tobytes())


def subset(dataset: Dataset, n: int, rng: Rng) -> Dataset:
    """Seeded sample of ``n`` records without replacement."""
    if n > len(dataset):
        raise DataError(f"cannot take {n} of {len(dataset)} records")
    if n < 0:
        raise DataError("n must be >= 0")
    return dataset.take(np.sort(rng.choice(len(dataset), n, replace=False)))


def synthetic_gaussians(classes: int, n: int, dim: int, rng: Rng, margin: float = 1.0,
                        spread: float = 0.05) -> Dataset:
    """Points in [0, 1]^dim.

    Two classes are placed on either side of a random hyperplane through the
    cube centre, each point at distance >= ``margin`` / 2 from it, so the
    generating hyperplane separates them with margin ``margin``. More classes
    get isotropic blobs around random centres.
    """
    if classes < 2 or n < 1 or dim < 1:
        raise DataError("need classes >= 2, n >= 1, dim >= 1")
    labels = rng.integers(0, classes, n).astype(np.int64)
    if classes > 2:
        centres = rng.uniform((classes, dim), 0.25, 0.75)
        x = np.clip(centres[labels] + rng.gaussian((n, dim), std=spread), 0.0, 1.0)
        return Dataset(x, labels, "synthetic")
    w = rng.gaussian(dim)
    w /= np.linalg.norm(w)
    x = np.empty((n, dim))
    for i, lab in enumerate(labels):
        sign = 1.0 if lab == 1 else -1.0
        for _ in range(1000):
            noise = rng.gaussian(dim, std=spread)
            noise -= (noise @ w) * w
            cand = 0.5 + sign * (margin / 2 + abs(float(rng.gaussian(1, std=spread)[0]))) * w + noise
            if cand.min() >= 0.0 and cand.max() <= 1.0:
                x[i] = cand
                break
        else:
            raise DataError(f"margin {margin} does not fit inside the unit cube in {dim} dimensions")
    # class 1 iff w.x > w.(0.5, ..., 0.5)
    return Dataset(x, labels, "synthetic", {"normal": w, "offset": 0.5 * float(w.sum())})


def synthetic_cifar(n: int, rng: Rng, templates: np.ndarray | None = None, noise: float = 0.15) -> tuple[Dataset, np.ndarray]:
    """CIFAR-shaped images on the k/255 grid: a per-class 4x4 colour template
    upsampled to 32x32, plus pixel noise. Returns (dataset, templates)."""
    if templates is None:
        # a per-class colour cast plus a coarse spatial pattern
        templates = rng.uniform((10, 3, 1, 1), -1.0, 1.0) + 0.5 * rng.uniform((10, 3, 4, 4), -1.0, 1.0)
    labels = rng.integers(0, 10, n).astype(np.int64)
    base = np.repeat(np.repeat(templates[labels], 8, axis=2), 8, axis=3)
    imgs = np.clip(0.5 + 0.25 * base + rng.gaussian(base.shape, std=noise), 0.0, 1.0)
    imgs = (np.rint(imgs * 255.0) / 255.0).astype(np.float32)
    return Dataset(imgs, labels, "synthetic"), templates


def write_synthetic_cifar_dir(path, n_train: int, n_test: int, rng: Rng) -> Path:
    """Write a stand-in data directory in the CIFAR-10 binary layout (5 train batches + test)."""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    train, templates = synthetic_cifar(n_train, rng)
    test, _ = synthetic_cifar(n_test, rng, templates)
    for i, chunk in enumerate(np.array_split(np.arange(n_train), 5), start=1):
        write_cifar10_binary(p / f"data_batch_{i}.bin", train.take(chunk))
    write_cifar10_binary(p / "test_batch.bin", test)
    return p
