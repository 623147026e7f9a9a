"""Dataset ingestion (IDX, CIFAR-10 binary, synthetic generators),
augmentation, and deterministic batch pipelines.

Image tensors are NCHW float in [0, 1] before normalization. Synthetic
datasets render 2-D points as soft location bumps on a small grid and also
keep the raw points around so closed-form probes can run on them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DataFormatError

__all__ = [
    "Dataset", "DatasetSpec", "load_idx", "write_idx", "load_cifar10_binary",
    "synth_generate", "load_dataset", "Pipeline",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
IDX_NUM_CLASSES = 10  # IDX ingestion targets the MNIST label convention


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int
    points: np.ndarray | None = None  # (N, 2) source coordinates, synthetic only

    def __len__(self) -> int:
        return self.images.shape[0]

    def stats(self) -> dict:
        hist = np.bincount(self.labels, minlength=self.num_classes)
        return {
            "count": int(len(self)),
            "class_histogram": hist.tolist(),
            "pixel_min": float(self.images.min()) if len(self) else None,
            "pixel_max": float(self.images.max()) if len(self) else None,
        }


# ---------------------------------------------------------------------------
# IDX (MNIST-family) format

def _read_u32_be(f, path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"{path}: truncated header")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair.

    Big-endian headers: magic 0x00000803 + (count, rows, cols) for u8 images,
    magic 0x00000801 + (count,) for u8 labels. Pixels are scaled to [0, 1].
    Truncated or oversized files are rejected outright; no partial dataset is
    ever produced.
    """
    with open(images_path, "rb") as f:
        magic = _read_u32_be(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        count = _read_u32_be(f, images_path)
        rows = _read_u32_be(f, images_path)
        cols = _read_u32_be(f, images_path)
        payload = f.read()
    if len(payload) != count * rows * cols:
        raise DataFormatError(
            f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(payload)}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        magic = _read_u32_be(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        lcount = _read_u32_be(f, labels_path)
        lpayload = f.read()
    if len(lpayload) != lcount:
        raise DataFormatError(f"{labels_path}: expected {lcount} label bytes, found {len(lpayload)}")
    if lcount != count:
        raise DataFormatError(
            f"image/label count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= IDX_NUM_CLASSES:
        raise DataFormatError(
            f"{labels_path}: label {int(labels.max())} outside [0, {IDX_NUM_CLASSES})")

    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(images=x, labels=labels, num_classes=IDX_NUM_CLASSES)


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write a (N, H, W) uint8 image array and labels as an IDX pair, so any
    small dataset can stand in for MNIST through the same loader."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary format

def load_cifar10_binary(paths) -> Dataset:
    """Parse CIFAR-10 batch files: records of 1 label byte + 3072 pixel bytes
    in channel-major RGB order."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0:
            raise DataFormatError(f"{path}: empty file, no records")
        if len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: length {len(raw)} not divisible by record size {CIFAR_RECORD_BYTES}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES))
    records = np.concatenate(chunks, axis=0)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataFormatError(f"label {int(labels.max())} outside [0, 10)")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images=images, labels=labels, num_classes=10)


# ---------------------------------------------------------------------------
# synthetic generators

def synth_generate(kind: str, n: int, classes: int, seed: int,
                   image_size: int = 12) -> Dataset:
    """Deterministic synthetic image dataset from 2-D point patterns.

    ``blobs`` places truncated-noise clusters on a circle (linearly separable
    by construction); ``spirals`` interleaves spiral arms (not linearly
    separable). Points in [0, 1]^2 are rendered as Gaussian location bumps on
    an image_size x image_size grid. Class counts are balanced up to the
    remainder of n / classes.
    """
    if kind not in ("blobs", "spirals"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    gen = rng.stream(seed, "synth")
    labels = np.arange(n, dtype=np.int64) % classes
    if kind == "blobs":
        angles = 2.0 * np.pi * labels / classes
        centers = 0.5 + 0.33 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        noise = gen.normal(0.0, 0.03, size=(n, 2))
        # truncate offsets so clusters keep a hard margin (separable by construction)
        norms = np.linalg.norm(noise, axis=1, keepdims=True)
        noise *= np.minimum(1.0, 0.08 / np.maximum(norms, 1e-12))
        points = centers + noise
    else:
        t = gen.uniform(0.25, 1.0, size=n)
        theta = 2.0 * np.pi * labels / classes + t * 3.0 * np.pi
        r = 0.04 + 0.41 * t
        points = 0.5 + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        points += gen.normal(0.0, 0.008, size=(n, 2))
    points = np.clip(points, 0.0, 1.0)

    grid = (np.arange(image_size) + 0.5) / image_size
    gx, gy = np.meshgrid(grid, grid, indexing="ij")
    sigma = 0.12
    d2 = (gx[None] - points[:, 0, None, None]) ** 2 + (gy[None] - points[:, 1, None, None]) ** 2
    images = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)[:, None, :, :]
    return Dataset(images=images, labels=labels, num_classes=classes, points=points)


# ---------------------------------------------------------------------------
# dataset spec and pipeline

@dataclass(frozen=True)
class DatasetSpec:
    """Declarative source + normalization + augmentation policy."""

    source: dict
    normalization: dict | None = None      # {"mean": [...], "std": [...]} per channel
    augment: str = "none"                  # none | flip | crop_flip
    crop_padding: int = 4

    def validate(self) -> list[str]:
        errs = []
        kind = self.source.get("kind")
        if kind not in ("idx", "cifar10_binary", "synthetic"):
            errs.append(f"unknown dataset source kind {kind!r}")
        if self.augment not in ("none", "flip", "crop_flip"):
            errs.append(f"unknown augment {self.augment!r}")
        if self.crop_padding < 0:
            errs.append(f"crop_padding must be >= 0, got {self.crop_padding}")
        if kind == "synthetic":
            for key in ("shape", "n_train", "n_test", "classes"):
                if key not in self.source:
                    errs.append(f"synthetic source missing {key!r}")
        if kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in self.source:
                    errs.append(f"idx source missing {key!r}")
        if kind == "cifar10_binary":
            for key in ("train_paths", "test_paths"):
                if key not in self.source:
                    errs.append(f"cifar10_binary source missing {key!r}")
        return errs

    def to_dict(self) -> dict:
        return {"source": dict(self.source),
                "normalization": dict(self.normalization) if self.normalization else None,
                "augment": self.augment, "crop_padding": self.crop_padding}

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        return DatasetSpec(source=d["source"], normalization=d.get("normalization"),
                           augment=d.get("augment", "none"),
                           crop_padding=d.get("crop_padding", 4))


def load_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) datasets for a spec.

    Synthetic splits are carved from one generation pass, so they are
    disjoint by construction.
    """
    errs = spec.validate()
    if errs:
        from .errors import SpecValidationError
        raise SpecValidationError(errs)
    src = spec.source
    kind = src["kind"]
    if kind == "idx":
        return (load_idx(src["train_images"], src["train_labels"]),
                load_idx(src["test_images"], src["test_labels"]))
    if kind == "cifar10_binary":
        return (load_cifar10_binary(src["train_paths"]),
                load_cifar10_binary(src["test_paths"]))
    n_train, n_test = src["n_train"], src["n_test"]
    ds = synth_generate(src["shape"], n_train + n_test, src["classes"],
                        src.get("seed", seed), src.get("image_size", 12))
    perm = rng.stream(src.get("seed", seed), "synth", 1).permutation(n_train + n_test)
    tr, te = perm[:n_train], perm[n_train:]
    mk = lambda idx: Dataset(ds.images[idx], ds.labels[idx], ds.num_classes,
                             ds.points[idx] if ds.points is not None else None)
    return mk(tr), mk(te)


class Pipeline:
    """Deterministic batch streams over a train/test dataset pair.

    Training batches draw shuffle order and augmentation choices from the
    caller's named streams; evaluation batches apply normalization only and
    the audit record says so.
    """

    def __init__(self, train: Dataset, test: Dataset, spec: DatasetSpec):
        self.train = train
        self.test = test
        self.spec = spec
        norm = spec.normalization
        c = train.images.shape[1]
        if norm:
            self.mean = np.asarray(norm["mean"], dtype=np.float32).reshape(1, c, 1, 1)
            self.std = np.asarray(norm["std"], dtype=np.float32).reshape(1, c, 1, 1)
        else:
            self.mean = np.zeros((1, c, 1, 1), dtype=np.float32)
            self.std = np.ones((1, c, 1, 1), dtype=np.float32)

    def audit(self) -> dict:
        return {"train_augment": self.spec.augment, "eval_augment": "none",
                "normalization": self.spec.normalization is not None}

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def _augment(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        mode = self.spec.augment
        if mode == "none":
            return x
        if mode == "crop_flip":
            p = self.spec.crop_padding
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
            h, w = x.shape[2:]
            offs = gen.integers(0, 2 * p + 1, size=(x.shape[0], 2))
            x = np.stack([xp[i, :, oy:oy + h, ox:ox + w]
                          for i, (oy, ox) in enumerate(offs)])
        flips = gen.random(x.shape[0]) < 0.5
        x = x.copy()
        x[flips] = x[flips, :, :, ::-1]
        return x

    def train_batches(self, batch_size: int, shuffle_gen: np.random.Generator,
                      augment_gen: np.random.Generator, dtype=np.float32):
        order = shuffle_gen.permutation(len(self.train))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x = self._augment(self.train.images[idx], augment_gen)
            yield self._normalize(x).astype(dtype), self.train.labels[idx]

    def eval_batches(self, batch_size: int, split: str = "test", dtype=np.float32):
        ds = self.test if split == "test" else self.train
        if len(ds) == 0:
            raise ValueError(f"cannot evaluate on empty split {split!r}")
        for start in range(0, len(ds), batch_size):
            x = ds.images[start:start + batch_size]
            yield self._normalize(x).astype(dtype), ds.labels[start:start + batch_size]
