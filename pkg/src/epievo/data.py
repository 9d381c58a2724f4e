"""Dataset readers (IDX, CIFAR-10 binary), synthetic tasks, subset sampling."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InputError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: np.ndarray  # count x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # count, int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise ParseError(f"{what}: truncated header", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ParseError(f"{what}: wrong magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{what}: truncated dimension sizes", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise ParseError(f"{what}: truncated data, need {expected} bytes, have {len(raw)}", len(raw))
    if len(raw) > expected:
        raise ParseError(f"{what}: {len(raw) - expected} trailing bytes", expected)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a 1-channel dataset."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", 4)
    if labels.size and labels.max() >= num_classes:
        raise ParseError(f"label {labels.max()} out of range for {num_classes} classes")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (count x H x W) and labels in IDX format; gzip if path ends in .gz."""

    def dump(path, magic, arr):
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(payload)

    dump(images_path, IDX_IMAGES_MAGIC, images)
    dump(labels_path, IDX_LABELS_MAGIC, labels)


def load_cifar10(paths, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if not raw:
            raise ParseError(f"{path}: empty file", 0)
        if len(raw) % CIFAR_RECORD:
            raise ParseError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}",
                len(raw) - len(raw) % CIFAR_RECORD,
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() >= 10:
            bad = int(np.argmax(rec[:, 0] >= 10))
            raise ParseError(f"{path}: label {rec[bad, 0]} out of range", bad * CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(xs).astype(np.float64) / 255.0
    return Dataset(x, np.concatenate(ys), 10, split)


# ---------------------------------------------------------------------------
# synthetic tasks

SYNTHETIC_TASKS = ("two-blobs", "bars", "xor-patches")


def _two_blobs(rng, n):
    labels = rng.integers(0, 2, size=n)
    # complementary checkerboards: every pixel separates the classes
    centres = np.full((2, 16), 0.2)
    centres[0, ::2] = 0.8
    centres[1, 1::2] = 0.8
    x = centres[labels] + rng.normal(0.0, 0.1, size=(n, 16))
    return np.clip(x, 0.0, 1.0).reshape(n, 1, 4, 4), labels


def _bars(rng, n):
    labels = np.tile([0, 1], n // 2 + 1)[:n]
    rng.shuffle(labels)
    x = rng.uniform(0.0, 0.25, size=(n, 1, 9, 9))
    pos = rng.integers(1, 8, size=n)
    for i in range(n):
        if labels[i] == 0:
            x[i, 0, pos[i], :] = 1.0  # horizontal stripe
        else:
            x[i, 0, :, pos[i]] = 1.0  # vertical stripe
    return x, labels


def _xor_patches(rng, n):
    a = rng.integers(0, 2, size=n)
    b = rng.integers(0, 2, size=n)
    x = rng.uniform(0.0, 0.2, size=(n, 1, 6, 6))
    x[a == 1, 0, :3, :3] += 0.8
    x[b == 1, 0, 3:, 3:] += 0.8
    return np.clip(x, 0.0, 1.0), (a ^ b).astype(np.int64)


def synthetic_task(name: str, rng: np.random.Generator, n_train: int = 512, n_test: int = 256):
    """Small built-in classification tasks for fast runs and tests."""
    makers = {"two-blobs": _two_blobs, "bars": _bars, "xor-patches": _xor_patches}
    if name not in makers:
        raise InputError(f"unknown synthetic task {name!r}; choose from {', '.join(SYNTHETIC_TASKS)}")
    xtr, ytr = makers[name](rng, n_train)
    xte, yte = makers[name](rng, n_test)
    return (
        Dataset(xtr, ytr.astype(np.int64), 2, "train"),
        Dataset(xte, yte.astype(np.int64), 2, "test"),
    )


# ---------------------------------------------------------------------------
# subsets and batches


def subset_size(count: int, fraction: float) -> int:
    return max(1, int(round(fraction * count)))


def sample_subset(count: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Shuffled indices of a uniform random subset drawn without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"subset fraction must lie in (0, 1], got {fraction}")
    return rng.permutation(count)[: subset_size(count, fraction)]


def batches(indices: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise InputError("batch size must be positive")
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


@dataclass
class SubsetSampler:
    """Per-network source of training subsets."""

    fraction: float
    rng: np.random.Generator

    def draw(self, ds: Dataset) -> np.ndarray:
        return sample_subset(len(ds), self.fraction, self.rng)


# ---------------------------------------------------------------------------
# named tasks

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{data_dir / name}[.gz] not found")


def load_task(task: str, data_dir=None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Resolve a task name to (train, test) datasets.

    ``mnist`` / ``fashion-mnist`` read the standard IDX file names from
    ``data_dir``; ``cifar10`` reads ``data_batch_{1..5}.bin`` and
    ``test_batch.bin``; ``synthetic:<name>`` builds a synthetic task from ``seed``.
    """
    if task.startswith("synthetic:"):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
        return synthetic_task(task.split(":", 1)[1], rng)
    if data_dir is None:
        raise FileNotFoundError(f"task {task!r} needs a data directory")
    data_dir = Path(data_dir)
    if task in ("mnist", "fashion-mnist"):
        out = []
        for split, (img, lab) in IDX_FILES.items():
            out.append(load_idx(_find(data_dir, img), _find(data_dir, lab), 10, split))
        return out[0], out[1]
    if task == "cifar10":
        train = load_cifar10([_find(data_dir, f"data_batch_{i}.bin") for i in range(1, 6)], "train")
        test = load_cifar10([_find(data_dir, "test_batch.bin")], "test")
        return train, test
    raise InputError(f"unknown task {task!r}")
