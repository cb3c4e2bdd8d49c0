"""Dataset ingestion: CIFAR binary files, one-hot targets, synthetic fixtures.

The CIFAR binary distributions are the canonical input. Each CIFAR-10
record is 3073 bytes (1 label byte, then 1024 red + 1024 green + 1024 blue
bytes, each plane row-major 32x32); CIFAR-100 records are 3074 bytes with a
coarse label byte first and the fine label byte second. Pixels are
transposed to NHWC and normalized to [0, 1] by dividing by 255; nothing
else is done to them.

Splits are positional: the first 40,000 training images train, the last
10,000 validate, and the test file is the test split.
"""

from __future__ import annotations

import hashlib
import os
import tarfile
import urllib.request
from dataclasses import dataclass, field

import numpy as np

IMAGE_SHAPE = (32, 32, 3)
PIXELS_PER_IMAGE = 32 * 32 * 3  # 3072
CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
TRAIN_COUNT = 50_000
VAL_COUNT = 10_000

CIFAR10_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
CIFAR100_FILES = ["train.bin", "test.bin"]

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR100_URL = "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz"
CIFAR10_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"
CIFAR100_MD5 = "03b5dce01913d631647c71ecec9e9cb8"

DATA_DIR_ENV = "PILUNET_DATA_DIR"


class DataFormatError(ValueError):
    """Raised when a dataset file does not match the expected binary layout."""


@dataclass
class Dataset:
    """Images, integer labels, and positional split indices."""

    name: str
    images: np.ndarray  # (N, 32, 32, 3) in [0, 1]
    labels: np.ndarray  # (N,) integer class ids
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    num_classes: int = 10

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]

    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


def one_hot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    """(N,) integer labels -> (N, k) one-hot rows."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels out of range for {k} classes")
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _pixels_to_nhwc(raw: np.ndarray, dtype) -> np.ndarray:
    # raw: (n, 3072) uint8 in planar RGB order -> (n, 32, 32, 3) in [0, 1]
    n = raw.shape[0]
    planes = raw.reshape(n, 3, 32, 32)
    return planes.transpose(0, 2, 3, 1).astype(dtype) / 255.0


def _read_records(path: str, record_len: int) -> np.ndarray:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing dataset file: {path}")
    size = os.path.getsize(path)
    if size == 0 or size % record_len != 0:
        raise DataFormatError(
            f"{path}: size {size} is not a positive multiple of the "
            f"{record_len}-byte record length"
        )
    data = np.fromfile(path, dtype=np.uint8)
    return data.reshape(-1, record_len)


def _resolve_dir(directory: str, candidates: list[str]) -> str:
    """Accept either the file directory itself or a parent containing the
    standard extracted folder name."""
    for sub in ("", "cifar-10-batches-bin", "cifar-100-binary"):
        d = os.path.join(directory, sub) if sub else directory
        if all(os.path.isfile(os.path.join(d, f)) for f in candidates):
            return d
    return directory


def _positional_splits(n_train: int, n_test: int) -> dict[str, np.ndarray]:
    if n_train <= VAL_COUNT:
        raise DataFormatError(f"need more than {VAL_COUNT} training images, got {n_train}")
    return {
        "train": np.arange(0, n_train - VAL_COUNT),
        "val": np.arange(n_train - VAL_COUNT, n_train),
        "test": np.arange(n_train, n_train + n_test),
    }


def load_cifar10(directory: str, dtype=np.float32) -> Dataset:
    """Load the CIFAR-10 binary distribution from a directory."""
    d = _resolve_dir(directory, CIFAR10_FILES)
    train_parts, test_recs = [], None
    for fname in CIFAR10_FILES:
        recs = _read_records(os.path.join(d, fname), CIFAR10_RECORD)
        if fname.startswith("test"):
            test_recs = recs
        else:
            train_parts.append(recs)
    records = np.concatenate(train_parts + [test_recs])
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"CIFAR-10 label byte {labels.max()} out of range 0-9")
    images = _pixels_to_nhwc(records[:, 1:], dtype)
    n_train = sum(p.shape[0] for p in train_parts)
    return Dataset(
        name="cifar10",
        images=images,
        labels=labels,
        splits=_positional_splits(n_train, test_recs.shape[0]),
        num_classes=10,
    )


def load_cifar100(directory: str, dtype=np.float32) -> Dataset:
    """Load the CIFAR-100 binary distribution; fine labels are the targets."""
    d = _resolve_dir(directory, CIFAR100_FILES)
    train_recs = _read_records(os.path.join(d, "train.bin"), CIFAR100_RECORD)
    test_recs = _read_records(os.path.join(d, "test.bin"), CIFAR100_RECORD)
    records = np.concatenate([train_recs, test_recs])
    fine = records[:, 1].astype(np.int64)  # byte 0 is the coarse label
    if fine.max() > 99:
        raise DataFormatError(f"CIFAR-100 fine label byte {fine.max()} out of range 0-99")
    images = _pixels_to_nhwc(records[:, 2:], dtype)
    return Dataset(
        name="cifar100",
        images=images,
        labels=fine,
        splits=_positional_splits(train_recs.shape[0], test_recs.shape[0]),
        num_classes=100,
    )


def load_dataset(name: str, directory: str | None = None, dtype=np.float32, **synthetic_kwargs) -> Dataset:
    """Dispatch on dataset name; directory falls back to $PILUNET_DATA_DIR."""
    if name == "synthetic":
        return make_synthetic(**synthetic_kwargs)
    directory = directory or os.environ.get(DATA_DIR_ENV)
    if not directory:
        raise FileNotFoundError(
            f"no data directory given for {name}; pass --data-dir or set {DATA_DIR_ENV}"
        )
    if name == "cifar10":
        return load_cifar10(directory, dtype=dtype)
    if name == "cifar100":
        return load_cifar100(directory, dtype=dtype)
    raise ValueError(f"unknown dataset {name!r}")


def make_synthetic(n: int = 512, k: int = 10, seed: int = 0, noise: float = 0.12, dtype=np.float32) -> Dataset:
    """Gaussian class-prototype images, balanced by round-robin labels.

    Easy enough that the CIFAR architecture clears chance accuracy within a
    few epochs; used as the fast test fixture. Deterministic per seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    prototypes = rng.uniform(0.15, 0.85, size=(k, *IMAGE_SHAPE))
    labels = (np.arange(n) % k).astype(np.int64)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(n, *IMAGE_SHAPE))
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    n_val = max(n // 10, 1)
    n_test = max(n // 10, 1)
    n_train = n - n_val - n_test
    splits = {
        "train": np.arange(0, n_train),
        "val": np.arange(n_train, n_train + n_val),
        "test": np.arange(n_train + n_val, n),
    }
    return Dataset(name="synthetic", images=images, labels=labels, splits=splits, num_classes=k)


def subset(dataset: Dataset, train_n: int, seed: int = 0) -> Dataset:
    """Stratified seeded subsample of the training split; val/test untouched."""
    train_idx = dataset.splits["train"]
    if train_n > len(train_idx):
        raise ValueError(f"train_n {train_n} exceeds training split size {len(train_idx)}")
    if train_n == len(train_idx):
        return dataset
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(13,)))
    labels = dataset.labels[train_idx]
    per_class = train_n // dataset.num_classes
    remainder = train_n - per_class * dataset.num_classes
    chosen = []
    for c in range(dataset.num_classes):
        pool = train_idx[labels == c]
        want = per_class + (1 if c < remainder else 0)
        if want > len(pool):
            raise ValueError(f"class {c} has only {len(pool)} training images, need {want}")
        chosen.append(rng.choice(pool, size=want, replace=False))
    new_train = np.sort(np.concatenate(chosen))
    splits = dict(dataset.splits)
    splits["train"] = new_train
    return Dataset(
        name=dataset.name,
        images=dataset.images,
        labels=dataset.labels,
        splits=splits,
        num_classes=dataset.num_classes,
    )


def fetch(name: str, directory: str) -> str:
    """Download and extract a CIFAR binary archive, verifying its checksum.

    Convenience for machines with network access; offline users place the
    extracted files in ``directory`` themselves.
    """
    url, md5 = {
        "cifar10": (CIFAR10_URL, CIFAR10_MD5),
        "cifar100": (CIFAR100_URL, CIFAR100_MD5),
    }[name]
    os.makedirs(directory, exist_ok=True)
    archive = os.path.join(directory, os.path.basename(url))
    if not os.path.isfile(archive):
        urllib.request.urlretrieve(url, archive)
    digest = hashlib.md5()
    with open(archive, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    if digest.hexdigest() != md5:
        raise DataFormatError(f"{archive}: checksum mismatch, expected {md5}")
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(directory)
    return directory
