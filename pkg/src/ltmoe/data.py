"""Long-tailed dataset construction and class-division metadata.

Class ids are 0-based throughout. Training sets follow an exponential
count profile between the largest class and largest/IF; test sets are
balanced.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

# Division thresholds on per-class training counts.
MANY_THRESHOLD = 100   # many-shot: count > 100
FEW_THRESHOLD = 20     # few-shot:  count < 20

ARCHIVE_MAGIC = b"LTDS"
ARCHIVE_VERSION = 1


class DataError(ValueError):
    """Invalid dataset construction parameters or malformed archives."""


@dataclass(frozen=True)
class LongTailSpec:
    """Per-class training count profile, sorted non-increasing."""

    counts: np.ndarray  # int64, shape (C,)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise DataError("counts must be a non-empty 1-D vector")
        if np.any(counts < 1):
            raise DataError("every class needs at least one sample")
        if np.any(np.diff(counts) > 0):
            raise DataError("counts must be non-increasing")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)

    @property
    def imbalance_factor(self) -> float:
        return float(self.counts[0]) / float(self.counts[-1])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassDivision:
    """Partition of class ids into many/medium/few-shot groups."""

    many: frozenset
    medium: frozenset
    few: frozenset

    def sizes(self) -> dict:
        return {"many": len(self.many), "medium": len(self.medium), "few": len(self.few)}


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable array-backed dataset with its originating count spec."""

    inputs: np.ndarray   # float32, shape (N, ...) with fixed per-sample shape
    labels: np.ndarray   # int64, shape (N,)
    spec: LongTailSpec
    split_tag: str       # "train" or "test"

    def __post_init__(self):
        if self.split_tag not in ("train", "test"):
            raise DataError(f"unknown split_tag {self.split_tag!r}")
        if len(self.inputs) != len(self.labels):
            raise DataError("inputs and labels disagree in length")
        object.__setattr__(self, "inputs", np.ascontiguousarray(self.inputs, dtype=np.float32))
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64))
        self.inputs.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.spec.num_classes).astype(np.int64)


def make_longtail_counts(num_classes: int, n_max: int, imbalance: float) -> np.ndarray:
    """Exponential count profile: count_c = round(n_max * IF^(-c/(C-1))).

    The first class gets n_max samples and the last class n_max/IF,
    so the realized head/tail ratio matches ``imbalance`` up to rounding.
    """
    if imbalance < 1:
        raise DataError(f"imbalance factor must be >= 1, got {imbalance}")
    if n_max < imbalance:
        raise DataError(
            f"n_max={n_max} < imbalance={imbalance}: the smallest class would be empty"
        )
    if num_classes < 2:
        if num_classes == 1 and imbalance == 1:
            return np.array([n_max], dtype=np.int64)
        raise DataError("need at least 2 classes for an imbalanced profile")
    exponents = -np.arange(num_classes) / (num_classes - 1)
    raw = n_max * imbalance ** exponents
    counts = np.floor(raw + 0.5).astype(np.int64)  # round half up
    return np.maximum(counts, 1)


def split_divisions(spec: LongTailSpec) -> ClassDivision:
    """Group classes by training count: many (>100), few (<20), medium otherwise."""
    counts = spec.counts
    many = frozenset(np.flatnonzero(counts > MANY_THRESHOLD).tolist())
    few = frozenset(np.flatnonzero(counts < FEW_THRESHOLD).tolist())
    medium = frozenset(range(spec.num_classes)) - many - few
    return ClassDivision(many=many, medium=frozenset(medium), few=few)


def subsample_longtail(balanced: LabeledDataset, counts, seed: int) -> LabeledDataset:
    """Draw a long-tailed training subset from a balanced source dataset.

    Class c keeps ``counts[c]`` samples chosen without replacement;
    the draw is deterministic for a fixed seed.
    """
    counts = np.asarray(counts, dtype=np.int64)
    spec = LongTailSpec(counts)
    if spec.num_classes > int(balanced.labels.max()) + 1:
        raise DataError("source dataset has fewer classes than requested counts")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(spec.num_classes):
        idx = np.flatnonzero(balanced.labels == c)
        if idx.size < counts[c]:
            raise DataError(
                f"class {c} has only {idx.size} source samples, need {counts[c]}"
            )
        keep.append(rng.permutation(idx)[: counts[c]])
    keep = np.concatenate(keep)
    return LabeledDataset(
        inputs=balanced.inputs[keep],
        labels=balanced.labels[keep],
        spec=spec,
        split_tag="train",
    )


def synth_gaussian_lt(
    num_classes: int,
    dims: int,
    counts,
    class_separation: float,
    seed: int,
    test_per_class: int = 25,
    noise_scale: float = 1.0,
):
    """Synthetic Gaussian benchmark: one isotropic cluster per class.

    Class means are random directions of norm ``class_separation``; the
    train split follows ``counts`` and the test split is balanced with
    ``test_per_class`` samples per class. Fully deterministic per seed.
    """
    if dims < 1:
        raise DataError("dims must be >= 1")
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    if class_separation < 0:
        raise DataError("class_separation must be >= 0")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size != num_classes:
        raise DataError("counts length must equal num_classes")
    spec = LongTailSpec(counts)

    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dims))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = class_separation * directions / norms

    def draw(per_class, tag):
        xs, ys = [], []
        for c in range(num_classes):
            n = int(per_class[c])
            xs.append(means[c] + noise_scale * rng.standard_normal((n, dims)))
            ys.append(np.full(n, c, dtype=np.int64))
        return LabeledDataset(
            inputs=np.concatenate(xs).astype(np.float32),
            labels=np.concatenate(ys),
            spec=spec,
            split_tag=tag,
        )

    train = draw(counts, "train")
    test = draw(np.full(num_classes, test_per_class), "test")
    return train, test


def dataset_manifest(dataset: LabeledDataset, seed: int | None = None) -> dict:
    """JSON-ready manifest describing a dataset's class profile."""
    division = split_divisions(dataset.spec)
    return {
        "num_classes": dataset.spec.num_classes,
        "counts": dataset.spec.counts.tolist(),
        "imbalance_factor": dataset.spec.imbalance_factor,
        "seed": seed,
        "split_tag": dataset.split_tag,
        "num_samples": len(dataset),
        "division_sizes": division.sizes(),
        "input_shape": list(dataset.inputs.shape[1:]),
    }


# ---------------------------------------------------------------------------
# Binary archive: one file per split.
#
# Layout (little-endian):
#   offset 0   : 4-byte magic "LTDS"
#   offset 4   : uint32 version
#   offset 8   : uint32 record count N
#   offset 12  : uint32 values per input block D (flattened float32 count)
#   offset 16  : N records, each = uint16 label + D float32 feature values
#
# A JSON sidecar (same path + ".json") carries the manifest, including the
# original input shape and count spec.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIII")


def save_archive(dataset: LabeledDataset, path, seed: int | None = None) -> None:
    flat = dataset.inputs.reshape(len(dataset), -1)
    n, d = flat.shape
    record = np.zeros(n, dtype=[("label", "<u2"), ("x", "<f4", (d,))])
    record["label"] = dataset.labels.astype(np.uint16)
    record["x"] = flat
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, n, d))
        fh.write(record.tobytes())
    manifest = dataset_manifest(dataset, seed=seed)
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_archive(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        magic, version, n, d = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != ARCHIVE_MAGIC:
            raise DataError(f"{path}: not a dataset archive")
        if version != ARCHIVE_VERSION:
            raise DataError(f"{path}: unsupported archive version {version}")
        record = np.frombuffer(fh.read(), dtype=[("label", "<u2"), ("x", "<f4", (d,))])
    if record.size != n:
        raise DataError(f"{path}: truncated archive ({record.size} of {n} records)")
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    shape = tuple(manifest["input_shape"])
    return LabeledDataset(
        inputs=record["x"].reshape((n,) + shape),
        labels=record["label"].astype(np.int64),
        spec=LongTailSpec(np.asarray(manifest["counts"])),
        split_tag=manifest["split_tag"],
    )


def passthrough_augment(x):
    """Default augmentation hook: identity. Replace to plug in a policy."""
    return x
