"""Feature bags: synthetic generation, on-disk format, and stratified splits.

On disk, each bag is one binary file::

    b"FBAG" | u16 version (=1) | u16 dtype flag (0: f64, 1: f32) | u32 N | u32 D
    N*D little-endian floats, row-major

and a dataset is a CSV manifest with columns ``bag_id,path,label``; relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FBAG_MAGIC = b"FBAG"
FBAG_VERSION = 1
FBAG_HEADER = struct.Struct("<4sHHII")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}

# subtype counts of the seven-class breast dataset, used for --imbalance bracs
BRACS_PROPORTIONS = (40, 145, 70, 41, 48, 61, 132)


@dataclass
class FeatureBag:
    bag_id: str
    label: int
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.bag_id!r}: features must be N x D with N >= 1")

    @property
    def size(self) -> int:
        return self.features.shape[0]


# -- synthetic bags ----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_bags: int = 200
    classes: int = 2
    dim: int = 64
    n_min: int = 40
    n_max: int = 550
    rate: float = 0.05  # fraction of signal instances in a non-zero-class bag
    noise: float = 0.1
    seed: int = 0
    class_weights: tuple | None = None  # None: balanced

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("rate must be in (0, 1]")
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.classes < 2 or self.dim < self.classes:
            raise ValueError("need classes >= 2 and dim >= classes")
        if self.noise < 0 or self.num_bags < 0:
            raise ValueError("noise and num_bags must be non-negative")
        if self.class_weights is not None and len(self.class_weights) != self.classes:
            raise ValueError("class_weights needs one entry per class")


def signal_vectors(spec: SyntheticSpec) -> np.ndarray:
    """Orthonormal class signals, one row per class (row 0 is never planted)."""
    rng = np.random.default_rng([spec.seed, 0])
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.classes)))
    return q.T.copy()


def class_counts(num_bags: int, weights) -> list[int]:
    """Largest-remainder apportionment of ``num_bags`` by ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    exact = num_bags * w / w.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: num_bags - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def generate_synthetic(spec: SyntheticSpec) -> list[FeatureBag]:
    """Bags obeying the MIL assumption.

    Class 0 bags are pure noise. A class ``c`` bag plants ``signal_c`` into
    ``ceil(rate * N)`` of its instances; instance order is shuffled.
    """
    signals = signal_vectors(spec)
    rng = np.random.default_rng([spec.seed, 1])
    weights = spec.class_weights or [1] * spec.classes
    labels = np.repeat(np.arange(spec.classes), class_counts(spec.num_bags, weights))
    labels = rng.permutation(labels)
    bags = []
    for i, label in enumerate(labels):
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        feats = spec.noise * rng.standard_normal((n, spec.dim))
        if label > 0:
            k = math.ceil(spec.rate * n)
            feats[:k] += signals[label]
            feats = feats[rng.permutation(n)]
        bags.append(FeatureBag(f"bag_{i:05d}", int(label), feats))
    return bags


def oracle_predict(bags, signals, threshold: float = 0.5) -> np.ndarray:
    """Instance-max detector: strongest planted-signal projection wins,
    class 0 when no projection clears ``threshold``."""
    preds = []
    for bag in bags:
        best = (bag.features @ signals[1:].T).max(axis=0)
        c = int(np.argmax(best))
        preds.append(c + 1 if best[c] > threshold else 0)
    return np.array(preds)


def oracle_accuracy(bags, spec: SyntheticSpec) -> float:
    if not bags:
        return float("nan")
    preds = oracle_predict(bags, signal_vectors(spec))
    return float(np.mean(preds == np.array([b.label for b in bags])))


# -- FBAG files and manifests -------------------------------------------------------

class BagFormatError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class MissingBagFileError(BagFormatError, FileNotFoundError):
    pass


class MagicMismatchError(BagFormatError):
    pass


class SizeMismatchError(BagFormatError):
    pass


class LabelError(BagFormatError):
    pass


class DimensionMismatchError(BagFormatError):
    pass


def write_fbag(path, features, float32: bool = False) -> None:
    features = np.asarray(features)
    flag = 1 if float32 else 0
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(FBAG_HEADER.pack(FBAG_MAGIC, FBAG_VERSION, flag, n, d))
        fh.write(np.ascontiguousarray(features, dtype=_DTYPES[flag]).tobytes())


def read_fbag(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingBagFileError(path, "feature file not found")
    blob = path.read_bytes()
    if len(blob) < FBAG_HEADER.size:
        raise SizeMismatchError(path, f"file has {len(blob)} bytes, shorter than the header")
    magic, version, flag, n, d = FBAG_HEADER.unpack_from(blob)
    if magic != FBAG_MAGIC:
        raise MagicMismatchError(path, f"bad magic {magic!r}")
    if version != FBAG_VERSION or flag not in _DTYPES:
        raise BagFormatError(path, f"unsupported version {version} / dtype flag {flag}")
    dtype = _DTYPES[flag]
    expected = FBAG_HEADER.size + n * d * dtype.itemsize
    if len(blob) != expected:
        raise SizeMismatchError(path, f"expected {expected} bytes for N={n}, D={d}, got {len(blob)}")
    if n < 1:
        raise SizeMismatchError(path, "bag has no instances")
    return np.frombuffer(blob, dtype=dtype, offset=FBAG_HEADER.size).reshape(n, d).astype(np.float64)


def save_bags(bags, outdir, manifest_name: str = "manifest.csv") -> Path:
    """Write one FBAG file per bag plus a manifest; returns the manifest path."""
    outdir = Path(outdir)
    (outdir / "bags").mkdir(parents=True, exist_ok=True)
    manifest = outdir / manifest_name
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "path", "label"])
        for bag in bags:
            rel = f"bags/{bag.bag_id}.fbag"
            write_fbag(outdir / rel, bag.features)
            w.writerow([bag.bag_id, rel, bag.label])
    return manifest


def load_bags(manifest) -> list[FeatureBag]:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise MissingBagFileError(manifest, "manifest not found")
    root = manifest.parent
    bags = []
    dim = None
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"bag_id", "path", "label"} - set(reader.fieldnames or ())
        if missing:
            raise BagFormatError(manifest, f"manifest lacks columns {sorted(missing)}")
        for row in reader:
            path = root / row["path"] if not os.path.isabs(row["path"]) else Path(row["path"])
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise LabelError(path, f"label {row['label']!r} is not an integer") from None
            feats = read_fbag(path)
            if dim is None:
                dim = feats.shape[1]
            elif feats.shape[1] != dim:
                raise DimensionMismatchError(path, f"feature dim {feats.shape[1]} != dataset dim {dim}")
            bags.append(FeatureBag(row["bag_id"], label, feats))
    if not bags:
        warnings.warn(f"{manifest}: manifest lists no bags", stacklevel=2)
    return bags


# -- splits ---------------------------------------------------------------------------

class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    fold: int
    train: tuple
    val: tuple
    test: tuple
    seed: int


def make_splits(bags, folds: int = 5, seed: int = 0, ratio=(8, 1, 1)) -> list[SplitPlan]:
    """``folds`` independent stratified train/val/test splits.

    Fold ``k`` shuffles with seed ``seed + k``. Each class with ``n`` bags
    puts ``max(1, round(n * r))`` into val and test, the rest into train.
    """
    if len(bags) < 10:
        raise StratificationError(f"need at least 10 bags to split, got {len(bags)}")
    by_class: dict[int, list[str]] = {}
    for bag in bags:
        by_class.setdefault(bag.label, []).append(bag.bag_id)
    for label, ids in by_class.items():
        if len(ids) < 3:
            raise StratificationError(f"class {label} has {len(ids)} bags; need >= 3")
    total = float(sum(ratio))
    plans = []
    for k in range(folds):
        rng = np.random.default_rng(seed + k)
        train, val, test = [], [], []
        for label in sorted(by_class):
            ids = by_class[label]
            ids = [ids[i] for i in rng.permutation(len(ids))]
            n_val = max(1, round(len(ids) * ratio[1] / total))
            n_test = max(1, round(len(ids) * ratio[2] / total))
            test += ids[:n_test]
            val += ids[n_test:n_test + n_val]
            train += ids[n_test + n_val:]
        plans.append(SplitPlan(k, tuple(train), tuple(val), tuple(test), seed + k))
    return plans


def select(bags, ids) -> list[FeatureBag]:
    index = {b.bag_id: b for b in bags}
    return [index[i] for i in ids]
