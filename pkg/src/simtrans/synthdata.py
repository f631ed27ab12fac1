"""Synthetic fine-grained datasets with base/novel splits and web-style label noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .seeding import substream

SPLITS = ("base_train", "base_test", "novel_train", "novel_test")
NOISE_KINDS = ("none", "flip", "outlier")
OUTLIER_LABEL = -1


class DatasetFormatError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_base_categories: int = 15
    n_novel_categories: int = 5
    dim: int = 8
    base_train_per_category: int = 30
    novel_train_per_category: int = 100
    test_per_category: int = 200
    n_superclusters: int = 5
    intra_category_std: float = 0.9
    inter_category_std: float = 1.0
    supercluster_std: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_base_categories < 1 or self.n_novel_categories < 1:
            raise ConfigurationError("need at least one base and one novel category")
        if self.dim < 1 or self.n_superclusters < 1:
            raise ConfigurationError("dim and n_superclusters must be positive")
        for name in ("base_train_per_category", "novel_train_per_category", "test_per_category"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.intra_category_std < 0 or self.supercluster_std < 0:
            raise ConfigurationError("standard deviations must be non-negative")
        if not self.intra_category_std < self.inter_category_std:
            raise ConfigurationError("intra_category_std must be below inter_category_std")

    @property
    def n_categories(self) -> int:
        return self.n_base_categories + self.n_novel_categories

    @property
    def base_ids(self) -> list[int]:
        return list(range(self.n_base_categories))

    @property
    def novel_ids(self) -> list[int]:
        return list(range(self.n_base_categories, self.n_categories))


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float = 0.30
    flip_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigurationError("noise ratio must lie in [0, 1)")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ConfigurationError("flip_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Geometry:
    """Generator-side knowledge needed to draw fresh samples."""

    prototypes: np.ndarray  # (n_categories, dim), indexed by category id
    intra_std: float
    inter_std: float


@dataclass(frozen=True)
class TrainView:
    """What training code is allowed to see: features and (possibly noisy) labels."""

    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def categories(self) -> list[int]:
        return sorted(set(self.labels.tolist()))


@dataclass(frozen=True, eq=False)
class Dataset:
    dim: int
    features: np.ndarray  # (n, dim)
    labels: np.ndarray  # observed category id
    true_labels: np.ndarray  # ground truth; OUTLIER_LABEL for outliers
    splits: np.ndarray  # split names
    noise_kinds: np.ndarray
    geometry: Geometry | None = None

    def __post_init__(self):
        for arr in (self.features, self.labels, self.true_labels, self.splits, self.noise_kinds):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.noise_kinds, other.noise_kinds)
        )

    @property
    def is_noisy(self) -> np.ndarray:
        return (self.labels != self.true_labels) | (self.noise_kinds == "outlier")

    def mask(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise KeyError(split)
        return self.splits == split

    def view(self, split: str, categories=None) -> TrainView:
        m = self.mask(split)
        if categories is not None:
            m &= np.isin(self.labels, list(categories))
        return TrainView(self.features[m].copy(), self.labels[m].copy())

    def subset(self, keep: np.ndarray) -> "Dataset":
        return Dataset(
            self.dim,
            self.features[keep].copy(),
            self.labels[keep].copy(),
            self.true_labels[keep].copy(),
            self.splits[keep].copy(),
            self.noise_kinds[keep].copy(),
            self.geometry,
        )


def _assemble(dim, rows, geometry=None) -> Dataset:
    if rows:
        feats = np.vstack([r[0] for r in rows])
    else:
        feats = np.zeros((0, dim))
    return Dataset(
        dim=dim,
        features=feats.astype(np.float64),
        labels=np.array([r[1] for r in rows], dtype=np.int64),
        true_labels=np.array([r[2] for r in rows], dtype=np.int64),
        splits=np.array([r[3] for r in rows], dtype="<U11"),
        noise_kinds=np.array([r[4] for r in rows], dtype="<U7"),
        geometry=geometry,
    )


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Clean dataset: supercluster centers, category prototypes around them, images around those."""
    spec.validate()
    rng = substream(spec.seed, "data")
    D = spec.dim
    centers = rng.normal(0.0, spec.supercluster_std, size=(spec.n_superclusters, D))
    protos = np.empty((spec.n_categories, D))
    for c in range(spec.n_categories):
        protos[c] = centers[c % spec.n_superclusters] + rng.normal(0.0, spec.inter_category_std, size=D)

    counts = {
        "base_train": spec.base_train_per_category,
        "base_test": spec.test_per_category,
        "novel_train": spec.novel_train_per_category,
        "novel_test": spec.test_per_category,
    }
    rows = []
    for split in SPLITS:
        ids = spec.base_ids if split.startswith("base") else spec.novel_ids
        for c in ids:
            noise = rng.normal(0.0, spec.intra_category_std, size=(counts[split], D))
            for x in protos[c] + noise:
                rows.append((x, c, c, split, "none"))
    return _assemble(D, rows, Geometry(protos, spec.intra_category_std, spec.inter_category_std))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def _estimate_geometry(ds: Dataset) -> Geometry:
    clean = ds.noise_kinds == "none"
    n_cat = int(ds.true_labels.max()) + 1 if len(ds) else 0
    protos = np.zeros((n_cat, ds.dim))
    resid = []
    for c in range(n_cat):
        m = clean & (ds.true_labels == c)
        if m.any():
            protos[c] = ds.features[m].mean(axis=0)
            resid.append(ds.features[m] - protos[c])
    intra = float(np.concatenate(resid).std()) if resid else 0.0
    inter = float(protos.std(axis=0).mean()) if n_cat else 0.0
    return Geometry(protos, intra, inter)


def inject_web_noise(dataset: Dataset, noise: NoiseSpec) -> Dataset:
    """Corrupt ``round(ratio * N)`` novel_train records per category.

    Label-flip records keep label ``c`` but get a fresh feature drawn from the
    next novel category (circularly). Outliers get a feature drawn uniformly
    from the prototype bounding box inflated by three inter-category stds.
    """
    noise.validate()
    train = dataset.mask("novel_train")
    novel_ids = sorted(set(dataset.labels[train].tolist()))
    if noise.ratio == 0 or not novel_ids:
        return dataset
    if len(novel_ids) < 2 and noise.flip_fraction > 0:
        raise ConfigurationError("label-flip noise needs at least two novel categories")

    geo = dataset.geometry or _estimate_geometry(dataset)
    rng = substream(noise.seed, "noise")
    lo = geo.prototypes.min(axis=0) - 3 * geo.inter_std
    hi = geo.prototypes.max(axis=0) + 3 * geo.inter_std

    feats = dataset.features.copy()
    true_labels = dataset.true_labels.copy()
    kinds = dataset.noise_kinds.copy()
    for pos, c in enumerate(novel_ids):
        idx = np.flatnonzero(train & (dataset.labels == c))
        k = _round_half_up(noise.ratio * len(idx))
        chosen = rng.choice(idx, size=k, replace=False)
        n_flip = _round_half_up(noise.flip_fraction * k)
        target = novel_ids[(pos + 1) % len(novel_ids)]
        for r in chosen[:n_flip]:
            feats[r] = geo.prototypes[target] + rng.normal(0.0, geo.intra_std, size=dataset.dim)
            true_labels[r] = target
            kinds[r] = "flip"
        for r in chosen[n_flip:]:
            feats[r] = rng.uniform(lo, hi)
            true_labels[r] = OUTLIER_LABEL
            kinds[r] = "outlier"
    return replace(dataset, features=feats, true_labels=true_labels, noise_kinds=kinds)


def split_validation(n_base: int, n_novel: int) -> int:
    """Number of base categories held out as pseudo-novel for validation."""
    if n_base + n_novel == 0:
        return 0
    return (n_novel * n_base) // (n_base + n_novel)


def save_dataset(dataset: Dataset, path) -> None:
    lines = [f"dim={dataset.dim}"]
    for i in range(len(dataset)):
        vals = ",".join(repr(float(v)) for v in dataset.features[i])
        lines.append(
            f"{dataset.splits[i]},{dataset.labels[i]},{dataset.true_labels[i]},"
            f"{dataset.noise_kinds[i]},{vals}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or not text[0].startswith("dim="):
        raise DatasetFormatError("line 1: expected 'dim=<D>' header")
    try:
        dim = int(text[0][4:])
    except ValueError:
        raise DatasetFormatError(f"line 1: bad dimension {text[0][4:]!r}") from None
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4 + dim:
            raise DatasetFormatError(
                f"line {lineno}: expected {4 + dim} columns, found {len(parts)}"
            )
        split, lab, true_lab, kind = parts[:4]
        if split not in SPLITS or kind not in NOISE_KINDS:
            raise DatasetFormatError(f"line {lineno}: unknown split or noise kind")
        try:
            x = np.array([float(v) for v in parts[4:]])
            rows.append((x, int(lab), int(true_lab), split, kind))
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
    return _assemble(dim, rows)
