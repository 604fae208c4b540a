"""Datasets, synthetic two-domain generation, and episodic sampling.

A dataset is a flat (features, labels) table indexed by class.  Episodes
are K-way N-shot tasks with Q query points per class, sampled without
replacement.  The synthetic generator draws class centers uniformly in
[-1, 1]^dim and shifts the second domain's centers by a fixed offset
vector, with isotropic Gaussian samples around each center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Array

# Independent sub-streams of the dataset seed.
_CENTER_STREAM = 11
_SAMPLE_STREAM = 12


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass
class Dataset:
    features: Array
    labels: Array
    split_name: str = ""
    class_index: dict[int, Array] = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("need exactly one label per feature row")
        self.class_index = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.class_index))

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    def min_class_count(self) -> int:
        return min((idx.size for idx in self.class_index.values()), default=0)

    def subset_classes(self, class_ids, split_name: str | None = None) -> "Dataset":
        wanted = sorted(int(c) for c in class_ids)
        missing = [c for c in wanted if c not in self.class_index]
        if missing:
            raise ValueError(f"dataset has no classes {missing}")
        rows = np.concatenate([self.class_index[c] for c in wanted]) if wanted else \
            np.empty(0, dtype=np.int64)
        return Dataset(
            self.features[rows],
            self.labels[rows],
            self.split_name if split_name is None else split_name,
        )


def concat_datasets(a: Dataset, b: Dataset, split_name: str) -> Dataset:
    """Row-wise union of two class-disjoint datasets."""
    overlap = set(a.classes) & set(b.classes)
    if overlap:
        raise ValueError(f"datasets share classes {sorted(overlap)}")
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    return Dataset(
        np.vstack([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        split_name,
    )


@dataclass(frozen=True)
class EpisodeSpec:
    """K-way N-shot with Q query points per class."""

    ways: int
    shots: int
    queries: int

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError("an episode needs at least 2 ways to pose a task")
        if self.shots < 1 or self.queries < 1:
            raise ValueError("shots and queries must be at least 1")


@dataclass(frozen=True)
class Episode:
    """One sampled task; labels are local 0..K-1, class_map holds global ids."""

    support_x: Array
    support_y: Array
    query_x: Array
    query_y: Array
    class_map: tuple[int, ...]

    @property
    def n_ways(self) -> int:
        return len(self.class_map)

    def all_inputs(self) -> Array:
        return np.vstack([self.support_x, self.query_x])


@dataclass(frozen=True)
class SyntheticSpec:
    """Two domains of `classes_per_domain` Gaussian clusters each.

    Class ids [0, C) are the first domain; [C, 2C) are the second, whose
    centers carry the extra `domain_offset`.
    """

    classes_per_domain: int
    dim: int
    cluster_std: float
    domain_offset: tuple[float, ...]
    samples_per_class: int
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "domain_offset", tuple(float(v) for v in self.domain_offset)
        )
        if self.classes_per_domain < 1:
            raise ValueError("need at least one class per domain")
        if self.dim < 1 or len(self.domain_offset) != self.dim:
            raise ValueError("domain_offset length must equal dim")
        if self.cluster_std < 0:
            raise ValueError("cluster_std must be non-negative")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be at least 1")

    @property
    def n_classes(self) -> int:
        return 2 * self.classes_per_domain


def uniform_offset(magnitude: float, dim: int) -> tuple[float, ...]:
    """Offset vector of L2 length `magnitude` spread evenly over all coordinates."""
    return (magnitude / math.sqrt(dim),) * dim


def class_centers(spec: SyntheticSpec) -> Array:
    """True cluster centers, depending only on spec.seed."""
    rng = np.random.default_rng([spec.seed, _CENTER_STREAM])
    centers = rng.uniform(-1.0, 1.0, size=(spec.n_classes, spec.dim))
    centers[spec.classes_per_domain:] += np.asarray(spec.domain_offset)
    return centers


def gen_synthetic(
    spec: SyntheticSpec, sample_seed: int = 0, split_name: str = "synthetic"
) -> Dataset:
    """Draw samples_per_class points around every center.

    `sample_seed` varies the draw while keeping the centers fixed, which is
    how train/val/test tables of the same world are produced.
    """
    centers = class_centers(spec)
    rng = np.random.default_rng([spec.seed, _SAMPLE_STREAM, sample_seed])
    n, d = spec.samples_per_class, spec.dim
    noise = rng.standard_normal((spec.n_classes, n, d)) * spec.cluster_std
    features = (centers[:, None, :] + noise).reshape(spec.n_classes * n, d)
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), n)
    return Dataset(features, labels, split_name)


def save_dataset(dataset: Dataset, path) -> None:
    """Write `label,f0,f1,...` rows; float repr so a round trip is bit-exact."""
    path = Path(path)
    lines = ["label," + ",".join(f"f{i}" for i in range(dataset.dim))]
    for row, lab in zip(dataset.features, dataset.labels):
        lines.append(str(int(lab)) + "," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path, split_name: str | None = None) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DatasetFormatError(f"{path}: {e}") from e
    lines = [ln for ln in text.splitlines()]
    if not lines or not lines[0].startswith("label"):
        raise DatasetFormatError(f"{path}: line 1: expected a 'label,f0,...' header")
    width = len(lines[0].split(","))
    if width < 2:
        raise DatasetFormatError(f"{path}: line 1: header has no feature columns")
    features, labels = [], []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(
                f"{path}: line {no}: expected {width} fields, found {len(parts)}"
            )
        try:
            labels.append(int(parts[0]))
            features.append([float(v) for v in parts[1:]])
        except ValueError as e:
            raise DatasetFormatError(f"{path}: line {no}: {e}") from e
    if not features:
        raise DatasetFormatError(f"{path}: no data rows")
    return Dataset(
        np.asarray(features), np.asarray(labels), split_name or path.stem
    )


def split_classes(
    dataset: Dataset, fractions: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Class-disjoint split into (old, new, unseen) by shuffled apportionment.

    A split with a positive fraction must land at least 2 classes (else no
    episode can be posed on it); zero-fraction splits come back empty.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    classes = list(dataset.classes)
    rng = np.random.default_rng([seed, 21])
    rng.shuffle(classes)

    total = len(classes)
    exact = [f * total for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(total - sum(counts)):
        counts[order[i % 3]] += 1
    names = ("old", "new", "unseen")
    for frac, cnt, name in zip(fractions, counts, names):
        if frac > 0 and cnt < 2:
            raise ValueError(
                f"split '{name}' would receive {cnt} classes; episodes need at least 2"
            )
    out = []
    start = 0
    for cnt, name in zip(counts, names):
        ids = classes[start : start + cnt]
        start += cnt
        if ids:
            out.append(dataset.subset_classes(ids, name))
        else:
            out.append(Dataset(np.empty((0, dataset.dim)), np.empty(0, dtype=np.int64), name))
    return tuple(out)


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw ways classes, then shots+queries rows per class, all without replacement."""
    classes = np.asarray(dataset.classes, dtype=np.int64)
    if classes.size < spec.ways:
        raise ValueError(
            f"dataset '{dataset.split_name}' has {classes.size} classes; "
            f"episode needs {spec.ways}"
        )
    chosen = rng.choice(classes, size=spec.ways, replace=False)
    need = spec.shots + spec.queries
    sx, qx = [], []
    for cid in chosen:
        rows = dataset.class_index[int(cid)]
        if rows.size < need:
            raise ValueError(
                f"class {int(cid)} has {rows.size} rows; episode needs {need}"
            )
        pick = rng.choice(rows, size=need, replace=False)
        sx.append(dataset.features[pick[: spec.shots]])
        qx.append(dataset.features[pick[spec.shots :]])
    support_y = np.repeat(np.arange(spec.ways, dtype=np.int64), spec.shots)
    query_y = np.repeat(np.arange(spec.ways, dtype=np.int64), spec.queries)
    return Episode(
        np.vstack(sx), support_y, np.vstack(qx), query_y,
        tuple(int(c) for c in chosen),
    )


def sample_anchor_subset(anchors, k: int, rng: np.random.Generator):
    """Uniform subset of k stored anchors, without replacement."""
    if k < 1:
        raise ValueError("anchor subset must contain at least one anchor")
    if k > len(anchors):
        raise ValueError(f"asked for {k} anchors but only {len(anchors)} are stored")
    idx = np.sort(rng.choice(len(anchors), size=k, replace=False))
    return anchors.restrict([anchors.class_ids[i] for i in idx])


@dataclass
class ExemplarSet:
    """A few retained feature rows per old class."""

    features_by_class: dict[int, Array]

    def __post_init__(self):
        self.features_by_class = {
            int(c): np.asarray(v, dtype=np.float64)
            for c, v in self.features_by_class.items()
        }
        for c, v in self.features_by_class.items():
            if v.ndim != 2 or v.shape[0] < 1:
                raise ValueError(f"class {c} needs at least one exemplar row")

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.features_by_class))

    def count(self, class_id: int) -> int:
        return self.features_by_class[class_id].shape[0]

    def min_count(self) -> int:
        return min(v.shape[0] for v in self.features_by_class.values())

    def as_dataset(self, split_name: str = "exemplars") -> Dataset:
        feats = np.vstack([self.features_by_class[c] for c in self.classes])
        labels = np.concatenate(
            [np.full(self.count(c), c, dtype=np.int64) for c in self.classes]
        )
        return Dataset(feats, labels, split_name)


def reserve_exemplars(
    dataset: Dataset, per_class: int, rng: np.random.Generator
) -> ExemplarSet:
    """Keep up to per_class rows of every class; smaller classes are kept whole."""
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    kept: dict[int, Array] = {}
    for cid in dataset.classes:
        rows = dataset.class_index[cid]
        take = min(per_class, rows.size)
        pick = rng.choice(rows, size=take, replace=False)
        kept[cid] = dataset.features[pick].copy()
    return ExemplarSet(kept)
