"""Synthetic domain generation, non-iid client partitioning, CSV I/O.

Datasets are Gaussian mixtures with deterministically placed class means, so
separation (and therefore problem difficulty) is a config knob. Targets are
derived from a source-like dataset by rotation, translation, and label noise.
Partitioners return index sets and never copy feature data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .models import Batch

LABEL_SUBSET = "label-subset"
DIRICHLET = "dirichlet"


@dataclass
class Dataset:
    """Features (N, m), integer labels (N,), and the label alphabet size."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ConfigError("features must be a nonempty (N, m) matrix")
        if self.labels.shape != (len(self.features),):
            raise ConfigError("labels must have length N")
        if not np.isfinite(self.features).all():
            raise ConfigError("non-finite feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def to_batch(self) -> Batch:
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class ShiftSpec:
    """Source-to-target transform: pairwise rotation, translation, label noise."""

    rotation_angle: float = 0.0
    mean_translation: np.ndarray | None = None
    label_noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ConfigError("label_noise_rate must lie in [0, 0.5)")

    @property
    def is_identity(self) -> bool:
        translated = self.mean_translation is not None and np.any(
            np.asarray(self.mean_translation) != 0.0
        )
        return self.rotation_angle == 0.0 and not translated and self.label_noise_rate == 0.0


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint assignment of dataset indices to K clients."""

    assignments: tuple[np.ndarray, ...]
    scheme: str
    seed: int

    def __post_init__(self):
        if len(self.assignments) < 1:
            raise ConfigError("need at least one client")
        seen: set[int] = set()
        for idx in self.assignments:
            as_set = set(int(i) for i in idx)
            if len(as_set) != len(idx):
                raise ConfigError("duplicate index inside one client")
            if seen & as_set:
                raise ConfigError("clients share sample indices")
            seen |= as_set

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def assigned_count(self) -> int:
        return sum(len(a) for a in self.assignments)


# per-vertex scale multipliers, cycled over classes; all >= 1 so every
# pairwise distance stays >= class_separation while pair difficulty varies
_VERTEX_SCALES = (1.0, 1.5, 2.25)


def class_means(num_classes: int, dim: int, class_separation: float) -> np.ndarray:
    """Deterministic class centers with pairwise distance >= class_separation.

    When dim >= num_classes the centers sit on standard-basis simplex
    vertices with cycled per-vertex scales, so class pairs differ in how
    hard they are to separate (distance between vertices i, j is
    separation/sqrt(2) * sqrt(s_i^2 + s_j^2) >= separation). With
    dim < num_classes the centers fall back to a 1-d lattice along the
    first coordinate.
    """
    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        base = class_separation / np.sqrt(2.0)
        for c in range(num_classes):
            means[c, c] = base * _VERTEX_SCALES[c % len(_VERTEX_SCALES)]
    else:
        for c in range(num_classes):
            means[c, 0] = c * class_separation
    return means


def generate_gaussian_mixture(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs around deterministic means."""
    if num_classes < 1 or dim < 1 or samples_per_class < 1:
        raise ConfigError("counts must be >= 1")
    if class_separation <= 0:
        raise ConfigError("class_separation must be > 0")
    means = class_means(num_classes, dim, class_separation)
    rng = np.random.default_rng(seed)
    feats = np.empty((num_classes * samples_per_class, dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for c in range(num_classes):
        lo = c * samples_per_class
        feats[lo : lo + samples_per_class] = means[c] + rng.standard_normal(
            (samples_per_class, dim)
        )
        labels[lo : lo + samples_per_class] = c
    return Dataset(feats, labels, num_classes)


def apply_shift(source: Dataset, shift: ShiftSpec) -> Dataset:
    """Rotate consecutive coordinate pairs, translate, then flip labels."""
    if shift.is_identity:
        return Dataset(source.features.copy(), source.labels.copy(), source.num_classes)
    feats = source.features.copy()
    if shift.rotation_angle != 0.0:
        if source.dim < 2:
            raise ConfigError("rotation requires dim >= 2")
        c, s = np.cos(shift.rotation_angle), np.sin(shift.rotation_angle)
        for j in range(0, source.dim - 1, 2):
            x, y = feats[:, j].copy(), feats[:, j + 1].copy()
            feats[:, j] = c * x - s * y
            feats[:, j + 1] = s * x + c * y
    if shift.mean_translation is not None:
        t = np.asarray(shift.mean_translation, dtype=np.float64)
        if t.shape != (source.dim,):
            raise ConfigError("mean_translation must have the feature dimension")
        feats = feats + t
    labels = source.labels.copy()
    if shift.label_noise_rate > 0.0:
        if source.num_classes < 2:
            raise ConfigError("label noise requires >= 2 classes")
        rng = np.random.default_rng(shift.seed)
        flip = rng.random(len(labels)) < shift.label_noise_rate
        offsets = rng.integers(1, source.num_classes, size=len(labels))
        labels = np.where(flip, (labels + offsets) % source.num_classes, labels)
    return Dataset(feats, labels, source.num_classes)


def partition_label_subset(
    dataset: Dataset, K: int, classes_per_client: int, seed: int
) -> PartitionPlan:
    """Each client draws a fixed number of classes; class samples are split
    evenly (floor) across the clients that picked the class, remainders are
    left unassigned.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    if not 1 <= classes_per_client <= dataset.num_classes:
        raise ConfigError("classes_per_client must lie in [1, num_classes]")
    rng = np.random.default_rng(seed)
    chosen = [
        rng.choice(dataset.num_classes, size=classes_per_client, replace=False)
        for _ in range(K)
    ]
    by_class = {
        c: rng.permutation(np.flatnonzero(dataset.labels == c))
        for c in range(dataset.num_classes)
    }
    assignments: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(dataset.num_classes):
        takers = sorted(k for k in range(K) if c in chosen[k])
        if not takers:
            continue
        share = len(by_class[c]) // len(takers)
        if share == 0:
            raise ConfigError(
                f"class {c} has {len(by_class[c])} samples for {len(takers)} "
                "clients; lower K or classes_per_client"
            )
        for slot, k in enumerate(takers):
            assignments[k].append(by_class[c][slot * share : (slot + 1) * share])
    return PartitionPlan(
        tuple(np.sort(np.concatenate(parts)) for parts in assignments),
        scheme=LABEL_SUBSET,
        seed=seed,
    )


def partition_dirichlet(
    dataset: Dataset, K: int, concentration: float, seed: int
) -> PartitionPlan:
    """Per class, split samples across clients with Dirichlet-multinomial counts."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if concentration <= 0:
        raise ConfigError("concentration must be > 0")
    rng = np.random.default_rng(seed)
    assignments: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        if len(idx) == 0:
            continue
        proportions = rng.dirichlet(np.full(K, concentration))
        counts = rng.multinomial(len(idx), proportions)
        offset = 0
        for k in range(K):
            assignments[k].append(idx[offset : offset + counts[k]])
            offset += counts[k]
    return PartitionPlan(
        tuple(np.sort(np.concatenate(parts)) for parts in assignments),
        scheme=DIRICHLET,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# CSV I/O
#
# Format: header "label,f0,...,f{m-1}", one sample per line, labels as
# base-10 integers, features as decimal floats, LF endings.


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ",".join(f"f{j}" for j in range(dataset.dim))
        fh.write(f"label,{cols}\n")
        for label, row in zip(dataset.labels, dataset.features):
            feats = ",".join(repr(float(v)) for v in row)
            fh.write(f"{label},{feats}\n")


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Parse a dataset CSV; errors name the offending 1-based line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("label,"):
        raise DataFormatError(f"{path}: missing 'label,f0,...' header")
    width = len(lines[0].split(",")) - 1
    feats: list[list[float]] = []
    labels: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != width + 1:
            raise DataFormatError(
                f"{path}:{lineno}: expected {width + 1} columns, got {len(cells)}"
            )
        try:
            labels.append(int(cells[0]))
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer label {cells[0]!r}")
        try:
            row = [float(v) for v in cells[1:]]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: unparsable feature value")
        if not all(np.isfinite(row)):
            raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
        feats.append(row)
    if not feats:
        raise DataFormatError(f"{path}: empty dataset")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if labels_arr.min() < 0:
        raise DataFormatError(f"{path}: negative label")
    if num_classes is None:
        num_classes = int(labels_arr.max()) + 1
    return Dataset(np.asarray(feats), labels_arr, num_classes)
