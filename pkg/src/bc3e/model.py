"""Domain types: problem shape, label tables, model and variational parameters."""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import OutOfRangeLabel, ShapeMismatch, ValidationError
from .special import row_sum


@dataclass(frozen=True)
class ProblemShape:
    n_instances: int
    n_classes: int
    n_classifiers: int
    n_clusterings: int
    clusters_per_clustering: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "clusters_per_clustering", tuple(int(c) for c in self.clusters_per_clustering))
        if self.n_instances < 1:
            raise ValidationError("need at least one instance")
        if self.n_classes < 2:
            raise ValidationError("need at least two classes")
        if self.n_classifiers < 0 or self.n_clusterings < 0:
            raise ValidationError("ensemble sizes must be nonnegative")
        if self.n_classifiers + self.n_clusterings < 1:
            raise ValidationError("need at least one classifier or clustering")
        if len(self.clusters_per_clustering) != self.n_clusterings:
            raise ValidationError(
                f"clusters_per_clustering has {len(self.clusters_per_clustering)} entries, "
                f"expected {self.n_clusterings}"
            )
        if any(c < 1 for c in self.clusters_per_clustering):
            raise ValidationError("every clustering needs at least one cluster")

    def with_instances(self, n):
        return ProblemShape(n, self.n_classes, self.n_classifiers, self.n_clusterings, self.clusters_per_clustering)


class Violation(NamedTuple):
    """An out-of-range label: 0-based row, 1-based column within its block, 1-based value."""

    row: int
    column: int
    value: int
    kind: str = "class"

    def __str__(self):
        return f"{self.kind} label (row={self.row}, column={self.column}, value={self.value})"


@dataclass
class LabelTable:
    """Hard labels for N instances, stored 0-based.

    ``class_labels`` is N x r1 with entries in [0, k); ``cluster_labels`` is
    N x r2 with column m in [0, k^(m)).
    """

    class_labels: np.ndarray
    cluster_labels: np.ndarray
    instance_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.cluster_labels = np.asarray(self.cluster_labels, dtype=np.int64)
        n = self.class_labels.shape[0] if self.class_labels.ndim == 2 else None
        if self.class_labels.ndim != 2 or self.cluster_labels.ndim != 2:
            raise ShapeMismatch("label matrices must be two-dimensional")
        if self.cluster_labels.shape[0] != n:
            raise ShapeMismatch(
                f"class labels have {n} rows but cluster labels have {self.cluster_labels.shape[0]}"
            )
        if not self.instance_ids:
            self.instance_ids = [str(i + 1) for i in range(n)]
        else:
            self.instance_ids = [str(i) for i in self.instance_ids]
        if len(self.instance_ids) != n:
            raise ShapeMismatch(f"{len(self.instance_ids)} instance ids for {n} rows")

    @classmethod
    def from_one_based(cls, class_labels, cluster_labels, instance_ids=None):
        """Build from file-style 1-based labels."""
        return cls(np.asarray(class_labels, dtype=np.int64) - 1,
                   np.asarray(cluster_labels, dtype=np.int64) - 1,
                   list(instance_ids or []))

    @property
    def n_instances(self):
        return self.class_labels.shape[0]

    @property
    def n_classifiers(self):
        return self.class_labels.shape[1]

    @property
    def n_clusterings(self):
        return self.cluster_labels.shape[1]

    def rows(self, index):
        index = np.asarray(index, dtype=np.int64)
        return LabelTable(self.class_labels[index], self.cluster_labels[index],
                          [self.instance_ids[i] for i in index])

    def infer_shape(self, n_classes=None, clusters_per_clustering=None):
        k = n_classes
        if k is None:
            k = int(self.class_labels.max()) + 1 if self.class_labels.size else 2
        ks = clusters_per_clustering
        if ks is None:
            ks = [int(self.cluster_labels[:, m].max()) + 1 for m in range(self.n_clusterings)]
        return ProblemShape(self.n_instances, max(int(k), 2), self.n_classifiers, self.n_clusterings, tuple(ks))


def validate_table(table: LabelTable, shape: ProblemShape) -> LabelTable:
    """Return ``table`` unchanged if it fits ``shape``; raise otherwise.

    Range violations are collected exhaustively and reported together.
    """
    if table.n_instances != shape.n_instances:
        raise ShapeMismatch(f"table has {table.n_instances} rows, shape says {shape.n_instances}")
    if table.n_classifiers != shape.n_classifiers:
        raise ShapeMismatch(f"table has {table.n_classifiers} classifier columns, shape says {shape.n_classifiers}")
    if table.n_clusterings != shape.n_clusterings:
        raise ShapeMismatch(f"table has {table.n_clusterings} clustering columns, shape says {shape.n_clusterings}")

    violations = []
    bad = (table.class_labels < 0) | (table.class_labels >= shape.n_classes)
    for n, l in zip(*np.nonzero(bad)):
        violations.append(Violation(int(n), int(l) + 1, int(table.class_labels[n, l]) + 1, "class"))
    for m, km in enumerate(shape.clusters_per_clustering):
        col = table.cluster_labels[:, m]
        for n in np.nonzero((col < 0) | (col >= km))[0]:
            violations.append(Violation(int(n), m + 1, int(col[n]) + 1, "cluster"))
    if violations:
        violations.sort(key=lambda v: (v.kind != "class", v.row, v.column))
        raise OutOfRangeLabel(violations)
    return table


def class_indicators(class_labels, n_classes):
    """N x r1 labels -> N x r1 x k one-hot indicators."""
    return np.eye(n_classes, dtype=np.float64)[np.asarray(class_labels)]


def collapse_indicators(indicators):
    return np.argmax(indicators, axis=-1)


def class_counts(class_labels, n_classes):
    """Per-row vote counts, N x k."""
    class_labels = np.asarray(class_labels)
    counts = np.zeros((class_labels.shape[0], n_classes))
    for l in range(class_labels.shape[1]):
        counts[np.arange(class_labels.shape[0]), class_labels[:, l]] += 1.0
    return counts


@dataclass
class ModelParams:
    alpha: np.ndarray
    beta: List[np.ndarray]

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = [np.asarray(b, dtype=np.float64) for b in self.beta]

    @property
    def n_classes(self):
        return self.alpha.shape[0]

    def check(self, atol=1e-12):
        if not np.all(self.alpha > 0):
            raise ValidationError("alpha must be strictly positive")
        for m, b in enumerate(self.beta):
            if b.ndim != 2 or b.shape[0] != self.n_classes:
                raise ValidationError(f"beta[{m}] must have {self.n_classes} rows")
            if not np.all(b > 0):
                raise ValidationError(f"beta[{m}] has non-positive entries")
            if np.max(np.abs(row_sum(b) - 1.0)) > atol:
                raise ValidationError(f"beta[{m}] rows do not sum to one")
        return self

    def copy(self):
        return ModelParams(self.alpha.copy(), [b.copy() for b in self.beta])

    def same_as(self, other: "ModelParams") -> bool:
        return (np.array_equal(self.alpha, other.alpha)
                and len(self.beta) == len(other.beta)
                and all(np.array_equal(a, b) for a, b in zip(self.beta, other.beta)))


@dataclass
class VariationalState:
    """gamma is N x k; phi is N x r2 x k."""

    gamma: np.ndarray
    phi: np.ndarray
    inner_iterations: Optional[np.ndarray] = None
    converged: Optional[np.ndarray] = None

    @property
    def n_instances(self):
        return self.gamma.shape[0]

    def posteriors(self):
        return self.gamma / row_sum(self.gamma)[:, None]


def predicted_class(posteriors: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(posteriors), axis=1)


def uniform_beta(clusters_per_clustering: Sequence[int], n_classes: int) -> List[np.ndarray]:
    return [np.full((n_classes, km), 1.0 / km) for km in clusters_per_clustering]
