"""Forward sampler for the generative model and accuracy metrics."""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import LengthMismatch, ValidationError
from .model import LabelTable, ModelParams, ProblemShape, class_counts, predicted_class
from .special import row_sum


@dataclass
class GenerativeSpec:
    shape: ProblemShape
    true_alpha: np.ndarray
    true_beta: List[np.ndarray]
    classifier_noise: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.true_alpha = np.asarray(self.true_alpha, dtype=np.float64)
        self.true_beta = [np.asarray(b, dtype=np.float64) for b in self.true_beta]
        if self.true_alpha.shape != (self.shape.n_classes,):
            raise ValidationError("true_alpha must have one entry per class")
        if len(self.true_beta) != self.shape.n_clusterings:
            raise ValidationError("need one beta matrix per clustering")
        for b, km in zip(self.true_beta, self.shape.clusters_per_clustering):
            if b.shape != (self.shape.n_classes, km):
                raise ValidationError(f"beta matrix has shape {b.shape}, expected {(self.shape.n_classes, km)}")
            if np.any(b < 0) or np.max(np.abs(b.sum(axis=1) - 1.0)) > 1e-9:
                raise ValidationError("beta rows must be probability vectors")
        if not np.all(self.true_alpha > 0):
            raise ValidationError("true_alpha must be positive")
        if not 0.0 <= self.classifier_noise < 1.0:
            raise ValidationError("classifier_noise must lie in [0, 1)")


class Sample(NamedTuple):
    table: LabelTable
    theta: np.ndarray
    true_class: np.ndarray


def _categorical(rng, probs):
    """One draw per row of an n x q probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_dataset(spec: GenerativeSpec) -> Sample:
    shape = spec.shape
    rng = np.random.default_rng(spec.rng_seed)
    n, k = shape.n_instances, shape.n_classes

    g = rng.standard_gamma(np.broadcast_to(spec.true_alpha, (n, k)))
    theta = g / row_sum(g)[:, None]

    classes = np.empty((n, shape.n_classifiers), dtype=np.int64)
    for l in range(shape.n_classifiers):
        labels = _categorical(rng, theta)
        flip = rng.random(n) < spec.classifier_noise
        noise = rng.integers(0, k, size=n)
        classes[:, l] = np.where(flip, noise, labels)

    clusters = np.empty((n, shape.n_clusterings), dtype=np.int64)
    for m, b in enumerate(spec.true_beta):
        z = _categorical(rng, theta)
        clusters[:, m] = _categorical(rng, b[z])

    ids = [f"x{i + 1}" for i in range(n)]
    return Sample(LabelTable(classes, clusters, ids), theta, predicted_class(theta))


def evaluate_accuracy(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise LengthMismatch(f"{predicted.shape[0]} predictions for {truth.shape[0]} truth labels")
    if truth.size == 0:
        raise LengthMismatch("nothing to evaluate")
    return float(np.count_nonzero(predicted == truth)) / truth.size


def majority_vote(class_labels, n_classes) -> np.ndarray:
    """Plurality over classifier columns; ties go to the lowest class index."""
    return predicted_class(class_counts(class_labels, n_classes))


@dataclass
class AccuracyReport:
    accuracy: Optional[float]
    per_classifier: List[float] = field(default_factory=list)
    best_component: Optional[float] = None
    majority_vote: Optional[float] = None

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "per_classifier": list(self.per_classifier),
            "best_component": self.best_component,
            "majority_vote": self.majority_vote,
        }


def accuracy_report(predicted, truth, class_labels=None, n_classes=None) -> AccuracyReport:
    truth = np.asarray(truth)
    acc = evaluate_accuracy(predicted, truth) if predicted is not None else None
    report = AccuracyReport(acc)
    if class_labels is not None and np.asarray(class_labels).shape[1] > 0:
        class_labels = np.asarray(class_labels)
        if n_classes is None:
            n_classes = int(max(class_labels.max(), truth.max())) + 1
        report.per_classifier = [evaluate_accuracy(class_labels[:, l], truth) for l in range(class_labels.shape[1])]
        report.best_component = max(report.per_classifier)
        report.majority_vote = evaluate_accuracy(majority_vote(class_labels, n_classes), truth)
    return report


def separated_beta(n_classes: int, n_clusters: int, purity: float, shift: int = 0) -> np.ndarray:
    """Rows put ``purity`` mass on one cluster (class i -> cluster (i + shift) mod q)."""
    b = np.full((n_classes, n_clusters), (1.0 - purity) / max(n_clusters - 1, 1))
    for i in range(n_classes):
        b[i, (i + shift) % n_clusters] = purity
    return b / b.sum(axis=1, keepdims=True)


def standard_spec(n_instances=500, n_classes=3, n_classifiers=3, clusters: Sequence[int] = (3, 3),
                  alpha=None, purity=0.8, classifier_noise=0.3, seed=42) -> GenerativeSpec:
    """The synthetic fixture family used throughout the tests and the CLI defaults."""
    shape = ProblemShape(n_instances, n_classes, n_classifiers, len(clusters), tuple(clusters))
    if alpha is None:
        alpha = np.full(n_classes, 0.5)
    beta = [separated_beta(n_classes, km, purity, shift=m) for m, km in enumerate(clusters)]
    return GenerativeSpec(shape, np.asarray(alpha, dtype=np.float64), beta, classifier_noise, seed)


def true_params(spec: GenerativeSpec) -> ModelParams:
    return ModelParams(spec.true_alpha.copy(), [b.copy() for b in spec.true_beta])
