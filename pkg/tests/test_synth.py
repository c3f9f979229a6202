import numpy as np
import pytest

from bc3e.errors import LengthMismatch, ValidationError
from bc3e.model import ProblemShape
from bc3e.synth import (GenerativeSpec, accuracy_report, evaluate_accuracy, majority_vote, sample_dataset,
                        separated_beta, standard_spec, true_params)


def test_same_seed_same_tables():
    a, b = sample_dataset(standard_spec(seed=5)), sample_dataset(standard_spec(seed=5))
    assert np.array_equal(a.table.class_labels, b.table.class_labels)
    assert np.array_equal(a.table.cluster_labels, b.table.cluster_labels)
    assert np.array_equal(a.theta, b.theta)
    c = sample_dataset(standard_spec(seed=6))
    assert not np.array_equal(a.table.class_labels, c.table.class_labels)


def test_huge_alpha_gives_uniform_label_frequencies():
    n = 100_000
    spec = standard_spec(n_instances=n, alpha=[1e6] * 3, classifier_noise=0.0, seed=1)
    s = sample_dataset(spec)
    assert np.max(np.abs(s.theta - 1 / 3)) < 0.01
    p = 1 / 3
    band = 3 * np.sqrt(n * p * (1 - p))
    for col in s.table.class_labels.T:
        counts = np.bincount(col, minlength=3)
        assert np.all(np.abs(counts - n * p) <= band), counts
    for col in s.table.cluster_labels.T:
        # pure-0.8 beta with uniform z keeps cluster labels uniform too
        counts = np.bincount(col, minlength=3)
        assert np.all(np.abs(counts - n * p) <= band), counts


def test_mean_theta_within_three_sigma():
    n = 100_000
    alpha = np.array([2.0, 1.0, 0.5])
    s = sample_dataset(standard_spec(n_instances=n, alpha=alpha, seed=2))
    a0 = alpha.sum()
    mean = alpha / a0
    sd = np.sqrt(alpha * (a0 - alpha) / (a0 ** 2 * (a0 + 1)) / n)
    assert np.all(np.abs(s.theta.mean(axis=0) - mean) <= 3 * sd)
    assert np.allclose(s.theta.sum(axis=1), 1.0, atol=1e-12)


def test_one_hot_beta_with_concentrated_alpha():
    spec = standard_spec(n_instances=2000, alpha=[0.01] * 3, purity=1.0, seed=3)
    s = sample_dataset(spec)
    for m in range(2):
        aligned = (s.true_class + m) % 3
        assert np.mean(s.table.cluster_labels[:, m] == aligned) >= 0.98
    # one-hot rows make the two clusterings agree exactly on the latent class whenever theta is one-hot
    assert np.all(separated_beta(3, 3, 1.0) == np.eye(3))


def test_spec_validation():
    shape = ProblemShape(10, 2, 1, 1, (2,))
    good = [np.array([[0.5, 0.5], [0.5, 0.5]])]
    GenerativeSpec(shape, [1.0, 1.0], good)
    with pytest.raises(ValidationError):
        GenerativeSpec(shape, [1.0, 1.0], good, classifier_noise=1.0)
    with pytest.raises(ValidationError):
        GenerativeSpec(shape, [1.0, 0.0], good)
    with pytest.raises(ValidationError):
        GenerativeSpec(shape, [1.0, 1.0], [np.array([[0.6, 0.5], [0.5, 0.5]])])
    with pytest.raises(ValidationError):
        GenerativeSpec(shape, [1.0], good)


def test_accuracy_examples():
    truth = np.arange(100) % 3
    assert evaluate_accuracy(truth, truth) == 1.0
    pred = truth.copy()
    pred[:25] = (pred[:25] + 1) % 3
    assert evaluate_accuracy(pred, truth) == 0.75
    with pytest.raises(LengthMismatch):
        evaluate_accuracy(pred[:-1], truth)


def test_majority_vote_ties_go_low():
    labels = np.array([[2, 1, 0], [1, 1, 0], [2, 2, 2]])
    assert majority_vote(labels, 3).tolist() == [0, 1, 2]


def test_accuracy_report_fields():
    labels = np.array([[0, 1, 1], [1, 1, 0], [2, 2, 2], [0, 0, 1]])
    truth = np.array([1, 1, 2, 0])
    r = accuracy_report(np.array([1, 1, 2, 0]), truth, labels, 3)
    assert r.accuracy == 1.0
    assert r.per_classifier == [0.75, 1.0, 0.5]
    assert r.best_component == 1.0 and r.majority_vote == 1.0
    assert set(r.as_dict()) == {"accuracy", "per_classifier", "best_component", "majority_vote"}


def test_true_params_satisfy_invariants():
    true_params(standard_spec(purity=0.97)).check()
