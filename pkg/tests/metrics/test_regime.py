import itertools

import numpy as np
import pytest
import torch
from sklearn.metrics import f1_score

from isds.metrics import regime_f1
from isds.utils.exceptions import ShapeError


def one_hot(labels, num_classes):
    return np.eye(num_classes)[np.asarray(labels)]


def test_identity():
    true = np.array([0, 0, 1, 1, 2, 2, 0])
    result = regime_f1(true, one_hot(true, 3))
    assert result.f1 == pytest.approx(1.0)
    assert result.permutation == [0, 1, 2]
    assert not result.padded


def test_relabeled_prediction_scores_one():
    true = np.array([0, 0, 1, 1, 2, 2, 2])
    relabel = np.array([2, 0, 1])
    result = regime_f1(true, one_hot(relabel[true], 3))
    assert result.f1 == pytest.approx(1.0)
    assert result.permutation == relabel.tolist()


def test_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(10):
        true = rng.integers(0, 3, size=60)
        gamma = rng.random((60, 3))
        pred = gamma.argmax(-1)
        best = max(
            f1_score(true, np.array(g)[pred], labels=np.unique(true), average="macro", zero_division=0.0)
            for g in itertools.permutations(range(3))
        )
        assert regime_f1(true, gamma).f1 == pytest.approx(best, abs=1e-12)


def best_macro_f1(true, pred, num_classes):
    """Exhaustive search over label maps, counting per-class hits directly."""
    present = np.unique(true)
    best = 0.0
    for g in itertools.permutations(range(num_classes)):
        mapped = np.asarray(g)[pred]
        hits = (mapped[None] == present[:, None]) & (true[None] == present[:, None])
        support = (true[None] == present[:, None]).sum(1) + (mapped[None] == present[:, None]).sum(1)
        best = max(best, float(np.mean(2.0 * hits.sum(1) / support)))
    return best


@pytest.mark.parametrize("num_classes", [2, 3, 4, 5])
def test_random_cases_match_exhaustive_search(num_classes):
    rng = np.random.default_rng(num_classes)
    for _ in range(250):
        true = rng.integers(0, num_classes, size=40)
        gamma = rng.random((40, num_classes))
        result = regime_f1(true, gamma, num_regimes=num_classes)
        assert result.f1 == pytest.approx(best_macro_f1(true, gamma.argmax(-1), num_classes), abs=1e-12)
        assert sorted(result.permutation) == list(range(num_classes))


@pytest.mark.parametrize("num_classes", [2, 3, 4, 5])
def test_random_relabelings_leave_the_score_unchanged(num_classes):
    rng = np.random.default_rng(10 + num_classes)
    for _ in range(250):
        true = rng.permutation(np.arange(100) % num_classes)
        noisy = np.where(rng.random(100) < 0.1, rng.integers(0, num_classes, size=100), true)
        gamma = one_hot(noisy, num_classes) + 0.1 * rng.random((100, num_classes))
        relabel = rng.permutation(num_classes)
        base = regime_f1(true, gamma)
        # column relabel[j] of the relabeled marginals is column j of the original
        result = regime_f1(true, gamma[:, np.argsort(relabel)])
        assert result.f1 == pytest.approx(base.f1, abs=1e-12)
        assert base.permutation == list(range(num_classes))
        assert result.permutation == relabel.tolist()


def test_batched_torch_inputs():
    true = torch.tensor([[0, 1, 1], [1, 0, 0]])
    gamma = torch.nn.functional.one_hot(1 - true, 2).double()
    result = regime_f1(true, gamma)
    assert result.f1 == pytest.approx(1.0)
    assert result.permutation == [1, 0]


def test_fewer_predicted_regimes_are_padded():
    true = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([0, 0, 1, 1, 1, 1])
    result = regime_f1(true, one_hot(pred, 2))
    assert result.padded
    assert len(result.permutation) == 3
    assert result.f1 <= 2.0 / 3.0 + 1e-12


def test_length_mismatch():
    with pytest.raises(ShapeError):
        regime_f1(np.zeros(4, dtype=int), one_hot([0, 0, 0], 1))
