import numpy as np
import pytest
import torch

from isds.metrics import causal_f1
from isds.models.sds import RegimeGraphSet
from isds.utils.exceptions import ShapeError


def random_graphs(K=3, m=4, M=2, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return RegimeGraphSet(torch.rand(K, m, m, M, generator=generator) < 0.4)


def test_graphs_against_themselves():
    graphs = random_graphs()
    result = causal_f1(graphs, graphs)
    assert result.f1 == pytest.approx(1.0)
    assert result.undefined == []


def test_relabeled_graphs_are_aligned_back():
    graphs = random_graphs()
    regime_perm, latent_perm = [1, 2, 0], [3, 1, 0, 2]
    est = graphs.permute(regime_perm).relabel_latents(latent_perm)
    result = causal_f1(graphs, est, np.argsort(regime_perm).tolist(), np.argsort(latent_perm).tolist())
    assert result.f1 == pytest.approx(1.0)
    assert causal_f1(graphs, est).f1 < 1.0


def test_relabeling_nodes_of_both_graphs_leaves_the_score_unchanged():
    rng = np.random.default_rng(3)
    for case in range(1000):
        K, m, M = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        true = random_graphs(K, m, M, seed=case)
        flips = torch.as_tensor(rng.random((K, m, m, M)) < 0.2)
        est = RegimeGraphSet(true.adjacency ^ flips)
        base = causal_f1(true, est)
        perm = rng.permutation(m).tolist()

        relabeled = causal_f1(true.relabel_latents(perm), est.relabel_latents(perm))
        assert relabeled.f1 == pytest.approx(base.f1, abs=1e-12)
        assert relabeled.per_regime == pytest.approx(base.per_regime, abs=1e-12)
        assert relabeled.undefined == base.undefined

        aligned = causal_f1(true, est.relabel_latents(perm), latent_permutation=np.argsort(perm).tolist())
        assert aligned.f1 == pytest.approx(base.f1, abs=1e-12)


def test_empty_estimate():
    graphs = random_graphs()
    empty = RegimeGraphSet(torch.zeros_like(graphs.adjacency))
    assert causal_f1(graphs, empty).f1 == 0.0


def test_both_empty_is_undefined():
    graphs = random_graphs(K=2)
    graphs.adjacency[1] = False
    result = causal_f1(graphs, graphs)
    assert result.undefined == [1]
    assert result.per_regime == [1.0, 0.0]
    assert result.f1 == pytest.approx(0.5)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        causal_f1(random_graphs(m=4), random_graphs(m=3))
