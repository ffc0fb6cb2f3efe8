import numpy as np
import pytest
import torch

from isds.metrics import AffineAlignment, fit_affine_alignment, mcc
from isds.utils.exceptions import ConfigError, NumericError, ShapeError


def latents(num_samples=500, dim=3, seed=0):
    return np.random.default_rng(seed).normal(size=(num_samples, dim))


def test_identical_latents():
    z = latents()
    for mode in ("weak", "strong"):
        result = mcc(z, z, mode)
        assert result.value == pytest.approx(1.0)
        assert result.permutation == [0, 1, 2]


def test_strong_is_blind_to_scaling_and_permutation():
    z = latents()
    perm = np.array([2, 0, 1])
    est = z[:, perm] * np.array([3.0, -0.5, 2.0]) + np.array([1.0, 2.0, -4.0])
    result = mcc(z, est, "strong")
    assert result.value == pytest.approx(1.0)
    assert result.permutation == np.argsort(perm).tolist()


def test_weak_is_blind_to_any_affine_map():
    z = latents()
    mixing = np.random.default_rng(1).normal(size=(3, 3)) + 3.0 * np.eye(3)
    est = z @ mixing.T + 0.3
    assert mcc(z, est, "weak").value == pytest.approx(1.0, abs=1e-6)
    # mixing lowers the strong score
    assert mcc(z, est, "strong").value < 1.0


def well_conditioned_map(rng, dim, max_cond=1e3):
    while True:
        mixing = rng.normal(size=(dim, dim))
        if np.linalg.cond(mixing) < max_cond:
            return mixing


def test_weak_is_blind_to_random_affine_maps():
    rng = np.random.default_rng(7)
    for case in range(1000):
        dim = int(rng.integers(2, 6))
        z = latents(num_samples=200, dim=dim, seed=case)
        mixing = well_conditioned_map(rng, dim)
        est = z @ mixing.T + rng.normal(size=dim)
        result = mcc(z, est, "weak")
        assert result.value == pytest.approx(1.0, abs=1e-6)
        assert sorted(result.permutation) == list(range(dim))


def test_independent_latents_score_low():
    assert mcc(latents(seed=0, num_samples=5000), latents(seed=1, num_samples=5000)).value < 0.1


def test_zero_variance_dimension():
    z = latents()
    est = z.copy()
    est[:, 1] = 4.0
    result = mcc(z, est, "strong")
    assert result.zero_variance == [1]
    assert result.value == pytest.approx(2.0 / 3.0)
    with pytest.raises(NumericError):
        mcc(z, est, "weak")


def test_mcc_checks_inputs():
    with pytest.raises(ShapeError):
        mcc(latents(dim=3), latents(dim=2))
    with pytest.raises(ConfigError, match="mode"):
        mcc(latents(), latents(), "medium")


def test_alignment_identity():
    z = torch.as_tensor(latents())
    alignment = fit_affine_alignment(z, z)
    assert np.allclose(alignment.A, np.eye(3), atol=1e-10)
    assert np.allclose(alignment.b, 0.0, atol=1e-10)
    assert alignment.permutation.tolist() == [0, 1, 2]


def test_alignment_undoes_an_affine_map():
    z = latents()
    alignment = fit_affine_alignment(z, 2.0 * z + 1.0)
    assert np.allclose(alignment.A, 0.5 * np.eye(3), atol=1e-10)
    assert np.allclose(alignment.b, -0.5, atol=1e-10)
    assert np.allclose(alignment.scales, 0.5, atol=1e-10)
    assert np.allclose(alignment.apply(2.0 * z + 1.0), z, atol=1e-10)
    assert np.allclose(alignment.invert(z), 2.0 * z + 1.0, atol=1e-10)


def test_alignment_recovers_the_permutation():
    z = latents()
    perm = np.array([1, 2, 0])
    alignment = fit_affine_alignment(z, -3.0 * z[:, perm])
    assert alignment.permutation.tolist() == np.argsort(perm).tolist()
    assert np.allclose(alignment.scales, -1.0 / 3.0, atol=1e-10)
    assert np.allclose(alignment.D @ alignment.P, alignment.A, atol=1e-10)


def test_singular_alignment():
    z = latents()
    est = z.copy()
    est[:, 2] = est[:, 0]
    with pytest.raises(NumericError):
        fit_affine_alignment(z, est)
    with pytest.raises(NumericError):
        AffineAlignment.from_affine(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        fit_affine_alignment(z[:3], z[:3])
