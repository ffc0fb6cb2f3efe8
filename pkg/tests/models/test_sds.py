import math

import pytest
import torch

from isds.data.synthgen import strengthen_edges
from isds.models.msm import MsmConfig, MsmModel, permute_regimes, sample_msm
from isds.models.sds import (
    SdsConfig,
    SdsModel,
    edge_strengths,
    elbo_and_gradients,
    elbo_objective,
    encode,
    extract_regime_graphs,
    graphs_from_masks,
    jacobian_penalty,
    pca_fit,
    reparameterized_sample,
)
from isds.models.sds.graphs import DEFAULT_TAU
from isds.modules.nnet import MaskedMlp
from isds.utils.exceptions import ConfigError, SequenceTooShortError, ShapeError

DTYPE = torch.float64


def small_sds(m=2, n=3, K=2, M=1, seed=0, encoder_activation="leaky_relu", hidden=8):
    config = SdsConfig(
        obs_dim=n,
        msm=MsmConfig(num_regimes=K, lag=M, latent_dim=m, hidden_dims=[4], seed=seed),
        decoder_hidden_dims=[hidden],
        encoder_hidden_dims=[hidden],
        encoder_activation=encoder_activation,
        seed=seed,
    )
    return SdsModel(config)


def test_config_rejects_obs_dim_below_latent_dim():
    with pytest.raises(ConfigError, match="obs_dim"):
        SdsConfig(obs_dim=2, msm=MsmConfig(latent_dim=3))


def test_encode_zero_weights():
    model = small_sds()
    with torch.no_grad():
        for net in (model.encoder_mean, model.encoder_logvar):
            for p in net.parameters():
                p.zero_()
    x = torch.randn(5, 3, dtype=DTYPE)
    mean, var = encode(model, x)
    assert torch.equal(mean, torch.zeros(5, 2, dtype=DTYPE))
    assert torch.equal(var, torch.ones(5, 2, dtype=DTYPE))


def test_encode_is_deterministic_and_checks_shape():
    model = small_sds()
    x = torch.randn(4, 3, dtype=DTYPE)
    first, second = encode(model, x), encode(model, x)
    assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])
    assert (first[1] > 0).all()
    with pytest.raises(ShapeError):
        encode(model, torch.randn(4, 2, dtype=DTYPE))


def test_reparameterized_sample():
    mean = torch.tensor([1.0, -2.0], dtype=DTYPE)
    var = torch.tensor([0.5, 2.0], dtype=DTYPE)
    assert torch.equal(reparameterized_sample(mean, var, torch.zeros(2, dtype=DTYPE)), mean)
    assert torch.allclose(
        reparameterized_sample(mean, torch.full((2,), 1e-12, dtype=DTYPE), torch.ones(2, dtype=DTYPE)),
        mean,
        atol=1e-5,
    )

    num_draws = 100_000
    generator = torch.Generator().manual_seed(0)
    noise = torch.randn(num_draws, 2, generator=generator, dtype=DTYPE)
    draws = reparameterized_sample(mean, var, noise)
    assert ((draws.mean(0) - mean).abs() <= 3 * (var / num_draws).sqrt()).all()


def test_decoder_acts_per_timestep():
    model = small_sds()
    z = torch.randn(2, 6, 2, dtype=DTYPE)
    batched = model.decode(z)
    for b in range(2):
        for t in range(6):
            assert torch.allclose(batched[b, t], model.decode(z[b, t]), rtol=0, atol=1e-14)


def test_elbo_terms_add_up():
    model = small_sds()
    x = torch.randn(3, 5, 3, dtype=DTYPE)
    estimate, objective = elbo_objective(model, x, n_mc=2, rng=torch.Generator().manual_seed(1))
    total = estimate.recon_term + estimate.entropy_term + estimate.prior_term
    assert math.isclose(estimate.elbo, total, rel_tol=1e-10, abs_tol=1e-10)
    assert estimate.reg_term == 0.0
    assert math.isclose(float(objective), estimate.objective, rel_tol=1e-12)
    assert estimate.n_mc == 2


def test_elbo_rejects_short_sequences():
    model = small_sds(M=2)
    with pytest.raises(SequenceTooShortError):
        elbo_objective(model, torch.randn(2, 3, dtype=DTYPE))


def test_regularizer_matches_penalty():
    model = small_sds()
    x = torch.randn(2, 5, 3, dtype=DTYPE)
    windows = torch.randn(7, 2, dtype=DTYPE)
    noise = torch.randn(1, 2, 5, 2, dtype=DTYPE)
    plain, _ = elbo_objective(model, x, noise=noise)
    regularized, _ = elbo_objective(model, x, eta=0.3, noise=noise, penalty_windows=windows)
    penalty = float(jacobian_penalty(model.prior, windows))
    assert plain.reg_term == 0.0
    assert penalty > 0
    assert math.isclose(regularized.reg_term, -0.3 * penalty, rel_tol=1e-12)
    assert math.isclose(regularized.elbo, plain.elbo, rel_tol=1e-12)


def test_elbo_is_below_log_evidence():
    config = SdsConfig(
        obs_dim=1,
        msm=MsmConfig(num_regimes=2, lag=1, latent_dim=1, hidden_dims=[4], seed=3),
        decoder_hidden_dims=[4],
        encoder_hidden_dims=[4],
        seed=3,
    )
    model = SdsModel(config)
    model.prior.set_switching(
        torch.tensor([0.6, 0.4], dtype=DTYPE), torch.tensor([[0.8, 0.2], [0.3, 0.7]], dtype=DTYPE)
    )
    model.prior.covariance.set_values(torch.tensor([[0.3], [0.5]], dtype=DTYPE))
    model.set_obs_noise(torch.tensor([0.3], dtype=DTYPE))
    x = torch.tensor([[0.3], [-0.2], [0.5]], dtype=DTYPE)

    num_points, bound = 81, 8.0
    grid = torch.linspace(-bound, bound, num_points, dtype=DTYPE)
    step = float(grid[1] - grid[0])
    with torch.no_grad():
        noise_std = model.obs_noise_diag.sqrt()
        # (G, T) log p(x_t | z_t = g)
        log_obs = torch.distributions.Normal(model.decode(grid[:, None]), noise_std).log_prob(x.T)
        z = torch.cartesian_prod(grid, grid, grid).unsqueeze(-1)
        log_prior = model.prior(z).view(num_points, num_points, num_points)
        log_joint = (
            log_prior
            + log_obs[:, 0, None, None]
            + log_obs[None, :, 1, None]
            + log_obs[None, None, :, 2]
        )
        log_evidence = float(torch.logsumexp(log_joint.flatten(), 0)) + 3 * math.log(step)

        rng = torch.Generator().manual_seed(0)
        samples = torch.tensor(
            [elbo_objective(model, x, n_mc=5, rng=rng)[0].elbo for _ in range(200)], dtype=DTYPE
        )
    standard_error = float(samples.std() / math.sqrt(len(samples)))
    assert float(samples.mean()) <= log_evidence + 3 * standard_error


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = small_sds(m=2, n=3, K=2, M=2, encoder_activation="softplus", hidden=6)
    model.prior.set_switching(
        torch.tensor([0.7, 0.3], dtype=DTYPE), torch.tensor([[0.9, 0.1], [0.2, 0.8]], dtype=DTYPE)
    )
    x = torch.randn(2, 5, 3, dtype=DTYPE)
    noise = torch.randn(1, 2, 5, 2, dtype=DTYPE)
    windows = torch.randn(8, 4, dtype=DTYPE)
    kwargs = dict(eta=0.1, noise=noise, penalty_windows=windows)
    _, grads = elbo_and_gradients(model, x, **kwargs)

    def value():
        return float(elbo_objective(model, x, **kwargs)[1])

    h = 1e-6
    generator = torch.Generator().manual_seed(1)
    for name, param in model.named_parameters():
        assert grads[name].shape == param.shape
        flat = param.view(-1)
        picks = torch.randperm(flat.numel(), generator=generator)[:3].tolist()
        for i in picks:
            with torch.no_grad():
                flat[i] += h
            upper = value()
            with torch.no_grad():
                flat[i] -= 2 * h
            lower = value()
            with torch.no_grad():
                flat[i] += h
            fd = (upper - lower) / (2 * h)
            exact = float(grads[name].view(-1)[i])
            assert abs(fd - exact) <= 1e-3 * abs(exact) + 1e-6, (name, i, fd, exact)

    groups = ("encoder_mean.", "encoder_logvar.", "decoder.", "obs_raw_var", "prior.")
    for prefix in groups:
        assert any(grads[n].abs().sum() > 0 for n in grads if n.startswith(prefix)), prefix


def test_frozen_parameters_get_zero_gradients():
    model = small_sds()
    model.prior.transition_logits.requires_grad_(False)
    _, grads = elbo_and_gradients(model, torch.randn(2, 4, 3, dtype=DTYPE))
    assert torch.equal(grads["prior.transition_logits"], torch.zeros(2, 2, dtype=DTYPE))
    assert grads["decoder.layers.0.weight"].abs().sum() > 0


def test_pca_recovers_a_line():
    direction = torch.tensor([1.0, 2.0, -2.0], dtype=DTYPE) / 3.0
    t = torch.linspace(-3, 3, 50, dtype=DTYPE)
    data = t[:, None] * direction + torch.tensor([1.0, 0.0, 5.0], dtype=DTYPE)
    pca = pca_fit(data, 1)
    assert pca.dims == 1
    assert math.isclose(abs(float(pca.components[0] @ direction)), 1.0, abs_tol=1e-10)
    assert torch.allclose(pca.inverse(pca.project(data)), data, atol=1e-10)


def test_pca_components_are_orthonormal():
    generator = torch.Generator().manual_seed(0)
    data = torch.randn(200, 6, generator=generator, dtype=DTYPE) * torch.arange(1, 7, dtype=DTYPE)
    pca = pca_fit(data, 4)
    eye = torch.eye(4, dtype=DTYPE)
    assert torch.allclose(pca.components @ pca.components.T, eye, atol=1e-10)
    ratios = pca.explained_variance_ratio
    assert (ratios[:-1] >= ratios[1:]).all()
    projected = pca.project(data)
    assert torch.allclose(projected, (data - pca.mean) @ pca.components.T, atol=1e-12)


def test_pca_degenerate_and_invalid_inputs():
    data = torch.zeros(30, 3, dtype=DTYPE)
    data[:, 0] = torch.linspace(0, 1, 30, dtype=DTYPE)
    assert pca_fit(data, 2).dims == 1
    assert pca_fit(data, 2, drop_degenerate=False).dims == 2
    with pytest.raises(ShapeError):
        pca_fit(data, 4)
    with pytest.raises(ShapeError):
        pca_fit(data[:1], 2)


def masked_prior(seed=0):
    generator = torch.Generator().manual_seed(seed)
    m, M, K = 3, 2, 2
    config = MsmConfig(num_regimes=K, lag=M, latent_dim=m, seed=seed)
    nets = []
    for k in range(K):
        dependency = torch.rand(m, m * M, generator=generator) < 0.5
        dependency[torch.arange(m), torch.arange(m)] = True
        nets.append(MaskedMlp(dependency, hidden_dims=(16,), seed=seed + k))
    model = MsmModel(config, mean_nets=nets)
    model.set_switching(
        torch.tensor([0.5, 0.5], dtype=DTYPE), torch.tensor([[0.9, 0.1], [0.1, 0.9]], dtype=DTYPE)
    )
    model.covariance.set_values(torch.tensor([[0.02, 0.03, 0.04], [0.06, 0.05, 0.08]], dtype=DTYPE))
    return model


def test_graphs_from_masks_layout():
    model = masked_prior()
    graphs = graphs_from_masks(model)
    assert tuple(graphs.adjacency.shape) == (2, 3, 3, 2)
    dependency = model.mean_nets[1].dependency
    # edge source i -> target j at lag l is dependency[j, l * m + i]
    assert bool(graphs.adjacency[1, 2, 0, 1]) == bool(dependency[0, 3 + 2])
    assert graphs.adjacency[:, torch.arange(3), torch.arange(3), 0].all()


def test_strengthened_edges_clear_the_bound():
    model = masked_prior()
    strengthen_edges(model, 0.2, num_sequences=100, seq_len=40, seed=5)
    z, s = sample_msm(model, 100, 40, seed=5)
    strengths = edge_strengths(model, z, s)
    dependency = torch.stack([net.dependency for net in model.mean_nets])
    assert (strengths[dependency] >= 0.2).all()
    assert (strengths[~dependency] == 0).all()


def test_extracted_graphs_match_masks():
    model = masked_prior()
    strengthen_edges(model, 4 * DEFAULT_TAU, num_sequences=200, seq_len=40, seed=7)
    z, _ = sample_msm(model, 10, 40, seed=1)
    graphs = extract_regime_graphs(model, z)
    truth = graphs_from_masks(model)
    assert graphs.unsupported == []
    assert torch.equal(graphs.adjacency, truth.adjacency)


def test_extracted_graphs_thresholds():
    model = masked_prior()
    z, _ = sample_msm(model, 5, 30, seed=2)
    assert not extract_regime_graphs(model, z, tau=math.inf).adjacency.any()

    dense = MsmModel(MsmConfig(num_regimes=2, lag=2, latent_dim=3, seed=0))
    dense.set_switching(
        torch.tensor([0.5, 0.5], dtype=DTYPE), torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=DTYPE)
    )
    graphs = extract_regime_graphs(dense, z, tau=0.0)
    for k in range(2):
        if k not in graphs.unsupported:
            assert graphs.adjacency[k].all()


def test_extracted_graphs_are_permutation_equivariant():
    model = masked_prior()
    z, _ = sample_msm(model, 10, 40, seed=3)
    graphs = extract_regime_graphs(model, z, tau=0.05)
    permuted = extract_regime_graphs(permute_regimes(model, [1, 0]), z, tau=0.05)
    assert torch.equal(permuted.adjacency, graphs.permute([1, 0]).adjacency)


def test_unreachable_regime_is_unsupported():
    model = masked_prior()
    z, _ = sample_msm(model, 4, 20, seed=4)
    model.set_switching(
        torch.tensor([1.0, 0.0], dtype=DTYPE), torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=DTYPE)
    )
    graphs = extract_regime_graphs(model, z)
    assert graphs.unsupported == [1]
    assert not graphs.adjacency[1].any()


def test_extract_from_sds_encodes_first():
    model = small_sds(m=2, n=3)
    x = torch.randn(3, 10, 3, dtype=DTYPE)
    with torch.no_grad():
        z = encode(model, x)[0]
    from_sds = extract_regime_graphs(model, x, tau=0.01)
    from_prior = extract_regime_graphs(model.prior, z, tau=0.01)
    assert torch.equal(from_sds.adjacency, from_prior.adjacency)
    assert from_sds.unsupported == from_prior.unsupported
