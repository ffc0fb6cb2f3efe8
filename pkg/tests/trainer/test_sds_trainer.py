import functools
import json
import math
from pathlib import Path

import pytest
import torch

from isds.data.presets import setting_config
from isds.data.synthgen import generate_dataset
from isds.metrics import evaluate_model
from isds.models.msm import MsmConfig
from isds.models.sds import SdsConfig, SdsModel, encode, pca_fit
from isds.trainer import sds_trainer
from isds.trainer.sds_trainer import STAGES, TrainSchedule, lift_pca_init, train_sds
from isds.utils.exceptions import ConfigError, DivergenceError, NumericError

DTYPE = torch.float64
CONF_DIR = Path(__file__).resolve().parents[2] / "conf"


def small_model(seed=0):
    config = SdsConfig(
        obs_dim=4,
        msm=MsmConfig(num_regimes=2, lag=1, latent_dim=2, hidden_dims=[4], seed=seed),
        decoder_hidden_dims=[8],
        encoder_hidden_dims=[8],
        seed=seed,
    )
    return SdsModel(config)


def observations(num_sequences=8, seq_len=6, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(num_sequences, seq_len, 4, generator=generator, dtype=DTYPE)


def schedule(**kwargs):
    defaults = dict(
        init_msm_epochs=0,
        pretrain_epochs=0,
        warmup_epochs=0,
        final_epochs=0,
        restarts=1,
        msm_restarts=1,
        batch_size=4,
    )
    defaults.update(kwargs)
    return TrainSchedule(**defaults)


def test_default_schedule():
    default = TrainSchedule()
    assert default.msm_lr == 7e-3
    assert default.sds_lr == 5e-4
    assert default.restarts == 5
    assert default.msm_restarts == 3
    assert (default.final_decay_gamma, default.final_decay_every) == (0.8, 200)
    with pytest.raises(ConfigError, match="eta"):
        TrainSchedule(eta=-1.0)
    with pytest.raises(ConfigError, match="warmup_epochs"):
        TrainSchedule(warmup_epochs=-1)


def test_empty_schedule_returns_the_model():
    model = small_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    report = train_sds(model, observations(), schedule())
    assert report.kind == "sds"
    assert report.traces == {stage: [] for stage in STAGES}
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_pca_dims_must_match_latent_dim():
    with pytest.raises(ConfigError, match="pca_dims"):
        train_sds(small_model(), observations(), schedule(init_msm_epochs=1, pca_dims=3))


def test_pca_lift_is_exact():
    model = small_model()
    x = observations(20, 5)
    pca = pca_fit(x, 2)
    skipped = lift_pca_init(model, pca, TrainSchedule())
    assert skipped == []
    with torch.no_grad():
        projected = pca.project(x)
        assert torch.allclose(model.decode(projected), pca.inverse(projected), atol=1e-10)
        mean, var = encode(model, x)
    assert torch.allclose(mean, projected, atol=1e-10)
    assert torch.allclose(var, torch.full_like(var, 1e-2), rtol=1e-12)
    assert (model.obs_noise_diag >= 1e-3).all()


def test_pretrain_freezes_the_prior():
    model = small_model()
    prior_before = {k: v.clone() for k, v in model.prior.state_dict().items()}
    decoder_before = model.decoder.layers[0].weight.clone()
    train_sds(model, observations(), schedule(pretrain_epochs=2))
    for k, v in model.prior.state_dict().items():
        assert torch.equal(v, prior_before[k])
    assert not torch.equal(model.decoder.layers[0].weight, decoder_before)


def test_warmup_keeps_switching_parameters_bitwise():
    model = small_model()
    pi_before = model.prior.pi_logits.clone()
    q_before = model.prior.transition_logits.clone()
    means_before = model.prior.init_means.clone()
    train_sds(model, observations(), schedule(warmup_epochs=3))
    assert torch.equal(model.prior.pi_logits, pi_before)
    assert torch.equal(model.prior.transition_logits, q_before)
    assert not torch.equal(model.prior.init_means, means_before)
    assert all(p.requires_grad for p in model.parameters())


def test_full_schedule_with_restarts():
    model = small_model()
    report = train_sds(
        model,
        observations(),
        schedule(
            init_msm_epochs=2, pretrain_epochs=2, warmup_epochs=1, final_epochs=2, restarts=2, eta=0.01
        ),
    )
    for stage in STAGES:
        assert len(report.traces[stage]) == 2
    assert [len(t) for t in report.traces["pretrain"]] == [2, 2]
    assert [len(t) for t in report.traces["final"]] == [2, 2]
    assert all(1 <= len(t) <= 2 for t in report.traces["init_msm"])
    assert report.best_restart in (0, 1)
    assert report.best_objective == max(report.restart_objectives)
    assert all(math.isfinite(v) for v in report.restart_objectives)
    assert report.failures == []


def test_diverged_restart_is_skipped(monkeypatch):
    calls = {"count": 0}
    original = sds_trainer.elbo_objective

    def flaky(*args, **kwargs):
        calls["count"] += 1
        if calls["count"] == 1:
            raise NumericError("non-finite ELBO")
        return original(*args, **kwargs)

    monkeypatch.setattr(sds_trainer, "elbo_objective", flaky)
    report = train_sds(small_model(), observations(), schedule(pretrain_epochs=1, restarts=2))
    assert report.restart_objectives[0] is None
    assert report.best_restart == 1
    assert len(report.failures) == 1 and "pretrain" in report.failures[0]


def test_all_restarts_diverging_aborts(monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("non-finite ELBO")

    monkeypatch.setattr(sds_trainer, "elbo_objective", boom)
    with pytest.raises(DivergenceError, match="all 2 restarts diverged"):
        train_sds(small_model(), observations(), schedule(final_epochs=1, restarts=2))


@functools.lru_cache(maxsize=None)
def desk_scale_report(setting, seed):
    """Train with the shipped SDS configs on N = 2000, T = 100 and score on held-out data."""
    config = setting_config(setting, num_sequences=2000, num_heldout=200, seed=seed)
    train = generate_dataset(config, "train")
    heldout = generate_dataset(config, "heldout", generator=train.generator)
    model_fields = json.loads((CONF_DIR / "train" / "sds_model.json").read_text())
    msm = MsmConfig(
        **{
            **model_fields.pop("msm"),
            "num_regimes": config.num_regimes,
            "lag": config.lag,
            "latent_dim": config.latent_dim,
            "cov_mode": config.noise_mode,
            "seed": seed,
        }
    )
    model = SdsModel(SdsConfig(obs_dim=config.obs_dim, msm=msm, seed=seed, **model_fields))
    trainer_fields = json.loads((CONF_DIR / "train" / "sds.json").read_text())
    train_sds(model, train.observations, TrainSchedule(**{**trainer_fields, "restarts": 2, "seed": seed}))
    return evaluate_model(
        model,
        observations=heldout.observations,
        latents=heldout.latents,
        regimes=heldout.regimes,
        truth=heldout,
    )


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_constant_noise_recovers_regimes_and_affine_latents(seed):
    report = desk_scale_report("A", seed)
    assert report.regime_f1 >= 0.90
    assert report.weak_mcc >= 0.95


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_heterogeneous_noise_raises_strong_mcc(seed):
    report = desk_scale_report("B", seed)
    assert report.strong_mcc >= 0.85
    assert report.strong_mcc > desk_scale_report("A", seed).strong_mcc


@pytest.mark.slow
@pytest.mark.parametrize("setting", ["B", "C"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_causal_graphs_are_recovered(setting, seed):
    assert desk_scale_report(setting, seed).causal_f1 >= 0.80
