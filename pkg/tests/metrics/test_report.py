import pandas as pd
import pytest

from isds.data.presets import setting_config
from isds.data.synthgen import GeneratorConfig, generate_dataset
from isds.metrics import EvalConfig, MetricReport, evaluate_model, write_metric_rows
from isds.models.msm import MsmConfig, MsmModel
from isds.models.sds import SdsConfig, SdsModel


@pytest.fixture(scope="module")
def truth():
    config = GeneratorConfig(num_sequences=30, num_heldout=30, seq_len=40, obs_dim=5, seed=2)
    return generate_dataset(config, "heldout")


def test_generator_against_itself(truth):
    report = evaluate_model(
        truth.generator.prior, latents=truth.latents, regimes=truth.regimes, truth=truth
    )
    assert report.kind == "msm"
    assert report.strong_mcc == pytest.approx(1.0)
    assert report.weak_mcc == pytest.approx(1.0)
    assert report.regime_f1 > 0.5
    assert report.l2_err == pytest.approx(0.0, abs=1e-20)
    assert report.r2_best == pytest.approx(1.0)
    assert report.r2_permutation == list(range(3))
    assert report.regime_permutation == [0, 1, 2]
    assert report.causal_f1 == 1.0
    assert report.alignment["permutation"] == [0, 1, 2]


@pytest.mark.parametrize("setting", ["A", "B", "C"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generator_graphs_are_recovered_at_the_default_threshold(setting, seed):
    truth = generate_dataset(setting_config(setting, num_heldout=100, seed=seed), "heldout")
    report = evaluate_model(
        truth.generator.prior, latents=truth.latents, regimes=truth.regimes, truth=truth
    )
    assert report.regime_f1 > 0.9
    assert report.causal_f1 == 1.0


def test_missing_inputs_are_flagged(truth):
    report = evaluate_model(truth.generator.prior, latents=truth.latents)
    assert report.regime_f1 is None
    assert report.l2_err is None and report.causal_f1 is None
    assert any("regime F1 skipped" in flag for flag in report.flags)
    assert any("sidecar" in flag for flag in report.flags)
    with pytest.raises(ValueError):
        evaluate_model(truth.generator.prior, observations=truth.observations)


def test_sds_is_aligned_by_an_affine_fit(truth):
    msm = MsmConfig(num_regimes=2, lag=1, latent_dim=3, hidden_dims=[4])
    model = SdsModel(SdsConfig(obs_dim=5, msm=msm, decoder_hidden_dims=[6], encoder_hidden_dims=[6]))
    report = evaluate_model(
        model,
        observations=truth.observations,
        latents=truth.latents,
        regimes=truth.regimes,
        truth=truth,
        config=EvalConfig(best_r2=False),
    )
    assert report.kind == "sds"
    assert 0.0 <= report.strong_mcc <= 1.0
    assert 0.0 <= report.weak_mcc <= 1.0
    assert 0.0 <= report.regime_f1 <= 1.0
    assert report.r2_best is None
    assert len(report.alignment["A"]) == 3


def test_metric_rows(tmp_path):
    path = tmp_path / "metrics.csv"
    report = MetricReport(kind="msm", regime_f1=0.9, regime_permutation=[1, 0], flags=["x"])
    row = report.to_row(seed=0, setting="A")
    assert "regime_permutation" not in row and "flags" not in row
    assert row["num_flags"] == 1 and row["setting"] == "A"
    write_metric_rows([row], path)
    frame = write_metric_rows([report.to_row(seed=1, setting="A")], path)
    assert len(frame) == 2
    assert pd.read_csv(path)["seed"].tolist() == [0, 1]
