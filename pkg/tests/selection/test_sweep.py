import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from isds.data.synthgen import GeneratorConfig, generate_dataset
from isds.selection import (
    GridSpec,
    SelectionCell,
    SelectionGrid,
    run_cell,
    select_from_grid,
    sweep,
    sweep_efficiency,
)
from isds.selection.elbow import ELBOW_RHO
from isds.utils.exceptions import ConfigError, IsdsError

MSM_BASE = {"latent_dim": 2, "hidden_dims": [4]}
MSM_TRAINER = {"epochs": 2, "batch_size": 4}


@pytest.fixture(scope="module")
def data():
    config = GeneratorConfig(latent_dim=2, obs_dim=4, num_regimes=2, num_sequences=8, num_heldout=4, seq_len=10)
    train = generate_dataset(config)
    heldout = generate_dataset(config, "heldout", generator=train.generator)
    return train, heldout


def test_grid_spec():
    spec = GridSpec(k_values=[3, 1, 2, 3], m_values=[2, 1], seeds=[0, 1])
    assert spec.k_values == [1, 2, 3]
    assert spec.m_values == [1, 2]
    assert len(spec.cells()) == 12
    with pytest.raises(ConfigError):
        GridSpec(k_values=[])
    with pytest.raises(ConfigError):
        GridSpec(m_values=[0])
    with pytest.raises(ConfigError, match="kind"):
        GridSpec(kind="hmm")


def test_single_msm_cell(data):
    train, heldout = data
    grid = sweep(
        train.latents,
        heldout.latents,
        GridSpec(kind="msm", k_values=[2], m_values=[1]),
        base_config=MSM_BASE,
        trainer_config=MSM_TRAINER,
    )
    assert len(grid.cells) == 1
    cell = grid.cells[0]
    assert (cell.num_regimes, cell.lag, cell.seed) == (2, 1, 0)
    assert cell.error is None
    assert math.isfinite(cell.objective)
    assert cell.runtime > 0


def test_failed_cells_are_recorded(data, tmp_path):
    train, heldout = data
    grid = sweep(
        train.latents,
        heldout.latents,
        GridSpec(kind="msm", k_values=[1, 2], m_values=[1, 12]),
        base_config=MSM_BASE,
        trainer_config=MSM_TRAINER,
    )
    failed = grid.failed
    assert sorted((c.num_regimes, c.lag) for c in failed) == [(1, 12), (2, 12)]
    assert all("SequenceTooShortError" in c.error for c in failed)
    choice = select_from_grid(grid)
    assert choice.lag == 1
    assert choice.num_regimes in (1, 2)
    grid.save_csv(tmp_path / "selection.csv")
    assert (tmp_path / "selection.csv").read_text().splitlines()[0] == "K,M,seed,objective,runtime,error"


def test_single_sds_cell(data):
    train, heldout = data
    base = {
        "obs_dim": 4,
        "latent_dim": 2,
        "decoder_hidden_dims": [8],
        "encoder_hidden_dims": [8],
        "msm": {"hidden_dims": [4]},
    }
    trainer = dict(
        init_msm_epochs=1,
        pretrain_epochs=1,
        warmup_epochs=1,
        final_epochs=1,
        restarts=1,
        msm_restarts=1,
        batch_size=4,
    )
    cell = run_cell("sds", train.observations, heldout.observations, 2, 1, 0, base, trainer)
    assert cell.error is None
    assert math.isfinite(cell.objective)


def test_select_from_a_known_grid():
    cells = []
    objectives = {(1, 1): -10.0, (2, 1): -5.0, (3, 1): -4.95, (1, 2): -9.0, (2, 2): -4.0, (3, 2): -3.99}
    for (k, m), value in objectives.items():
        cells.append(SelectionCell(num_regimes=k, lag=m, seed=0, objective=value))
    grid = SelectionGrid(k_values=[1, 2, 3], m_values=[1, 2], cells=cells)
    table = grid.mean_objectives()
    assert np.allclose(table, [[-10.0, -9.0], [-5.0, -4.0], [-4.95, -3.99]])
    choice = select_from_grid(grid)
    assert (choice.num_regimes, choice.lag) == (2, 2)


def test_every_cell_failed():
    grid = SelectionGrid(k_values=[1], m_values=[1], cells=[SelectionCell(1, 1, 0, error="boom")])
    with pytest.raises(IsdsError):
        select_from_grid(grid)


def test_empty_data():
    with pytest.raises(ConfigError):
        sweep(torch.zeros(0, 5, 2), torch.zeros(0, 5, 2), GridSpec())


def test_data_efficiency_rows():
    config = GeneratorConfig(latent_dim=2, obs_dim=4, num_regimes=2, num_heldout=3, seed=1)
    frame = sweep_efficiency(
        config, [(4, 10), (6, 12)], kind="msm", base_config={"hidden_dims": [4]}, trainer_config=MSM_TRAINER
    )
    assert list(frame["N"]) == [4, 6]
    assert list(frame["T"]) == [10, 12]
    assert frame["error"].isna().all()
    assert ((frame["regime_f1"] >= 0) & (frame["regime_f1"] <= 1)).all()
    assert np.isfinite(frame["l2_err"].astype(float)).all()


@pytest.mark.slow
def test_grid_recovers_the_generating_order():
    conf_dir = Path(__file__).resolve().parents[2] / "conf"
    trainer = json.loads((conf_dir / "train" / "msm.json").read_text())
    chosen, at_top = 0, 0
    for seed in range(3):
        config = GeneratorConfig(
            latent_dim=3, obs_dim=3, num_regimes=3, lag=2, num_sequences=1000, num_heldout=200, seed=seed
        )
        train = generate_dataset(config)
        heldout = generate_dataset(config, "heldout", generator=train.generator)
        spec = GridSpec(kind="msm", k_values=[1, 2, 3, 4, 5], m_values=[1, 2, 3], seeds=[seed], restarts=2)
        grid = sweep(train.latents, heldout.latents, spec, {"latent_dim": 3, "hidden_dims": [16]}, trainer)
        assert grid.failed == []

        choice = select_from_grid(grid)
        chosen += (choice.num_regimes, choice.lag) == (3, 2)
        # maximized at the truth, or within the elbow tolerance of the maximum
        table = grid.mean_objectives()
        best, span = table.max(), table.max() - table.min()
        at_top += table[2, 1] >= best - ELBOW_RHO * span
    assert chosen >= 2
    assert at_top >= 2
