"""
Grid sweeps over the number of regimes K and the lag M, scored by the held-out
log-likelihood (MSM) or ELBO (SDS), and the data-efficiency sweep over (N, T).
"""
import dataclasses
import time
from concurrent.futures import TimeoutError
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
from pebble import ProcessExpired, ProcessPool
from tqdm import tqdm

from isds.data.synthgen import GeneratorConfig, generate_dataset
from isds.metrics.report import EvalConfig, evaluate_model
from isds.models.msm.configuration_msm import MsmConfig
from isds.models.msm.modeling_msm import MsmModel, msm_log_likelihood
from isds.models.sds.configuration_sds import SdsConfig
from isds.models.sds.modeling_sds import SdsModel, elbo_objective
from isds.selection.elbow import ELBOW_RHO, ElbowChoice, first_small_gain
from isds.trainer.msm_trainer import OptimizerConfig, fit_msm
from isds.trainer.sds_trainer import TrainSchedule, train_sds
from isds.utils.config import check_choice, check_positive
from isds.utils.exceptions import ConfigError, IsdsError
from isds.utils.logging import get_logger
from isds.utils.seed import torch_generator

logger = get_logger(__name__)

MODEL_KINDS = ("msm", "sds")


@dataclass
class GridSpec:
    kind: str = field(default="msm", metadata={"help": f"Model family, one of {MODEL_KINDS}."})
    k_values: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5], metadata={"help": "Values of K."})
    m_values: List[int] = field(default_factory=lambda: [1], metadata={"help": "Values of the lag M."})
    seeds: List[int] = field(default_factory=lambda: [0], metadata={"help": "Training seeds per cell."})
    restarts: int = field(default=1, metadata={"help": "Training restarts per cell."})
    workers: int = field(default=1, metadata={"help": "Parallel cells, in-process when 1."})
    timeout: Optional[float] = field(default=None, metadata={"help": "Seconds allowed per cell."})
    rho: float = field(default=ELBOW_RHO, metadata={"help": "Elbow threshold on normalized gains."})

    def __post_init__(self):
        check_choice(self.kind, MODEL_KINDS, "kind")
        if not self.k_values or not self.m_values or not self.seeds:
            raise ConfigError("the grid is empty", field="k_values")
        for v in (*self.k_values, *self.m_values):
            check_positive(v, "k_values/m_values")
        self.k_values, self.m_values = sorted(set(self.k_values)), sorted(set(self.m_values))
        check_positive(self.restarts, "restarts")
        check_positive(self.workers, "workers")

    def cells(self) -> list[tuple[int, int, int]]:
        return [(k, m, s) for k in self.k_values for m in self.m_values for s in self.seeds]


@dataclass
class SelectionCell:
    num_regimes: int
    lag: int
    seed: int
    objective: Optional[float] = None
    runtime: float = 0.0
    error: Optional[str] = None


@dataclass
class SelectionGrid:
    k_values: list[int]
    m_values: list[int]
    cells: list[SelectionCell] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([dataclasses.asdict(c) for c in self.cells])
        frame = frame.rename(columns={"num_regimes": "K", "lag": "M"})
        return frame.sort_values(["K", "M", "seed"], ignore_index=True)

    def save_csv(self, filepath):
        self.to_frame()[["K", "M", "seed", "objective", "runtime", "error"]].to_csv(filepath, index=False)

    @property
    def failed(self) -> list[SelectionCell]:
        return [c for c in self.cells if c.objective is None]

    def mean_objectives(self) -> np.ndarray:
        """(len(k_values), len(m_values)) seed-averaged objectives, nan where every seed failed."""
        table = np.full((len(self.k_values), len(self.m_values)), np.nan)
        frame = self.to_frame().dropna(subset=["objective"])
        for (k, m), group in frame.groupby(["K", "M"]):
            table[self.k_values.index(k), self.m_values.index(m)] = group["objective"].mean()
        return table


@dataclass
class SelectionChoice:
    num_regimes: int
    lag: int
    k_elbow: ElbowChoice
    m_elbow: ElbowChoice


def select_from_grid(grid: SelectionGrid, rho: float = ELBOW_RHO) -> SelectionChoice:
    """
    K by the elbow of the best-over-M curve, then M by the elbow of the curve at that K.
    Failed cells are left out of the curves.
    """
    table = grid.mean_objectives()
    k_curve = np.nanmax(np.where(np.isnan(table), -np.inf, table), axis=1)
    k_ok = np.isfinite(k_curve)
    if not k_ok.any():
        raise IsdsError("every cell of the grid failed")
    k_values = [k for k, ok in zip(grid.k_values, k_ok) if ok]
    k_elbow = first_small_gain(k_curve[k_ok], rho)
    k_row = grid.k_values.index(k_values[k_elbow.index])
    m_ok = ~np.isnan(table[k_row])
    m_values = [m for m, ok in zip(grid.m_values, m_ok) if ok]
    m_elbow = first_small_gain(table[k_row][m_ok], rho)
    return SelectionChoice(
        num_regimes=k_values[k_elbow.index], lag=m_values[m_elbow.index], k_elbow=k_elbow, m_elbow=m_elbow
    )


def _build_model(kind: str, base: dict, num_regimes: int, lag: int, seed: int):
    """For SDS cells `base` holds SdsConfig fields, plus `msm` and `latent_dim` for the prior."""
    base = dict(base)
    msm = dict(base.pop("msm", {})) if kind == "sds" else base
    if kind == "sds" and "latent_dim" in base:
        msm["latent_dim"] = base.pop("latent_dim")
    msm.update(num_regimes=num_regimes, num_initial=None, lag=lag, seed=seed)
    if kind == "msm":
        return MsmModel(MsmConfig(**msm))
    sds = dict(base)
    sds.update(msm=MsmConfig(**msm), seed=seed)
    return SdsModel(SdsConfig(**sds))


def run_cell(
    kind: str,
    train,
    heldout,
    num_regimes: int,
    lag: int,
    seed: int,
    base: dict,
    trainer: dict,
) -> SelectionCell:
    """Train one (K, M, seed) cell and score it on the held-out data."""
    cell = SelectionCell(num_regimes=num_regimes, lag=lag, seed=seed)
    start = time.perf_counter()
    try:
        model = _build_model(kind, base, num_regimes, lag, seed)
        if kind == "msm":
            fit_msm(model, train, OptimizerConfig(**{**trainer, "seed": seed}))
            with torch.no_grad():
                cell.objective = float(msm_log_likelihood(model, heldout).mean())
        else:
            schedule = TrainSchedule(**{**trainer, "seed": seed})
            train_sds(model, train, schedule)
            with torch.no_grad():
                estimate, _ = elbo_objective(
                    model, heldout, n_mc=schedule.n_mc, rng=torch_generator(seed, "heldout_elbo")
                )
            cell.objective = float(estimate.elbo)
    except IsdsError as err:
        cell.error = f"{type(err).__name__}: {err}"
        logger.warning(f"cell K={num_regimes} M={lag} seed={seed} failed: {cell.error}")
    cell.runtime = time.perf_counter() - start
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def sweep(
    train,
    heldout,
    grid: GridSpec,
    base_config: Optional[dict] = None,
    trainer_config: Optional[dict] = None,
) -> SelectionGrid:
    """
    Train one model per (K, M, seed) cell and record its held-out objective. `base_config`
    holds MsmConfig (or SdsConfig) fields shared by every cell; `trainer_config` holds
    OptimizerConfig (or TrainSchedule) fields, with `restarts` taken from the grid.
    """
    if len(train) == 0 or len(heldout) == 0:
        raise ConfigError("selection needs nonempty training and held-out data", field="data")
    base = dict(base_config or {})
    trainer = {**(trainer_config or {}), "restarts": grid.restarts}
    jobs = [(grid.kind, train, heldout, k, m, s, base, trainer) for k, m, s in grid.cells()]
    result = SelectionGrid(k_values=list(grid.k_values), m_values=list(grid.m_values))

    if grid.workers == 1:
        for job in tqdm(jobs, desc="selection grid"):
            result.cells.append(run_cell(*job))
        return result

    process_bar = tqdm(total=len(jobs), desc="selection grid")
    with ProcessPool(max_workers=grid.workers) as pool:
        future = pool.map(_run_cell_args, jobs, timeout=grid.timeout)
        iterator = future.result()
        for k, m, s in grid.cells():
            try:
                cell = next(iterator)
            except StopIteration:
                break
            except TimeoutError:
                cell = SelectionCell(k, m, s, error=f"timed out after {grid.timeout}s")
            except ProcessExpired as err:
                cell = SelectionCell(k, m, s, error=f"worker died: {err}")
            if cell.error:
                logger.warning(f"cell K={k} M={m} seed={s}: {cell.error}")
            result.cells.append(cell)
            process_bar.update(1)
    process_bar.close()
    return result


def sweep_efficiency(
    generator_config: GeneratorConfig,
    sizes: list[tuple[int, int]],
    kind: str = "sds",
    base_config: Optional[dict] = None,
    trainer_config: Optional[dict] = None,
    eval_config: Optional[EvalConfig] = None,
) -> pd.DataFrame:
    """
    Regime F1 and aligned mean-function L2 of models trained on growing (N, T) draws of one
    generator, evaluated on the held-out split of each draw.
    """
    check_choice(kind, MODEL_KINDS, "kind")
    rows = []
    for num_sequences, seq_len in tqdm(sizes, desc="data efficiency"):
        config = dataclasses.replace(generator_config, num_sequences=num_sequences, seq_len=seq_len)
        train = generate_dataset(config, "train")
        heldout = generate_dataset(config, "heldout", generator=train.generator)
        model = _build_model(
            kind,
            {
                "latent_dim": config.latent_dim,
                **({"obs_dim": config.obs_dim} if kind == "sds" else {}),
                **(base_config or {}),
            },
            config.num_regimes,
            config.lag,
            config.seed,
        )
        row = {"N": num_sequences, "T": seq_len, "regime_f1": None, "l2_err": None, "error": None}
        try:
            if kind == "msm":
                fit_msm(model, train.latents, OptimizerConfig(**(trainer_config or {})))
            else:
                train_sds(model, train.observations, TrainSchedule(**(trainer_config or {})))
            report = evaluate_model(
                model,
                observations=heldout.observations,
                latents=heldout.latents,
                regimes=heldout.regimes,
                truth=heldout,
                config=eval_config,
            )
            row.update(regime_f1=report.regime_f1, l2_err=report.l2_err)
        except IsdsError as err:
            row["error"] = f"{type(err).__name__}: {err}"
            logger.warning(f"N={num_sequences} T={seq_len} failed: {row['error']}")
        rows.append(row)
    return pd.DataFrame(rows)
