import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn
from tqdm import trange

from isds.callbacks.tensorboard import TraceWriter
from isds.models.msm.modeling_msm import (
    MsmModel,
    msm_forward_backward,
    msm_log_likelihood,
    msm_prior_surrogate,
)
from isds.modules.nnet import DTYPE, MaskedMlp
from isds.trainer.lr_scheduling import PlateauDecay
from isds.utils.config import check_positive
from isds.utils.exceptions import DivergenceError, NumericError, ShapeError
from isds.utils.io import dump_json
from isds.utils.logging import get_logger
from isds.utils.param import get_trainable_parameters
from isds.utils.seed import derive_seed, torch_generator

logger = get_logger(__name__)

PLATEAU_RULE = "relative improvement < {threshold} of |best| over {patience} epochs"


@dataclass
class OptimizerConfig:
    lr: float = field(default=7e-3, metadata={"help": "Adam learning rate."})
    batch_size: int = field(default=100, metadata={"help": "Sequences per mini-batch."})
    epochs: int = field(default=100, metadata={"help": "Maximum number of epochs."})
    restarts: int = field(
        default=3, metadata={"help": "Random restarts, the first one keeps the given init."}
    )
    plateau_patience: int = field(
        default=10, metadata={"help": "Epochs without improvement before a decay."}
    )
    plateau_threshold: float = field(
        default=1e-4, metadata={"help": "Relative improvement counted as progress."}
    )
    plateau_factor: float = field(default=0.5, metadata={"help": "Learning-rate decay factor."})
    max_lr_decays: int = field(
        default=2, metadata={"help": "Decays allowed before a plateau stops the run."}
    )
    seed: int = field(default=0, metadata={"help": "Seed of restarts and batch order."})
    tb_dir: Optional[str] = field(
        default=None, metadata={"help": "TensorBoard directory, no traces when unset."}
    )
    log_every: int = field(default=1, metadata={"help": "Epochs between log lines."})

    def __post_init__(self):
        check_positive(self.lr, "lr")
        check_positive(self.batch_size, "batch_size")
        check_positive(self.epochs, "epochs", allow_zero=True)
        check_positive(self.restarts, "restarts")
        check_positive(self.plateau_patience, "plateau_patience", allow_zero=True)
        check_positive(self.max_lr_decays, "max_lr_decays", allow_zero=True)


@dataclass
class FitReport:
    """
    Training traces of one fit. `traces[stage][r]` holds the per-epoch objective of
    restart r: mean log-likelihood for MSM stages, mean ELBO for SDS stages.
    """

    kind: str
    traces: dict[str, list[list[float]]] = field(default_factory=dict)
    restart_objectives: list[Optional[float]] = field(default_factory=list)
    best_restart: Optional[int] = None
    best_objective: Optional[float] = None
    lr_decays: dict[str, list[int]] = field(default_factory=dict)
    stopped_early: dict[str, list[bool]] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    decisions: dict[str, str] = field(default_factory=dict)
    model: Optional[nn.Module] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("model")
        return data

    def save(self, filepath):
        dump_json(self.to_dict(), filepath, indent=2)


def stack_dataset(dataset) -> torch.Tensor:
    """A (N, T, dim) tensor from a tensor or a nonempty list of equal-length (T, dim) trajectories."""
    if isinstance(dataset, torch.Tensor):
        data = dataset.to(DTYPE)
    else:
        if len(dataset) == 0:
            raise ShapeError("dataset is empty")
        data = torch.stack([torch.as_tensor(traj, dtype=DTYPE) for traj in dataset])
    if data.ndim != 3 or data.shape[0] == 0:
        raise ShapeError(f"expected a nonempty (N, T, dim) dataset, got {tuple(data.shape)}")
    return data


def apply_masks_(model: nn.Module):
    for module in model.modules():
        if isinstance(module, MaskedMlp):
            module.apply_masks_()


def _train_restart(
    model: MsmModel,
    data: torch.Tensor,
    opt: OptimizerConfig,
    restart: int,
    stage: str,
    trace_writer: TraceWriter,
):
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=opt.lr)
    plateau = PlateauDecay(
        optimizer,
        factor=opt.plateau_factor,
        patience=opt.plateau_patience,
        threshold=opt.plateau_threshold,
        max_decays=opt.max_lr_decays,
    )
    generator = torch_generator(opt.seed, stage, "batches", restart)
    num_sequences = data.shape[0]
    trace, stopped = [], False

    for epoch in trange(opt.epochs, desc=f"{stage} restart {restart}", leave=False):
        total = 0.0
        order = torch.randperm(num_sequences, generator=generator)
        for step, index in enumerate(order.split(opt.batch_size)):
            batch = data[index]
            try:
                marginals = msm_forward_backward(model, batch)
            except NumericError as err:
                raise DivergenceError(str(err), stage=stage, epoch=epoch, step=step) from err
            loglik = msm_prior_surrogate(model, batch, marginals)
            loss = -loglik.mean()
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite loss", stage=stage, epoch=epoch, step=step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            apply_masks_(model)
            total += float(loglik.detach().sum())

        objective = total / num_sequences
        trace.append(objective)
        trace_writer.on_epoch_end(stage, epoch, {"objective": objective, "lr": plateau.lr}, restart)
        if epoch % opt.log_every == 0 or epoch == opt.epochs - 1:
            logger.info(
                f"[{stage}] restart {restart} epoch {epoch}: loglik {objective:.4f}, lr {plateau.lr:.2e}"
            )
        if plateau.step(objective):
            stopped = True
            break
    return trace, plateau.num_decays, stopped


def fit_msm(
    model: MsmModel,
    dataset,
    opt: Optional[OptimizerConfig] = None,
    stage: str = "msm",
    trace_writer: Optional[TraceWriter] = None,
) -> FitReport:
    """
    Mini-batch Adam ascent on the mean log-likelihood, with gradients from the
    posterior-weighted decomposition. Restart 0 starts from `model` as given, later
    restarts from fresh parameters; the best restart by training log-likelihood is
    loaded back into `model`.
    """
    opt = opt or OptimizerConfig()
    data = stack_dataset(dataset)
    model.check_trajectory(data)
    trace_writer = trace_writer or TraceWriter(opt.tb_dir)
    report = FitReport(
        kind="msm",
        traces={stage: []},
        lr_decays={stage: []},
        stopped_early={stage: []},
        decisions={
            "plateau": PLATEAU_RULE.format(
                threshold=opt.plateau_threshold, patience=opt.plateau_patience
            ),
            "restart_selection": "highest training log-likelihood",
        },
        model=model,
    )
    if opt.epochs == 0:
        logger.info(f"[{stage}] zero epochs requested, model left unchanged")
        return report

    get_trainable_parameters(model, stage=stage)
    best_state, best_objective = None, -math.inf
    for restart in range(opt.restarts):
        candidate = copy.deepcopy(model)
        if restart > 0:
            candidate.reset_parameters(derive_seed(opt.seed, stage, "restart", restart))
        trace, num_decays, stopped = _train_restart(
            candidate, data, opt, restart, stage, trace_writer
        )
        with torch.no_grad():
            objective = float(msm_log_likelihood(candidate, data).mean())
        report.traces[stage].append(trace)
        report.lr_decays[stage].append(num_decays)
        report.stopped_early[stage].append(stopped)
        report.restart_objectives.append(objective)
        logger.info(f"[{stage}] restart {restart} finished with loglik {objective:.4f}")
        if objective > best_objective:
            best_state, best_objective = copy.deepcopy(candidate.state_dict()), objective
            report.best_restart = restart

    model.load_state_dict(best_state)
    report.best_objective = best_objective
    return report
