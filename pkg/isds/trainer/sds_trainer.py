"""
Four-stage training of a switching dynamical system:

1. init_msm: PCA of the observations, an MSM fitted on the projections and lifted into
   the prior; decoder and encoder mean start as the exact PCA inverse and projection
2. pretrain: encoder, decoder and observation noise with the prior parameters frozen
3. warmup: everything but the switching parameters pi and Q
4. final: all parameters, with step decay of the learning rate
"""
import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch.optim.lr_scheduler import StepLR
from tqdm import trange

from isds.callbacks.tensorboard import TraceWriter
from isds.models.sds.modeling_sds import SdsModel, elbo_objective
from isds.models.sds.pca import PcaResult, pca_fit
from isds.modules.nnet import init_affine_passthrough
from isds.trainer.msm_trainer import FitReport, OptimizerConfig, apply_masks_, fit_msm, stack_dataset
from isds.utils.config import check_positive
from isds.utils.exceptions import ConfigError, DivergenceError, NumericError, ShapeError
from isds.utils.logging import get_logger
from isds.utils.param import get_trainable_parameters, set_requires_grad
from isds.utils.seed import derive_seed, torch_generator

logger = get_logger(__name__)

STAGES = ("init_msm", "pretrain", "warmup", "final")
SWITCHING_PARAMS = ("pi_logits", "transition_logits", "initial_transition_logits")


@dataclass
class TrainSchedule:
    init_msm_epochs: int = field(default=40, metadata={"help": "Epochs of the MSM fit on PCA projections."})
    pretrain_epochs: int = field(default=40, metadata={"help": "Encoder-decoder epochs, prior frozen."})
    warmup_epochs: int = field(default=10, metadata={"help": "Joint epochs with pi and Q frozen."})
    final_epochs: int = field(default=700, metadata={"help": "Epochs with every parameter trained."})
    msm_lr: float = field(default=7e-3, metadata={"help": "Learning rate of the MSM stage."})
    sds_lr: float = field(default=5e-4, metadata={"help": "Learning rate of the later stages."})
    final_decay_gamma: float = field(default=0.8, metadata={"help": "Step decay factor in the final stage."})
    final_decay_every: int = field(default=200, metadata={"help": "Epochs between final-stage decays."})
    pca_dims: Optional[int] = field(
        default=None, metadata={"help": "PCA dimension, defaults to (and must equal) the latent dim."}
    )
    restarts: int = field(default=5, metadata={"help": "Restarts of the whole schedule."})
    msm_restarts: int = field(default=3, metadata={"help": "Restarts inside the MSM stage."})
    batch_size: int = field(default=100, metadata={"help": "Sequences per mini-batch."})
    n_mc: int = field(default=1, metadata={"help": "Monte-Carlo samples per ELBO evaluation."})
    eta: float = field(default=0.0, metadata={"help": "Weight of the transition Jacobian l1 penalty."})
    penalty_batch: int = field(default=64, metadata={"help": "Windows in the Jacobian penalty batch."})
    encoder_init_var: float = field(
        default=1e-2, metadata={"help": "Encoder variance right after the PCA initialization."}
    )
    min_init_obs_var: float = field(
        default=1e-3, metadata={"help": "Lower bound of the PCA residual observation variance."}
    )
    seed: int = field(default=0, metadata={"help": "Seed of restarts, batches and MC noise."})
    tb_dir: Optional[str] = field(default=None, metadata={"help": "TensorBoard directory."})
    log_every: int = field(default=1, metadata={"help": "Epochs between log lines."})

    def __post_init__(self):
        for name in ("init_msm_epochs", "pretrain_epochs", "warmup_epochs", "final_epochs"):
            check_positive(getattr(self, name), name, allow_zero=True)
        check_positive(self.msm_lr, "msm_lr")
        check_positive(self.sds_lr, "sds_lr")
        check_positive(self.final_decay_gamma, "final_decay_gamma")
        check_positive(self.final_decay_every, "final_decay_every")
        check_positive(self.restarts, "restarts")
        check_positive(self.msm_restarts, "msm_restarts")
        check_positive(self.batch_size, "batch_size")
        check_positive(self.n_mc, "n_mc")
        check_positive(self.eta, "eta", allow_zero=True)
        check_positive(self.penalty_batch, "penalty_batch")
        if self.pca_dims is not None:
            check_positive(self.pca_dims, "pca_dims")

    def stage_epochs(self, stage: str) -> int:
        return getattr(self, f"{stage}_epochs")


@torch.no_grad()
def lift_pca_init(model: SdsModel, pca: PcaResult, schedule: TrainSchedule) -> list[str]:
    """
    Decoder := PCA inverse, encoder mean := PCA projection, constant encoder variance and
    observation noise from the PCA residual. Returns the parts left at their random init.
    """
    skipped = []
    components = pca.components
    try:
        init_affine_passthrough(model.decoder, components.T, pca.mean)
    except ShapeError as err:
        logger.warning(f"decoder keeps its random init: {err}")
        skipped.append("decoder")
    if model.encoder_mean.is_piecewise_linear:
        try:
            init_affine_passthrough(model.encoder_mean, components, -components @ pca.mean)
        except ShapeError as err:
            logger.warning(f"encoder mean keeps its random init: {err}")
            skipped.append("encoder_mean")
    else:
        skipped.append("encoder_mean")
    last = model.encoder_logvar.layers[-1]
    last.weight.zero_()
    last.bias.fill_(math.log(schedule.encoder_init_var))
    obs_var = pca.residual_variance.clamp_min(schedule.min_init_obs_var)
    model.set_obs_noise(obs_var.clamp_min(2 * model.config.var_floor))
    return skipped


def freeze_for_stage(model: SdsModel, stage: str):
    set_requires_grad(model.parameters(), True)
    if stage == "pretrain":
        set_requires_grad(model.prior.parameters(), False)
    elif stage == "warmup":
        for name in SWITCHING_PARAMS:
            param = getattr(model.prior, name)
            if param is not None:
                param.requires_grad_(False)


def _train_stage(
    model: SdsModel,
    data: torch.Tensor,
    stage: str,
    schedule: TrainSchedule,
    restart: int,
    trace: list,
    trace_writer: TraceWriter,
):
    epochs = schedule.stage_epochs(stage)
    freeze_for_stage(model, stage)
    get_trainable_parameters(model, stage=stage)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=schedule.sds_lr)
    scheduler = None
    if stage == "final":
        scheduler = StepLR(
            optimizer, step_size=schedule.final_decay_every, gamma=schedule.final_decay_gamma
        )
    batch_rng = torch_generator(schedule.seed, stage, "batches", restart)
    noise_rng = torch_generator(schedule.seed, stage, "noise", restart)
    num_sequences = data.shape[0]

    for epoch in trange(epochs, desc=f"{stage} restart {restart}", leave=False):
        total = 0.0
        order = torch.randperm(num_sequences, generator=batch_rng)
        for step, index in enumerate(order.split(schedule.batch_size)):
            try:
                estimate, objective = elbo_objective(
                    model,
                    data[index],
                    n_mc=schedule.n_mc,
                    eta=schedule.eta,
                    rng=noise_rng,
                    penalty_batch=schedule.penalty_batch,
                )
            except NumericError as err:
                raise DivergenceError(str(err), stage=stage, epoch=epoch, step=step) from err
            optimizer.zero_grad()
            (-objective).backward()
            optimizer.step()
            apply_masks_(model)
            total += estimate.elbo * len(index)

        elbo = total / num_sequences
        lr = optimizer.param_groups[0]["lr"]
        trace.append(elbo)
        trace_writer.on_epoch_end(stage, epoch, {"objective": elbo, "lr": lr}, restart)
        if epoch % schedule.log_every == 0 or epoch == epochs - 1:
            logger.info(f"[{stage}] restart {restart} epoch {epoch}: elbo {elbo:.4f}, lr {lr:.2e}")
        if scheduler is not None:
            scheduler.step()
    set_requires_grad(model.parameters(), True)


def _init_msm_stage(
    model: SdsModel,
    data: torch.Tensor,
    pca: PcaResult,
    schedule: TrainSchedule,
    restart: int,
    trace_writer: TraceWriter,
):
    opt = OptimizerConfig(
        lr=schedule.msm_lr,
        batch_size=schedule.batch_size,
        epochs=schedule.init_msm_epochs,
        restarts=schedule.msm_restarts,
        seed=derive_seed(schedule.seed, "init_msm", restart),
        log_every=schedule.log_every,
    )
    projections = pca.project(data)
    msm_report = fit_msm(model.prior, projections, opt, stage="init_msm", trace_writer=trace_writer)
    skipped = lift_pca_init(model, pca, schedule)
    return msm_report, skipped


def train_sds(
    model: SdsModel,
    dataset,
    schedule: Optional[TrainSchedule] = None,
    trace_writer: Optional[TraceWriter] = None,
) -> FitReport:
    """
    Runs the four stages `schedule.restarts` times, restart 0 from `model` as given and
    later ones from fresh parameters. A restart that diverges is recorded and skipped;
    the restart with the highest training ELBO is loaded back into `model`.
    """
    schedule = schedule or TrainSchedule()
    data = stack_dataset(dataset)
    if data.shape[-1] != model.obs_dim:
        raise ShapeError(f"expected observations of size {model.obs_dim}, got {data.shape[-1]}")
    pca_dims = schedule.pca_dims or model.latent_dim
    if pca_dims != model.latent_dim:
        raise ConfigError(
            f"pca_dims {pca_dims} must equal the latent dim {model.latent_dim}", field="pca_dims"
        )
    trace_writer = trace_writer or TraceWriter(schedule.tb_dir)
    report = FitReport(
        kind="sds",
        traces={stage: [] for stage in STAGES},
        lr_decays={"init_msm": []},
        stopped_early={"init_msm": []},
        decisions={
            "decoder_init": "exact PCA inverse through a Leaky ReLU pass-through",
            "encoder_init": "mean is the exact PCA projection, variance constant",
            "restart_selection": "highest training ELBO",
            "n_mc": str(schedule.n_mc),
        },
        model=model,
    )
    if all(schedule.stage_epochs(stage) == 0 for stage in STAGES):
        logger.info("all stages have zero epochs, model left unchanged")
        return report

    pca = None
    if schedule.init_msm_epochs > 0:
        pca = pca_fit(data, pca_dims, drop_degenerate=False)
        logger.info(
            f"PCA to {pca_dims} dims keeps {float(pca.explained_variance_ratio.sum()):.4f} of the variance"
        )

    eval_rng_seed = derive_seed(schedule.seed, "restart_selection")
    best_state, best_objective, last_error = None, -math.inf, None
    for restart in range(schedule.restarts):
        candidate = copy.deepcopy(model)
        if restart > 0:
            candidate.reset_parameters(derive_seed(schedule.seed, "restart", restart))
        traces = {stage: [] for stage in STAGES}
        try:
            if pca is not None:
                msm_report, skipped = _init_msm_stage(
                    candidate, data, pca, schedule, restart, trace_writer
                )
                traces["init_msm"] = msm_report.traces["init_msm"][msm_report.best_restart]
                report.lr_decays["init_msm"].append(msm_report.lr_decays["init_msm"][msm_report.best_restart])
                report.stopped_early["init_msm"].append(
                    msm_report.stopped_early["init_msm"][msm_report.best_restart]
                )
                if skipped:
                    report.decisions[f"restart_{restart}_random_init"] = ", ".join(skipped)
            for stage in STAGES[1:]:
                _train_stage(candidate, data, stage, schedule, restart, traces[stage], trace_writer)
            with torch.no_grad():
                estimate, _ = elbo_objective(
                    candidate,
                    data,
                    n_mc=schedule.n_mc,
                    rng=torch_generator(eval_rng_seed),
                )
            objective = estimate.elbo
        except DivergenceError as err:
            logger.warning(f"restart {restart} diverged: {err}")
            report.failures.append(f"restart {restart}: {err}")
            last_error, objective = err, None
        except NumericError as err:
            logger.warning(f"restart {restart} ended with a non-finite ELBO: {err}")
            report.failures.append(f"restart {restart}: {err}")
            last_error = DivergenceError(str(err), stage="restart_selection")
            objective = None

        for stage in STAGES:
            report.traces[stage].append(traces[stage])
        report.restart_objectives.append(objective)
        if objective is not None:
            logger.info(f"restart {restart} finished with elbo {objective:.4f}")
            if objective > best_objective:
                best_state, best_objective = copy.deepcopy(candidate.state_dict()), objective
                report.best_restart = restart

    if best_state is None:
        raise DivergenceError(
            f"all {schedule.restarts} restarts diverged, last: {last_error}",
            stage=getattr(last_error, "stage", None),
        )
    model.load_state_dict(best_state)
    report.best_objective = best_objective
    return report
