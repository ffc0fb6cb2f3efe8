"""
The evaluation suite on one held-out split: regime F1, weak and strong MCC, causal-graph
F1 and mean-function L2 / R², collected into a MetricReport.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import pandas as pd
import torch

from isds.metrics.alignment import AffineAlignment, fit_affine_alignment
from isds.metrics.causal import causal_f1
from isds.metrics.mcc import mcc
from isds.metrics.mean_function import (
    all_windows,
    best_r2_permutation,
    mean_function_l2,
    partition_windows,
)
from isds.metrics.regime import regime_f1
from isds.models.msm.modeling_msm import MsmModel, msm_forward_backward
from isds.models.sds.graphs import DEFAULT_TAU, extract_regime_graphs
from isds.models.sds.modeling_sds import SdsModel, encode
from isds.modules.nnet import DTYPE
from isds.utils.config import check_positive
from isds.utils.exceptions import IsdsError
from isds.utils.io import dump_json
from isds.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class EvalConfig:
    tau: float = field(default=DEFAULT_TAU, metadata={"help": "Jacobian threshold of the extracted graphs."})
    best_r2: bool = field(
        default=True, metadata={"help": "Also report the regime matching that maximizes mean R²."}
    )
    seed: Optional[int] = field(default=None, metadata={"help": "Seed tag of the CSV row."})
    setting: str = field(default="custom", metadata={"help": "Setting tag of the CSV row."})

    def __post_init__(self):
        check_positive(self.tau, "tau", allow_zero=True)


@dataclass
class MetricReport:
    kind: str
    regime_f1: Optional[float] = None
    regime_permutation: Optional[list[int]] = None
    weak_mcc: Optional[float] = None
    strong_mcc: Optional[float] = None
    causal_f1: Optional[float] = None
    l2_err: Optional[float] = None
    r2: Optional[float] = None
    r2_best: Optional[float] = None
    r2_permutation: Optional[list[int]] = None
    alignment: Optional[dict] = None
    flags: list[str] = field(default_factory=list)

    def flag(self, message: str):
        logger.warning(message)
        self.flags.append(message)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, filepath):
        dump_json(self.to_dict(), filepath, indent=2)

    def to_row(self, **tags) -> dict:
        row = {k: v for k, v in self.to_dict().items() if not isinstance(v, (list, dict))}
        row["num_flags"] = len(self.flags)
        row.update(tags)
        return row


def write_metric_rows(rows: list[dict], filepath, append: bool = True) -> pd.DataFrame:
    """One row per (seed, setting); appends to an existing table."""
    frame = pd.DataFrame(rows)
    filepath = Path(filepath)
    if append and filepath.exists():
        frame = pd.concat([pd.read_csv(filepath), frame], ignore_index=True)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(filepath, index=False)
    return frame


@torch.no_grad()
def evaluate_model(
    model: Union[MsmModel, SdsModel],
    observations: Optional[torch.Tensor] = None,
    latents: Optional[torch.Tensor] = None,
    regimes: Optional[torch.Tensor] = None,
    truth=None,
    config: Optional[EvalConfig] = None,
) -> MetricReport:
    """
    `truth` is the ground-truth sidecar (or anything with `graphs` and `generator.prior`).
    An MsmModel is evaluated on `latents` without latent alignment; an SdsModel encodes
    `observations` by the encoder means and is aligned to `latents` by an affine fit.
    Metrics whose inputs are missing are skipped and flagged.
    """
    config = config or EvalConfig()
    is_sds = isinstance(model, SdsModel)
    prior = model.prior if is_sds else model
    report = MetricReport(kind="sds" if is_sds else "msm")

    if is_sds:
        if observations is None:
            raise ValueError("an SdsModel is evaluated on observations")
        inputs = torch.as_tensor(observations, dtype=DTYPE)
        est_z = encode(model, inputs)[0]
    else:
        if latents is None:
            raise ValueError("an MsmModel is evaluated on latents")
        inputs = est_z = torch.as_tensor(latents, dtype=DTYPE)

    if regimes is not None:
        gamma = msm_forward_backward(prior, est_z).transition_gamma
        true_s = torch.as_tensor(regimes)
        length = min(gamma.shape[-2], true_s.shape[-1])
        num_true = truth.generator.prior.num_regimes if truth is not None else None
        scored = regime_f1(true_s[..., -length:], gamma[..., -length:, :], num_regimes=num_true)
        report.regime_f1, report.regime_permutation = scored.f1, scored.permutation
        if scored.padded:
            report.flag(f"{prior.num_regimes} estimated regimes padded to the true count")
    else:
        report.flag("no true regimes, regime F1 skipped")

    alignment = None
    if latents is not None:
        true_z = torch.as_tensor(latents, dtype=DTYPE)
        try:
            if is_sds:
                alignment = fit_affine_alignment(true_z, est_z)
            else:
                alignment = AffineAlignment.identity(prior.latent_dim)
            report.alignment = alignment.to_dict()
            report.weak_mcc = mcc(true_z, est_z, "weak").value
            strong = mcc(true_z, est_z, "strong")
            report.strong_mcc = strong.value
            if strong.zero_variance:
                report.flag(f"estimated latents {strong.zero_variance} have zero variance")
        except IsdsError as err:
            report.flag(f"latent alignment failed: {err}")
    else:
        report.flag("no true latents, MCC and alignment skipped")

    if truth is None:
        report.flag("no ground-truth sidecar, mean-function and causal metrics skipped")
        return report
    true_prior = truth.generator.prior

    if alignment is not None:
        try:
            window_sets = partition_windows(true_prior, true_z)
            score = mean_function_l2(true_prior, prior, window_sets, alignment, report.regime_permutation)
            report.l2_err, report.r2 = score.l2, score.r2
            if score.skipped:
                report.flag(f"mean functions of regimes {score.skipped} skipped")
            if config.best_r2:
                report.r2_best, report.r2_permutation = best_r2_permutation(
                    true_prior, prior, all_windows(true_z, true_prior.lag), alignment
                )
        except IsdsError as err:
            report.flag(f"mean-function metrics failed: {err}")

    try:
        est_graphs = extract_regime_graphs(model, inputs, tau=config.tau)
        if est_graphs.unsupported:
            report.flag(f"regimes {est_graphs.unsupported} have no windows, graphs empty")
        latent_permutation = alignment.permutation.tolist() if alignment is not None else None
        report.causal_f1 = causal_f1(
            truth.graphs, est_graphs, report.regime_permutation, latent_permutation
        ).f1
    except (IsdsError, IndexError) as err:
        report.flag(f"causal F1 failed: {err}")
    return report
