"""
Distances between true and estimated regime mean functions on held-out windows.

Estimated means are compared in true coordinates: every lag of a true window is moved
to estimated coordinates by the inverse alignment, the estimated mean is evaluated
there and mapped back, A · m̂(A⁻¹(w - b), σ(k)) + b.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from isds.metrics.alignment import AffineAlignment
from isds.models.msm.modeling_msm import MsmModel, msm_forward_backward, sliding_windows
from isds.models.sds.modeling_sds import SdsModel
from isds.modules.nnet import DTYPE
from isds.utils.exceptions import ShapeError
from isds.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class MeanFunctionScore:
    l2: float
    r2: float
    per_regime_l2: list[Optional[float]]
    per_regime_r2: list[Optional[float]]
    skipped: list[int] = field(default_factory=list)


def _prior(model: Union[MsmModel, SdsModel]) -> MsmModel:
    return model.prior if isinstance(model, SdsModel) else model


@torch.no_grad()
def partition_windows(model: MsmModel, z) -> list[torch.Tensor]:
    """Windows (z_{t-1}, ..., z_{t-M}) of `z` grouped by the most likely regime of s_t."""
    z = torch.as_tensor(z, dtype=DTYPE)
    if z.ndim == 2:
        z = z.unsqueeze(0)
    labels = msm_forward_backward(model, z).transition_gamma.argmax(-1).reshape(-1)
    windows = sliding_windows(z, model.lag).reshape(-1, model.window_dim)
    return [windows[labels == k] for k in range(model.num_regimes)]


def all_windows(z, lag: int) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=DTYPE)
    return sliding_windows(z, lag).reshape(-1, z.shape[-1] * lag)


def aligned_mean(
    net: torch.nn.Module, windows: torch.Tensor, alignment: AffineAlignment, lag: int
) -> torch.Tensor:
    latent_dim = alignment.latent_dim
    mapped = alignment.invert(windows.reshape(-1, lag, latent_dim)).reshape(windows.shape)
    return alignment.apply(net(mapped))


def _distances(true_net, est_net, windows, alignment, lag) -> tuple[float, float]:
    target = true_net(windows)
    l2 = float((target - aligned_mean(est_net, windows, alignment, lag)).pow(2).sum(-1).mean())
    variance = float((target - target.mean(0)).pow(2).sum(-1).mean())
    r2 = 1.0 - l2 / variance if variance > 0 else 0.0
    return l2, r2


@torch.no_grad()
def mean_function_l2(
    true_model: Union[MsmModel, SdsModel],
    est_model: Union[MsmModel, SdsModel],
    window_sets: Sequence[torch.Tensor],
    alignment: Optional[AffineAlignment] = None,
    permutation: Optional[Sequence[int]] = None,
) -> MeanFunctionScore:
    """
    Average squared L2 distance and R² between m(·, k) and the aligned m̂(·, σ(k)) over the
    windows in `window_sets[k]`. Without an alignment the latents are compared as they
    are; empty window sets are skipped.
    """
    true_prior, est_prior = _prior(true_model), _prior(est_model)
    if (true_prior.latent_dim, true_prior.lag) != (est_prior.latent_dim, est_prior.lag):
        raise ShapeError("true and estimated models differ in latent dim or lag")
    alignment = alignment or AffineAlignment.identity(true_prior.latent_dim)
    permutation = list(range(true_prior.num_regimes)) if permutation is None else list(permutation)
    if len(window_sets) != true_prior.num_regimes:
        raise ShapeError(f"{len(window_sets)} window sets for {true_prior.num_regimes} regimes")

    per_l2, per_r2, skipped = [], [], []
    for k, windows in enumerate(window_sets):
        if windows.shape[0] == 0 or permutation[k] >= est_prior.num_regimes:
            skipped.append(k)
            per_l2.append(None)
            per_r2.append(None)
            continue
        l2, r2 = _distances(
            true_prior.mean_nets[k], est_prior.mean_nets[permutation[k]], windows, alignment, true_prior.lag
        )
        per_l2.append(l2)
        per_r2.append(r2)
    if skipped:
        logger.warning(f"regimes {skipped} have no windows or no matched estimate, skipped")
    scored = [k for k in range(len(window_sets)) if k not in skipped]
    if not scored:
        raise ShapeError("no regime could be scored")
    return MeanFunctionScore(
        l2=float(np.mean([per_l2[k] for k in scored])),
        r2=float(np.mean([per_r2[k] for k in scored])),
        per_regime_l2=per_l2,
        per_regime_r2=per_r2,
        skipped=skipped,
    )


@torch.no_grad()
def best_r2_permutation(
    true_model: Union[MsmModel, SdsModel],
    est_model: Union[MsmModel, SdsModel],
    windows: torch.Tensor,
    alignment: Optional[AffineAlignment] = None,
) -> tuple[float, list[int]]:
    """
    Mean R² under the regime matching that maximizes it, every regime scored on all of
    `windows` rather than on a per-regime partition.
    """
    true_prior, est_prior = _prior(true_model), _prior(est_model)
    alignment = alignment or AffineAlignment.identity(true_prior.latent_dim)
    scores = np.array(
        [
            [_distances(true_net, est_net, windows, alignment, true_prior.lag)[1] for est_net in est_prior.mean_nets]
            for true_net in true_prior.mean_nets
        ]
    )
    rows, cols = linear_sum_assignment(-scores)
    permutation = cols[np.argsort(rows)]
    return float(scores[rows, cols].mean()), permutation.tolist()
