from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import f1_score

from isds.models.sds.graphs import RegimeGraphSet
from isds.utils.exceptions import ShapeError
from isds.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class CausalF1:
    f1: float
    per_regime: list[float]
    undefined: list[int] = field(default_factory=list)


def align_graphs(
    est_graphs: RegimeGraphSet,
    permutation: Optional[Sequence[int]] = None,
    latent_permutation: Optional[Sequence[int]] = None,
) -> RegimeGraphSet:
    """Regime k of the result is regime permutation[k]; lag matrices conjugated as P · E · Pᵀ."""
    if permutation is not None:
        est_graphs = est_graphs.permute(permutation)
    if latent_permutation is not None:
        est_graphs = est_graphs.relabel_latents(latent_permutation)
    return est_graphs


def causal_f1(
    true_graphs: RegimeGraphSet,
    est_graphs: RegimeGraphSet,
    permutation: Optional[Sequence[int]] = None,
    latent_permutation: Optional[Sequence[int]] = None,
) -> CausalF1:
    """
    Edge F1 per regime over all lags after regime and latent alignment, averaged over
    regimes. Regimes where both graphs are empty score 0 and are reported as undefined.
    """
    est_graphs = align_graphs(est_graphs, permutation, latent_permutation)
    if true_graphs.adjacency.shape != est_graphs.adjacency.shape:
        raise ShapeError(
            f"graph shapes differ: {tuple(true_graphs.adjacency.shape)} vs {tuple(est_graphs.adjacency.shape)}"
        )
    per_regime, undefined = [], []
    for k in range(true_graphs.num_regimes):
        true_edges = true_graphs.adjacency[k].reshape(-1).numpy()
        est_edges = est_graphs.adjacency[k].reshape(-1).numpy()
        if not true_edges.any() and not est_edges.any():
            undefined.append(k)
        per_regime.append(float(f1_score(true_edges, est_edges, zero_division=0.0)))
    if undefined:
        logger.warning(f"regimes {undefined} have no true and no estimated edges, F1 set to 0")
    return CausalF1(f1=float(np.mean(per_regime)), per_regime=per_regime, undefined=undefined)
