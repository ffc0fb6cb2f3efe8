from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from isds.metrics.alignment import as_samples, fit_affine_alignment
from isds.utils.config import check_choice
from isds.utils.exceptions import ShapeError
from isds.utils.logging import get_logger

logger = get_logger(__name__)

MCC_MODES = ("weak", "strong")


@dataclass
class MccResult:
    value: float
    mode: str
    permutation: list[int]  # true latent i <-> estimated latent permutation[i]
    zero_variance: list[int] = field(default_factory=list)


def abs_correlation(true: np.ndarray, est: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """
    |Pearson correlation| between every true and estimated dimension, (m, m). Pairs with
    a zero-variance dimension get 0; those estimated dimensions are returned as well.
    """
    true_c, est_c = true - true.mean(0), est - est.mean(0)
    true_std, est_std = true_c.std(0), est_c.std(0)
    cov = true_c.T @ est_c / true.shape[0]
    denom = np.outer(true_std, est_std)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, np.abs(cov) / np.where(denom > 0, denom, 1.0), 0.0)
    zero_variance = np.flatnonzero(est_std == 0).tolist()
    return np.clip(corr, 0.0, 1.0), zero_variance


def mcc(true_z, est_z, mode: str = "strong") -> MccResult:
    """
    Mean correlation coefficient over pooled samples.

    strong: optimal one-to-one matching of |correlations|, blind to scaling and permutation.
    weak: estimates are first mapped by the least-squares affine fit, then correlated
    dimension by dimension.
    """
    check_choice(mode, MCC_MODES, "mode")
    true, est = as_samples(true_z), as_samples(est_z)
    if true.shape != est.shape:
        raise ShapeError(f"true latents {true.shape} and estimates {est.shape} differ")
    if mode == "weak":
        alignment = fit_affine_alignment(true, est)
        corr, zero_variance = abs_correlation(true, alignment.apply(est))
        value = float(np.mean(np.diag(corr)))
        permutation = alignment.permutation.tolist()
    else:
        corr, zero_variance = abs_correlation(true, est)
        rows, cols = linear_sum_assignment(-corr)
        value = float(corr[rows, cols].mean())
        permutation = cols[np.argsort(rows)].tolist()
    if zero_variance:
        logger.warning(f"estimated dims {zero_variance} have zero variance, correlation set to 0")
    return MccResult(value=value, mode=mode, permutation=permutation, zero_variance=zero_variance)
