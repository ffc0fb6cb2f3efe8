from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import confusion_matrix

from isds.utils.exceptions import ShapeError
from isds.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class RegimeF1:
    f1: float
    permutation: list[int]  # true regime k <-> predicted regime permutation[k]
    padded: bool = False


def _labels(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x).reshape(-1)


def pairwise_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 of true class i scored against predicted class j, 0 where undefined."""
    support = confusion.sum(1, keepdims=True) + confusion.sum(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(support > 0, 2.0 * confusion / np.where(support > 0, support, 1), 0.0)


def regime_f1(true_s, pred_gamma, num_regimes: Optional[int] = None) -> RegimeF1:
    """
    Macro-F1 of the most likely predicted regimes under the label matching that maximizes
    it. `pred_gamma` holds posterior marginals with the predicted regimes on its last
    axis; `num_regimes` defaults to the largest true label + 1. True regimes that never
    occur do not enter the average.
    """
    if isinstance(pred_gamma, torch.Tensor):
        pred_gamma = pred_gamma.detach().cpu().numpy()
    pred_gamma = np.asarray(pred_gamma)
    true = _labels(true_s).astype(np.int64)
    num_pred = pred_gamma.shape[-1]
    pred = pred_gamma.reshape(-1, num_pred).argmax(-1)
    if true.shape != pred.shape:
        raise ShapeError(f"{true.shape[0]} true regimes against {pred.shape[0]} predictions")
    num_true = int(true.max()) + 1 if num_regimes is None else num_regimes

    padded = num_pred < num_true
    if padded:
        logger.warning(f"{num_pred} predicted regimes < {num_true} true ones, padding empty classes")
    size = max(num_true, num_pred)
    confusion = confusion_matrix(true, pred, labels=np.arange(size))[:num_true]
    scores = pairwise_f1(confusion)
    rows, cols = linear_sum_assignment(-scores)
    permutation = cols[np.argsort(rows)]
    present = np.bincount(true, minlength=num_true)[:num_true] > 0
    f1 = float(scores[np.arange(num_true), permutation][present].mean())
    return RegimeF1(f1=f1, permutation=permutation.tolist(), padded=padded)
