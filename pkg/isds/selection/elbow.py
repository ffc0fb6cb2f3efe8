from dataclasses import dataclass
from typing import Sequence

import numpy as np

from isds.utils.exceptions import ShapeError

ELBOW_RHO = 0.05


@dataclass
class ElbowChoice:
    index: int
    gains: list[float]
    flat: bool = False


def range_normalized_gains(curve: Sequence[float]) -> tuple[np.ndarray, bool]:
    y = np.asarray(curve, dtype=np.float64)
    if not np.isfinite(y).all():
        raise ValueError(f"objective curve must be finite, got {y.tolist()}")
    spread = y.max() - y.min()
    if spread == 0:
        return np.zeros(len(y) - 1), True
    return np.diff(y) / spread, False


def first_small_gain(curve: Sequence[float], rho: float = ELBOW_RHO) -> ElbowChoice:
    """Index of the first point whose next gain is below `rho`; the last point if none is."""
    if len(curve) == 1:
        return ElbowChoice(index=0, gains=[])
    gains, flat = range_normalized_gains(curve)
    if flat:
        return ElbowChoice(index=0, gains=gains.tolist(), flat=True)
    small = np.flatnonzero(gains < rho)
    index = int(small[0]) if small.size else len(curve) - 1
    return ElbowChoice(index=index, gains=gains.tolist())


def elbow_select(curve: Sequence[float], rho: float = ELBOW_RHO) -> ElbowChoice:
    """
    Elbow of an objective curve ordered by growing model size. Gains are divided by the
    range of the curve, so the choice is unchanged under y -> a * y + c with a > 0.

    Example:
        >>> elbow_select([-10.0, -5.0, -4.9, -4.89]).index
        1
    """
    if len(curve) < 3:
        raise ShapeError(f"the elbow needs at least 3 points, got {len(curve)}")
    return first_small_gain(curve, rho)
