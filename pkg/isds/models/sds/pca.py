from dataclasses import dataclass

import numpy as np
import torch
from sklearn.decomposition import PCA

from isds.modules.nnet import DTYPE
from isds.utils.exceptions import ShapeError
from isds.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class PcaResult:
    components: torch.Tensor  # (dims, n), orthonormal rows
    mean: torch.Tensor  # (n,)
    explained_variance_ratio: torch.Tensor  # (dims,), nonincreasing
    explained_variance: torch.Tensor  # (dims,)
    residual_variance: torch.Tensor  # (n,), per-coordinate variance left after projection

    @property
    def dims(self) -> int:
        return self.components.shape[0]

    def project(self, x) -> torch.Tensor:
        """(..., n) -> (..., dims)"""
        x = torch.as_tensor(x, dtype=DTYPE)
        return (x - self.mean) @ self.components.T

    def inverse(self, y) -> torch.Tensor:
        """(..., dims) -> (..., n)"""
        y = torch.as_tensor(y, dtype=DTYPE)
        return y @ self.components + self.mean


def pca_fit(data, dims: int, drop_degenerate: bool = True, rank_tol: float = 1e-10) -> PcaResult:
    """
    Principal directions of the rows of `data`, given as (..., n) or a list of (T, n)
    trajectories. Directions with variance below `rank_tol` times the largest one are
    dropped with a warning unless `drop_degenerate` is off.
    """
    if isinstance(data, (list, tuple)):
        rows = [torch.as_tensor(d, dtype=DTYPE) for d in data]
        data = torch.cat([r.reshape(-1, r.shape[-1]) for r in rows])
    data = torch.as_tensor(data, dtype=DTYPE)
    x = data.reshape(-1, data.shape[-1]).numpy()
    num_samples, obs_dim = x.shape
    if not 0 < dims <= obs_dim:
        raise ShapeError(f"cannot keep {dims} components of {obs_dim}-dimensional data")
    if num_samples < dims:
        raise ShapeError(f"{num_samples} samples are too few for {dims} components")

    pca = PCA(n_components=dims, svd_solver="full").fit(x)
    variance = pca.explained_variance_
    if variance.max() <= 0:
        raise ShapeError("data has no variance")
    rank = int((variance > rank_tol * variance.max()).sum())
    keep = dims
    if rank < dims:
        logger.warning(f"data covariance has rank {rank} < {dims} requested components")
        if drop_degenerate:
            keep = rank

    components = pca.components_[:keep]
    centered = x - pca.mean_
    residual = centered - centered @ components.T @ components
    return PcaResult(
        components=torch.as_tensor(components, dtype=DTYPE),
        mean=torch.as_tensor(pca.mean_, dtype=DTYPE),
        explained_variance_ratio=torch.as_tensor(pca.explained_variance_ratio_[:keep], dtype=DTYPE),
        explained_variance=torch.as_tensor(variance[:keep], dtype=DTYPE),
        residual_variance=torch.as_tensor(np.var(residual, axis=0), dtype=DTYPE),
    )
