"""
Affine alignment of estimated latents to ground truth, true ≈ A · est + b, with A
decomposed as D · P (diagonal times permutation).
"""
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.linear_model import LinearRegression

from isds.utils.exceptions import NumericError, ShapeError

TOL_DET = 1e-8


def as_samples(z) -> np.ndarray:
    """(..., m) tensor or array -> (S, m) float64 array, pooled over sequences and time."""
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(-1, z.shape[-1])


def monomial_decomposition(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Permutation and diagonal of A ≈ D · P. `permutation[i]` is the column picked for row i,
    the per-row maximal absolute entry whenever those form a permutation.
    """
    rows, cols = linear_sum_assignment(-np.abs(A))
    permutation = cols[np.argsort(rows)]
    return permutation, A[np.arange(A.shape[0]), permutation]


@dataclass
class AffineAlignment:
    A: np.ndarray  # (m, m), maps estimated latents to true ones
    b: np.ndarray  # (m,)
    permutation: np.ndarray  # (m,), true latent i <-> estimated latent permutation[i]
    scales: np.ndarray  # (m,), diagonal of D

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1] or self.b.shape != self.A.shape[:1]:
            raise ShapeError(f"bad alignment shapes A {self.A.shape}, b {self.b.shape}")
        if abs(np.linalg.det(self.A)) <= TOL_DET:
            raise NumericError(f"alignment is singular, |det A| = {abs(np.linalg.det(self.A)):.3g}")

    @classmethod
    def from_affine(cls, A, b) -> "AffineAlignment":
        A = np.asarray(A, dtype=np.float64)
        permutation, scales = monomial_decomposition(A)
        return cls(A=A, b=np.asarray(b, dtype=np.float64), permutation=permutation, scales=scales)

    @classmethod
    def identity(cls, latent_dim: int) -> "AffineAlignment":
        return cls.from_affine(np.eye(latent_dim), np.zeros(latent_dim))

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    @property
    def P(self) -> np.ndarray:
        P = np.zeros_like(self.A)
        P[np.arange(self.latent_dim), self.permutation] = 1.0
        return P

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.scales)

    def apply(self, est):
        """Estimated -> true coordinates."""
        if isinstance(est, torch.Tensor):
            A, b = torch.as_tensor(self.A, dtype=est.dtype), torch.as_tensor(self.b, dtype=est.dtype)
            return est @ A.T + b
        return np.asarray(est) @ self.A.T + self.b

    def invert(self, true):
        """True -> estimated coordinates."""
        A_inv = np.linalg.inv(self.A)
        if isinstance(true, torch.Tensor):
            A_inv = torch.as_tensor(A_inv, dtype=true.dtype)
            return (true - torch.as_tensor(self.b, dtype=true.dtype)) @ A_inv.T
        return (np.asarray(true) - self.b) @ A_inv.T

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "permutation": self.permutation.tolist(),
            "scales": self.scales.tolist(),
        }


def fit_affine_alignment(true_z, est_z) -> AffineAlignment:
    """Least-squares (A, b) minimizing ||true - (A · est + b)||² over pooled samples."""
    true, est = as_samples(true_z), as_samples(est_z)
    if true.shape != est.shape:
        raise ShapeError(f"true latents {true.shape} and estimates {est.shape} differ")
    num_samples, latent_dim = est.shape
    if num_samples < latent_dim + 1:
        raise ShapeError(f"{num_samples} samples cannot determine a {latent_dim}-dim affine map")
    if np.linalg.matrix_rank(est - est.mean(0)) < latent_dim:
        raise NumericError("estimated latents are rank deficient, affine fit is not unique")
    regression = LinearRegression().fit(est, true)
    return AffineAlignment.from_affine(regression.coef_, regression.intercept_)
