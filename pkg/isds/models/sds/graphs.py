"""
Regime-dependent lagged causal graphs. `adjacency[k, i, j, l]` is the edge from latent
i to latent j at lag l + 1 under regime k.
"""
from dataclasses import dataclass, field
from typing import Sequence, Union

import torch

from isds.models.msm.modeling_msm import MsmModel, msm_forward_backward, sliding_windows
from isds.models.sds.modeling_sds import SdsModel, encode
from isds.modules.nnet import DTYPE, MaskedMlp, mlp_jacobian
from isds.utils.logging import get_logger

logger = get_logger(__name__)

DEFAULT_TAU = 0.05


@dataclass
class RegimeGraphSet:
    adjacency: torch.Tensor  # (K, m, m, M) bool
    unsupported: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = torch.as_tensor(self.adjacency, dtype=torch.bool)
        if self.adjacency.ndim != 4 or self.adjacency.shape[1] != self.adjacency.shape[2]:
            raise ValueError(f"expected a (K, m, m, M) adjacency, got {tuple(self.adjacency.shape)}")

    @property
    def num_regimes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.adjacency.shape[1]

    @property
    def lag(self) -> int:
        return self.adjacency.shape[3]

    def num_edges(self) -> list[int]:
        return self.adjacency.flatten(1).sum(-1).tolist()

    def permute(self, perm: Sequence[int]) -> "RegimeGraphSet":
        """Regime k of the result is regime perm[k] of this set."""
        perm = list(perm)
        unsupported = sorted(k for k, old in enumerate(perm) if old in self.unsupported)
        return RegimeGraphSet(self.adjacency[perm], unsupported)

    def relabel_latents(self, perm: Sequence[int]) -> "RegimeGraphSet":
        """Latent i of the result is latent perm[i] of this set."""
        perm = torch.as_tensor(perm, dtype=torch.long)
        return RegimeGraphSet(self.adjacency[:, perm][:, :, perm], list(self.unsupported))

    def to_dict(self) -> dict:
        return {"adjacency": self.adjacency.int().tolist(), "unsupported": list(self.unsupported)}

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeGraphSet":
        return cls(torch.tensor(data["adjacency"], dtype=torch.bool), list(data["unsupported"]))


def _to_adjacency(scores: torch.Tensor, latent_dim: int, lag: int) -> torch.Tensor:
    """(m target, m * M window) -> (m source, m target, M)"""
    return scores.reshape(latent_dim, lag, latent_dim).permute(2, 0, 1)


def graphs_from_masks(prior: MsmModel) -> RegimeGraphSet:
    """Graphs declared by the dependency patterns of masked transition means."""
    adjacency = []
    for net in prior.mean_nets:
        if not isinstance(net, MaskedMlp):
            raise TypeError("graphs_from_masks needs MaskedMlp transition means")
        adjacency.append(_to_adjacency(net.dependency, prior.latent_dim, prior.lag))
    return RegimeGraphSet(torch.stack(adjacency))


def extract_regime_graphs(
    model: Union[MsmModel, SdsModel], trajectories, tau: float = DEFAULT_TAU
) -> RegimeGraphSet:
    """
    Threshold the mean absolute transition Jacobian over the windows assigned to
    each regime by their most likely posterior regime. Trajectories are latents for
    an MsmModel and observations for an SdsModel, which are encoded by their means first.
    """
    if isinstance(model, SdsModel):
        with torch.no_grad():
            trajectories = encode(model, trajectories)[0]
        prior = model.prior
    else:
        prior = model
    z = torch.as_tensor(trajectories, dtype=DTYPE)
    if z.ndim == 2:
        z = z.unsqueeze(0)
    z = z.detach()
    marginals = msm_forward_backward(prior, z)
    labels = marginals.transition_gamma.argmax(-1).reshape(-1)
    windows = sliding_windows(z, prior.lag).reshape(-1, prior.window_dim)

    adjacency = torch.zeros(
        prior.num_regimes, prior.latent_dim, prior.latent_dim, prior.lag, dtype=torch.bool
    )
    unsupported = []
    for k, net in enumerate(prior.mean_nets):
        assigned = windows[labels == k]
        if assigned.shape[0] == 0:
            unsupported.append(k)
            continue
        scores = mlp_jacobian(net, assigned).detach().abs().mean(0)
        adjacency[k] = _to_adjacency(scores > tau, prior.latent_dim, prior.lag)
    if unsupported:
        logger.warning(f"no windows assigned to regimes {unsupported}, graphs unsupported")
    return RegimeGraphSet(adjacency, unsupported)


def edge_strengths(prior: MsmModel, latents: torch.Tensor, regimes: torch.Tensor) -> torch.Tensor:
    """
    (K, m, m * M) mean |Jacobian| of each transition mean over the windows driven by its
    regime, laid out like MaskedMlp.dependency. `regimes` holds s_M..s_T as returned by
    sample_msm. Regimes that drive no window are nan.
    """
    z = torch.as_tensor(latents, dtype=DTYPE).detach()
    windows = sliding_windows(z, prior.lag).reshape(-1, prior.window_dim)
    labels = torch.as_tensor(regimes)[:, 1:].reshape(-1)
    strengths = torch.full(
        (prior.num_regimes, prior.latent_dim, prior.window_dim), float("nan"), dtype=DTYPE
    )
    for k, net in enumerate(prior.mean_nets):
        assigned = windows[labels == k]
        if assigned.shape[0] > 0:
            strengths[k] = mlp_jacobian(net, assigned).detach().abs().mean(0)
    return strengths
