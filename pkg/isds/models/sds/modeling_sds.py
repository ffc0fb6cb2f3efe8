"""
Switching dynamical system: x_t = f(z_t) + eps_t with an MSM prior over z_{1:T},
trained through a collapsed ELBO in which the regimes are summed out exactly and only
q(z_t | x_t) is variational.
"""
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.distributions import Normal

from isds.models.msm.modeling_msm import (
    MsmModel,
    as_batch,
    inverse_softplus,
    msm_forward_backward,
    msm_prior_surrogate,
    sliding_windows,
)
from isds.models.sds.configuration_sds import SdsConfig
from isds.modules.nnet import DTYPE, Mlp, mlp_jacobian
from isds.utils.exceptions import ConfigError, NumericError, SequenceTooShortError, ShapeError
from isds.utils.logging import get_logger
from isds.utils.seed import derive_seed, torch_generator

logger = get_logger(__name__)


class SdsModel(nn.Module):
    def __init__(
        self,
        config: SdsConfig,
        prior: Optional[MsmModel] = None,
        decoder: Optional[Mlp] = None,
    ):
        super(SdsModel, self).__init__()
        self.config = config
        latent_dim, obs_dim = config.latent_dim, config.obs_dim
        self.prior = prior if prior is not None else MsmModel(config.msm)
        if decoder is None:
            decoder = Mlp(
                [latent_dim, *config.decoder_hidden_dims, obs_dim],
                "leaky_relu",
                config.negative_slope,
                seed=derive_seed(config.seed, "decoder"),
            )
        self.decoder = decoder
        self.obs_raw_var = nn.Parameter(
            inverse_softplus(torch.full((obs_dim,), config.init_obs_var, dtype=DTYPE))
        )
        encoder_dims = [obs_dim, *config.encoder_hidden_dims, latent_dim]
        self.encoder_mean = Mlp(
            encoder_dims,
            config.encoder_activation,
            config.negative_slope,
            seed=derive_seed(config.seed, "encoder_mean"),
        )
        self.encoder_logvar = Mlp(
            encoder_dims,
            config.encoder_activation,
            config.negative_slope,
            seed=derive_seed(config.seed, "encoder_logvar"),
        )
        self._check_modules()

    def _check_modules(self):
        if self.prior.latent_dim != self.config.latent_dim:
            raise ShapeError("prior and config disagree on the latent dim")
        if (self.decoder.in_features, self.decoder.out_features) != (
            self.config.latent_dim,
            self.config.obs_dim,
        ):
            raise ShapeError(
                f"decoder maps {self.decoder.in_features}->{self.decoder.out_features},"
                f" expected {self.config.latent_dim}->{self.config.obs_dim}"
            )
        if not self.decoder.is_piecewise_linear:
            raise ConfigError("the decoder must be a leaky_relu network", field="decoder")

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def obs_noise_diag(self) -> torch.Tensor:
        return self.config.var_floor + F.softplus(self.obs_raw_var)

    @torch.no_grad()
    def set_obs_noise(self, values):
        values = torch.as_tensor(values, dtype=DTYPE)
        self.obs_raw_var.copy_(inverse_softplus(values - self.config.var_floor))

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        self.prior.reset_parameters(derive_seed(seed, "prior"))
        self.decoder.reset_parameters(derive_seed(seed, "decoder"))
        self.encoder_mean.reset_parameters(derive_seed(seed, "encoder_mean"))
        self.encoder_logvar.reset_parameters(derive_seed(seed, "encoder_logvar"))
        self.obs_raw_var.fill_(float(inverse_softplus(self.config.init_obs_var)))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """f applied to every timestep independently, (..., m) -> (..., n)."""
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return encode(self, x)


def encode(model: SdsModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and diagonal variance of q(z_t | x_t), for every leading index of `x`."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != model.obs_dim:
        raise ShapeError(f"expected observations of size {model.obs_dim}, got {tuple(x.shape)}")
    mean = model.encoder_mean(x)
    var = model.encoder_logvar(x).exp().clamp_min(model.config.var_floor)
    return mean, var


def reparameterized_sample(mean: torch.Tensor, var_diag: torch.Tensor, noise: torch.Tensor):
    return mean + var_diag.sqrt() * noise


@dataclass
class ElboEstimate:
    """
    Per-sequence averages of one ELBO evaluation, with
    elbo = recon_term + entropy_term + prior_term, where entropy_term = -log q(z|x),
    and reg_term = -eta * Jacobian penalty, so that the regularised objective is elbo + reg_term.
    """

    elbo: float
    recon_term: float
    entropy_term: float
    prior_term: float
    reg_term: float
    n_mc: int

    @property
    def objective(self) -> float:
        return self.elbo + self.reg_term

    def to_dict(self) -> dict:
        return {**asdict(self), "objective": self.objective}


def jacobian_penalty(prior: MsmModel, windows: torch.Tensor) -> torch.Tensor:
    """Sum over regimes of the batch mean of the elementwise l1 norm of d m(w, k) / d w."""
    penalty = windows.new_zeros(())
    for net in prior.mean_nets:
        penalty = penalty + mlp_jacobian(net, windows).abs().sum((-2, -1)).mean()
    return penalty


def sample_penalty_windows(z: torch.Tensor, lag: int, penalty_batch: int, generator) -> torch.Tensor:
    windows = sliding_windows(z, lag).reshape(-1, z.shape[-1] * lag)
    index = torch.randperm(windows.shape[0], generator=generator)[:penalty_batch]
    return windows[index]


def elbo_objective(
    model: SdsModel,
    x,
    n_mc: int = 1,
    eta: float = 0.0,
    rng: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
    penalty_windows: Optional[torch.Tensor] = None,
    penalty_batch: int = 64,
) -> tuple[ElboEstimate, torch.Tensor]:
    """
    Monte-Carlo collapsed ELBO of a (B, T, n) batch or a (T, n) sequence.
    Returns the estimate and the differentiable regularised objective (batch mean).
    `noise` of shape (n_mc, [B,] T, m) freezes the reparameterisation draws.
    """
    x, single = as_batch(x)
    num_sequences, seq_len, _ = x.shape
    prior = model.prior
    if seq_len <= prior.lag:
        raise SequenceTooShortError(f"sequence length {seq_len} must exceed the lag {prior.lag}")
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    rng = rng if rng is not None else torch_generator(0, "elbo")

    mean, var = encode(model, x)
    shape = (n_mc, num_sequences, seq_len, model.latent_dim)
    if noise is None:
        noise = torch.randn(shape, generator=rng, dtype=DTYPE)
    elif single and noise.ndim == 3:
        noise = noise.unsqueeze(1)
    if noise.shape != shape:
        raise ShapeError(f"expected noise of shape {shape}, got {tuple(noise.shape)}")

    z = reparameterized_sample(mean, var, noise)
    recon = (
        Normal(model.decode(z), model.obs_noise_diag.sqrt(), validate_args=False)
        .log_prob(x)
        .sum((-2, -1))
    )
    entropy = -Normal(mean, var.sqrt(), validate_args=False).log_prob(z).sum((-2, -1))
    flat = z.reshape(n_mc * num_sequences, seq_len, model.latent_dim)
    marginals = msm_forward_backward(prior, flat.detach())
    prior_term = msm_prior_surrogate(prior, flat, marginals).view(n_mc, num_sequences)
    elbo = (recon + entropy + prior_term).mean(0)

    if eta > 0:
        if penalty_windows is None:
            penalty_windows = sample_penalty_windows(flat.detach(), prior.lag, penalty_batch, rng)
        reg = -eta * jacobian_penalty(prior, penalty_windows)
    else:
        reg = x.new_zeros(())
    objective = elbo.mean() + reg
    if not torch.isfinite(objective):
        raise NumericError("non-finite ELBO")

    estimate = ElboEstimate(
        elbo=float(elbo.mean()),
        recon_term=float(recon.mean()),
        entropy_term=float(entropy.mean()),
        prior_term=float(prior_term.mean()),
        reg_term=float(reg),
        n_mc=n_mc,
    )
    return estimate, objective


def elbo_and_gradients(
    model: SdsModel,
    x,
    n_mc: int = 1,
    eta: float = 0.0,
    rng: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
    penalty_windows: Optional[torch.Tensor] = None,
) -> tuple[ElboEstimate, dict[str, torch.Tensor]]:
    """
    ELBO estimate and the gradient of the regularised objective w.r.t. every named
    parameter (encoder, decoder, observation noise and prior). Frozen parameters get zeros.
    """
    with torch.enable_grad():
        estimate, objective = elbo_objective(
            model, x, n_mc=n_mc, eta=eta, rng=rng, noise=noise, penalty_windows=penalty_windows
        )
        named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
        grads = torch.autograd.grad(objective, [p for _, p in named], allow_unused=True)
    record = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
    for (name, p), g in zip(named, grads):
        if g is not None:
            record[name] = g
    return estimate, record
