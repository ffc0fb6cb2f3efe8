"""
Multi-lag Markov switching model over continuous latents z_{1:T}:

    p(z_{1:T}) = sum_{s_{M:T}} p(s_M) p(z_{1:M} | s_M) prod_{t>M} p(s_t | s_{t-1}) N(z_t; m(w_t, s_t), Sigma(w_t, s_t))

where w_t = (z_{t-1}, ..., z_{t-M}) is the lag window, most recent first.
All functions take a batch (B, T, m) or a single trajectory (T, m).
"""
import copy
import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.distributions import Normal
from torch.func import functional_call, grad

from isds.models.msm.configuration_msm import MsmConfig
from isds.modules.nnet import DTYPE, BandOverlapMlp, Mlp
from isds.utils.exceptions import (
    ConfigError,
    GuardExceededError,
    NumericError,
    SequenceTooShortError,
    ShapeError,
)
from isds.utils.logging import get_logger
from isds.utils.seed import derive_seed, torch_generator
from isds.utils.vars import ANALYTIC_ACTIVATIONS, COVARIANCE_MODES, VAR_FLOOR

logger = get_logger(__name__)

BRUTE_FORCE_MAX_PATHS = 10**6


def inverse_softplus(y) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=DTYPE)
    return y + torch.log(-torch.expm1(-y))


def as_batch(z) -> tuple[torch.Tensor, bool]:
    """Returns the (B, T, m) view of `z` and whether `z` was a single trajectory."""
    z = torch.as_tensor(z, dtype=DTYPE)
    if z.ndim == 2:
        return z.unsqueeze(0), True
    if z.ndim != 3:
        raise ShapeError(f"expected a (T, m) or (B, T, m) trajectory, got {tuple(z.shape)}")
    return z, False


def sliding_windows(z: torch.Tensor, lag: int) -> torch.Tensor:
    """(..., T, m) -> (..., T - lag, m * lag), row i holding (z_{t-1}, ..., z_{t-lag}) for t = lag + i."""
    seq_len = z.shape[-2]
    return torch.cat(
        [z[..., lag - 1 - i : seq_len - 1 - i, :] for i in range(lag)], dim=-1
    )


class CovarianceSpec(nn.Module):
    """
    Diagonal transition covariances.

    - constant: one diagonal shared by every regime
    - heterogeneous: one diagonal per regime
    - history: C_k * sigmoid(m(w, k)), elementwise
    """

    def __init__(
        self,
        mode: str,
        num_regimes: int,
        latent_dim: int,
        init_var: float = 0.1,
        var_floor: float = VAR_FLOOR,
    ):
        super(CovarianceSpec, self).__init__()
        if mode not in COVARIANCE_MODES:
            raise ConfigError(f"expected one of {COVARIANCE_MODES}, got {mode!r}", field="cov_mode")
        self.mode = mode
        self.num_regimes = num_regimes
        self.latent_dim = latent_dim
        self.var_floor = var_floor
        self.init_var = init_var
        if mode == "constant":
            shape, init = (latent_dim,), init_var
        elif mode == "heterogeneous":
            shape, init = (num_regimes, latent_dim), init_var
        else:
            # sigmoid(0) = 0.5
            shape, init = (num_regimes,), 2.0 * init_var
        self.raw = nn.Parameter(inverse_softplus(torch.full(shape, init, dtype=DTYPE)))

    @torch.no_grad()
    def reset_parameters(self):
        init = 2.0 * self.init_var if self.mode == "history" else self.init_var
        self.raw.fill_(float(inverse_softplus(init)))

    def values(self) -> torch.Tensor:
        """The diagonal(s) for constant/heterogeneous, the scales C_k for history."""
        if self.mode == "history":
            return F.softplus(self.raw)
        return self.var_floor + F.softplus(self.raw)

    @torch.no_grad()
    def set_values(self, values):
        values = torch.as_tensor(values, dtype=DTYPE)
        if values.shape != self.raw.shape:
            raise ShapeError(f"expected {tuple(self.raw.shape)}, got {tuple(values.shape)}")
        floor = 0.0 if self.mode == "history" else self.var_floor
        if torch.any(values <= floor):
            raise ValueError(f"covariance values must exceed {floor}")
        self.raw.copy_(inverse_softplus(values - floor))

    def variances(self, means: torch.Tensor) -> torch.Tensor:
        """Diagonal variances (..., K, m) for regime means (..., K, m)."""
        if self.mode == "history":
            return self.var_floor + self.values()[:, None] * torch.sigmoid(means)
        return self.values().expand_as(means)

    def extra_repr(self):
        return f"mode={self.mode}, num_regimes={self.num_regimes}, latent_dim={self.latent_dim}"


@dataclass
class PosteriorMarginals:
    """
    Regime posteriors of one batch. With L = T - M:
        initial_gamma (B, K0):        p(s_M = a | z)
        transition_gamma (B, L, K):   p(s_t = k | z), t = M+1..T
        initial_xi (B, K, K0):        p(s_{M+1} = k, s_M = a | z)
        xi (B, L-1, K, K):            p(s_t = k, s_{t-1} = k' | z), t = M+2..T
    The leading batch axis is absent for a single trajectory.
    """

    initial_gamma: torch.Tensor
    transition_gamma: torch.Tensor
    initial_xi: torch.Tensor
    xi: torch.Tensor
    log_likelihood: torch.Tensor

    @property
    def gamma(self) -> torch.Tensor:
        """(B, T-M+1, K) marginals of s_M..s_T, defined when K0 == K."""
        if self.initial_gamma.shape[-1] != self.transition_gamma.shape[-1]:
            raise ShapeError("gamma over s_M..s_T needs as many initial components as regimes")
        return torch.cat([self.initial_gamma.unsqueeze(-2), self.transition_gamma], dim=-2)

    def squeeze(self) -> "PosteriorMarginals":
        return PosteriorMarginals(
            initial_gamma=self.initial_gamma[0],
            transition_gamma=self.transition_gamma[0],
            initial_xi=self.initial_xi[0],
            xi=self.xi[0],
            log_likelihood=self.log_likelihood[0],
        )


class MsmModel(nn.Module):
    def __init__(self, config: MsmConfig, mean_nets: Optional[Sequence[nn.Module]] = None):
        super(MsmModel, self).__init__()
        self.config = config
        num_regimes, num_initial = config.num_regimes, config.num_initial
        window_dim = config.window_dim
        self.pi_logits = nn.Parameter(torch.zeros(num_initial, dtype=DTYPE))
        self.transition_logits = nn.Parameter(torch.zeros(num_regimes, num_regimes, dtype=DTYPE))
        if num_initial != num_regimes:
            self.initial_transition_logits = nn.Parameter(
                torch.zeros(num_initial, num_regimes, dtype=DTYPE)
            )
        else:
            self.register_parameter("initial_transition_logits", None)
        self.init_means = nn.Parameter(torch.zeros(num_initial, window_dim, dtype=DTYPE))
        self.init_raw_vars = nn.Parameter(torch.zeros(num_initial, window_dim, dtype=DTYPE))
        self._reset_initial_components(config.seed)

        if mean_nets is None:
            layer_dims = [window_dim, *config.hidden_dims, config.latent_dim]
            mean_nets = [
                Mlp(layer_dims, config.activation, seed=derive_seed(config.seed, "mean", k))
                for k in range(num_regimes)
            ]
        self.mean_nets = nn.ModuleList(mean_nets)
        self.covariance = CovarianceSpec(
            config.cov_mode,
            num_regimes,
            config.latent_dim,
            init_var=config.init_transition_var,
            var_floor=config.var_floor,
        )
        self._check_mean_nets()

    @torch.no_grad()
    def _reset_initial_components(self, seed: int):
        generator = torch_generator(seed, "msm", "initial_components")
        shape = self.init_means.shape
        self.init_means.copy_(0.5 * torch.randn(shape, generator=generator, dtype=DTYPE))
        self.init_raw_vars.fill_(float(inverse_softplus(1.0 - self.config.var_floor)))

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        """Re-draw every parameter from `seed`, e.g. for a random restart."""
        self.pi_logits.zero_()
        self.transition_logits.zero_()
        if self.initial_transition_logits is not None:
            self.initial_transition_logits.zero_()
        self._reset_initial_components(seed)
        shared = {}
        for k, net in enumerate(self.mean_nets):
            if isinstance(net, BandOverlapMlp):
                net.regime_net.reset_parameters(derive_seed(seed, "mean", k))
                shared[id(net.shared_net)] = net.shared_net
            else:
                net.reset_parameters(derive_seed(seed, "mean", k))
        # one draw per shared network, however many regimes hold it
        for i, net in enumerate(shared.values()):
            net.reset_parameters(derive_seed(seed, "shared", i))
        self.covariance.reset_parameters()

    def _check_mean_nets(self):
        if len(self.mean_nets) != self.num_regimes:
            raise ShapeError(f"expected {self.num_regimes} mean networks, got {len(self.mean_nets)}")
        for k, net in enumerate(self.mean_nets):
            if net.in_features != self.window_dim or net.out_features != self.latent_dim:
                raise ShapeError(
                    f"mean network {k} maps {net.in_features}->{net.out_features},"
                    f" expected {self.window_dim}->{self.latent_dim}"
                )
            if net.activation not in ANALYTIC_ACTIVATIONS:
                raise ConfigError(
                    f"mean network {k} uses non-analytic activation {net.activation!r}",
                    field="activation",
                )

    @property
    def num_regimes(self) -> int:
        return self.config.num_regimes

    @property
    def num_initial(self) -> int:
        return self.config.num_initial

    @property
    def lag(self) -> int:
        return self.config.lag

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def window_dim(self) -> int:
        return self.config.window_dim

    @property
    def log_pi(self) -> torch.Tensor:
        return torch.log_softmax(self.pi_logits, dim=-1)

    @property
    def log_Q(self) -> torch.Tensor:
        return torch.log_softmax(self.transition_logits, dim=-1)

    @property
    def log_Q0(self) -> torch.Tensor:
        """(K0, K) log-probabilities of the first transition s_M -> s_{M+1}."""
        if self.initial_transition_logits is None:
            return self.log_Q
        return torch.log_softmax(self.initial_transition_logits, dim=-1)

    @property
    def pi(self) -> torch.Tensor:
        return self.log_pi.exp()

    @property
    def Q(self) -> torch.Tensor:
        return self.log_Q.exp()

    @property
    def init_vars(self) -> torch.Tensor:
        return self.config.var_floor + F.softplus(self.init_raw_vars)

    @torch.no_grad()
    def set_switching(self, pi, Q, Q0=None):
        """Set pi, Q (and Q0 when K0 != K) from probabilities; zeros become -inf logits."""
        self.pi_logits.copy_(torch.as_tensor(pi, dtype=DTYPE).log())
        self.transition_logits.copy_(torch.as_tensor(Q, dtype=DTYPE).log())
        if self.initial_transition_logits is not None:
            if Q0 is None:
                raise ShapeError("Q0 is required when the model has K0 != K")
            self.initial_transition_logits.copy_(torch.as_tensor(Q0, dtype=DTYPE).log())

    @torch.no_grad()
    def set_initial_components(self, means, variances):
        variances = torch.as_tensor(variances, dtype=DTYPE)
        self.init_means.copy_(torch.as_tensor(means, dtype=DTYPE))
        self.init_raw_vars.copy_(inverse_softplus(variances - self.config.var_floor))

    def check_trajectory(self, z) -> tuple[torch.Tensor, bool]:
        z, single = as_batch(z)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"expected latent dim {self.latent_dim}, got {z.shape[-1]}")
        if z.shape[-2] <= self.lag:
            raise SequenceTooShortError(
                f"sequence length {z.shape[-2]} must exceed the lag {self.lag}"
            )
        return z, single

    def regime_means(self, windows: torch.Tensor) -> torch.Tensor:
        """(..., mM) -> (..., K, m)"""
        return torch.stack([net(windows) for net in self.mean_nets], dim=-2)

    def initial_log_probs(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, m) -> (B, K0), log p(z_{1:M} | s_M = a)"""
        head = z[:, : self.lag].reshape(z.shape[0], 1, self.window_dim)
        dist = Normal(self.init_means, self.init_vars.sqrt(), validate_args=False)
        return dist.log_prob(head).sum(-1)

    def transition_log_probs(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, m) -> (B, T-M, K), log p(z_t | w_t, s_t = k)"""
        windows = sliding_windows(z, self.lag)
        means = self.regime_means(windows)
        variances = self.covariance.variances(means)
        dist = Normal(means, variances.sqrt(), validate_args=False)
        return dist.log_prob(z[:, self.lag :, None, :]).sum(-1)

    def forward(self, z: torch.Tensor, marginals: Optional[PosteriorMarginals] = None):
        """
        Per-sequence log-likelihood of a (B, T, m) batch. Given (batched) `marginals`, returns
        instead the posterior-weighted complete-data log-likelihood, whose gradient w.r.t.
        parameters and z equals that of the log-likelihood at the posterior's parameters.
        """
        log_init = self.initial_log_probs(z)
        log_trans = self.transition_log_probs(z)
        if marginals is None:
            log_alpha_init, log_alpha = forward_messages(
                self.log_pi, self.log_Q0, self.log_Q, log_init, log_trans
            )
            return torch.logsumexp(log_alpha[:, -1], dim=-1)
        return (
            weighted_sum(marginals.initial_gamma, self.log_pi + log_init, dims=(-1,))
            + weighted_sum(marginals.transition_gamma, log_trans, dims=(-2, -1))
            + weighted_sum(marginals.initial_xi, self.log_Q0.T, dims=(-2, -1))
            + weighted_sum(marginals.xi, self.log_Q.T, dims=(-3, -2, -1))
        )

    def extra_repr(self):
        return (
            f"K={self.num_regimes}, K0={self.num_initial}, M={self.lag}, m={self.latent_dim},"
            f" cov_mode={self.covariance.mode}"
        )


def weighted_sum(weights: torch.Tensor, log_probs: torch.Tensor, dims) -> torch.Tensor:
    # zero-weight entries may sit on -inf log-probabilities
    terms = torch.where(weights > 0, weights * log_probs, torch.zeros_like(weights))
    return terms.sum(dim=dims)


def forward_messages(log_pi, log_Q0, log_Q, log_init, log_trans):
    """
    Log-space alpha messages, alpha_t(k) = log p(z_{1:t}, s_t = k).
    Returns (B, K0) for s_M and (B, T-M, K) for s_{M+1..T}.
    """
    log_alpha_init = log_pi + log_init
    prev = torch.logsumexp(log_alpha_init[:, :, None] + log_Q0, dim=1) + log_trans[:, 0]
    alphas = [prev]
    for t in range(1, log_trans.shape[1]):
        prev = torch.logsumexp(prev[:, :, None] + log_Q, dim=1) + log_trans[:, t]
        alphas.append(prev)
    return log_alpha_init, torch.stack(alphas, dim=1)


def backward_messages(log_Q0, log_Q, log_trans):
    """
    Log-space beta messages, beta_t(k) = log p(z_{t+1:T} | z_{t-M+1:t}, s_t = k).
    Returns (B, K0) for s_M and (B, T-M, K) for s_{M+1..T}.
    """
    seq_len = log_trans.shape[1]
    beta = torch.zeros_like(log_trans[:, -1])
    betas = [beta]
    for t in range(seq_len - 1, 0, -1):
        beta = torch.logsumexp(log_Q + (log_trans[:, t] + beta)[:, None, :], dim=-1)
        betas.append(beta)
    log_beta = torch.stack(betas[::-1], dim=1)
    log_beta_init = torch.logsumexp(log_Q0 + (log_trans[:, 0] + log_beta[:, 0])[:, None, :], dim=-1)
    return log_beta_init, log_beta


def msm_log_likelihood(model: MsmModel, traj) -> torch.Tensor:
    """log p(z_{1:T}) by the forward recursion; a scalar for (T, m), shape (B,) for (B, T, m)."""
    z, single = model.check_trajectory(traj)
    loglik = model(z)
    if not torch.isfinite(loglik).all():
        raise NumericError("non-finite log-likelihood, check the density parameters")
    return loglik[0] if single else loglik


@torch.no_grad()
def _posterior(model: MsmModel, z: torch.Tensor) -> PosteriorMarginals:
    log_init = model.initial_log_probs(z)
    log_trans = model.transition_log_probs(z)
    log_pi, log_Q0, log_Q = model.log_pi, model.log_Q0, model.log_Q
    log_alpha_init, log_alpha = forward_messages(log_pi, log_Q0, log_Q, log_init, log_trans)
    log_beta_init, log_beta = backward_messages(log_Q0, log_Q, log_trans)
    loglik = torch.logsumexp(log_alpha[:, -1], dim=-1)
    if not torch.isfinite(loglik).all():
        raise NumericError("non-finite log-likelihood, check the density parameters")

    initial_gamma = torch.softmax(log_alpha_init + log_beta_init, dim=-1)
    transition_gamma = torch.softmax(log_alpha + log_beta, dim=-1)
    emit = log_trans + log_beta
    # [b, k, a] = alpha_M(a) + log Q0[a, k] + log p(z_{M+1} | k) + beta_{M+1}(k)
    log_initial_xi = log_alpha_init[:, None, :] + log_Q0.T + emit[:, 0, :, None]
    # [b, t, k, k'] = alpha_{t-1}(k') + log Q[k', k] + log p(z_t | k) + beta_t(k)
    log_xi = log_alpha[:, :-1, None, :] + log_Q.T + emit[:, 1:, :, None]
    initial_xi = torch.softmax(log_initial_xi.flatten(-2), dim=-1).view_as(log_initial_xi)
    xi = torch.softmax(log_xi.flatten(-2), dim=-1).view_as(log_xi)
    return PosteriorMarginals(initial_gamma, transition_gamma, initial_xi, xi, loglik)


def msm_forward_backward(model: MsmModel, traj) -> PosteriorMarginals:
    z, single = model.check_trajectory(traj)
    marginals = _posterior(model, z)
    return marginals.squeeze() if single else marginals


def msm_prior_surrogate(model: MsmModel, z: torch.Tensor, marginals: PosteriorMarginals):
    """
    Differentiable stand-in for the log-likelihood of a (B, T, m) batch: its value is the
    log-likelihood and its gradient is the posterior-weighted decomposition over gamma and xi.
    """
    surrogate = model(z, marginals=marginals)
    return surrogate - surrogate.detach() + marginals.log_likelihood


def msm_prior_gradient(model: MsmModel, traj) -> dict[str, torch.Tensor]:
    """
    Gradient of the log-likelihood w.r.t. every named parameter (summed over a batch), from
    posterior marginals: gamma-weighted transition and initial terms plus xi-weighted Q terms.
    """
    z, _ = model.check_trajectory(traj)
    marginals = _posterior(model, z)
    params = {name: p.detach() for name, p in model.named_parameters()}

    def weighted(params):
        return functional_call(model, params, (z,), {"marginals": marginals}).sum()

    with torch.enable_grad():
        return grad(weighted)(params)


def most_likely_regimes(marginals: PosteriorMarginals) -> torch.Tensor:
    """argmax of the regime marginals, (..., T-M+1) labels for s_M..s_T."""
    return torch.cat(
        [
            marginals.initial_gamma.argmax(-1, keepdim=True),
            marginals.transition_gamma.argmax(-1),
        ],
        dim=-1,
    )


@dataclass
class RegimePaths:
    paths: torch.Tensor  # (C, T-M+1)
    log_weights: torch.Tensor  # (C,), log p(s_{M:T})
    log_densities: torch.Tensor  # (C,), log p(z | s_{M:T})


@torch.no_grad()
def enumerate_regime_paths(model: MsmModel, traj) -> RegimePaths:
    """Every regime path of a single trajectory with its prior weight and path density."""
    z, single = model.check_trajectory(traj)
    if not single and z.shape[0] != 1:
        raise ShapeError("path enumeration takes a single trajectory")
    num_steps = z.shape[1] - model.lag
    num_paths = model.num_initial * model.num_regimes**num_steps
    if num_paths > BRUTE_FORCE_MAX_PATHS:
        raise GuardExceededError(
            f"{num_paths} regime paths exceed the enumeration guard of {BRUTE_FORCE_MAX_PATHS}"
        )
    log_init = model.initial_log_probs(z)[0]
    log_trans = model.transition_log_probs(z)[0]
    paths = torch.tensor(
        list(itertools.product(range(model.num_initial), *[range(model.num_regimes)] * num_steps))
    )
    log_weights = (
        model.log_pi[paths[:, 0]]
        + model.log_Q0[paths[:, 0], paths[:, 1]]
        + model.log_Q[paths[:, 1:-1], paths[:, 2:]].sum(-1)
    )
    log_densities = log_init[paths[:, 0]] + log_trans[torch.arange(num_steps), paths[:, 1:]].sum(-1)
    return RegimePaths(paths, log_weights, log_densities)


def brute_force_log_likelihood(model: MsmModel, traj) -> torch.Tensor:
    """log of the sum over all K0 * K^(T-M) regime paths. Test oracle only."""
    enumerated = enumerate_regime_paths(model, traj)
    return torch.logsumexp(enumerated.log_weights + enumerated.log_densities, dim=0)


@torch.no_grad()
def sample_msm(
    model: MsmModel,
    num_sequences: int,
    seq_len: int,
    seed: int = 0,
    regimes: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Ancestral sampling. Returns latents (N, T, m) and regimes (N, T-M+1) for s_M..s_T;
    given `regimes`, only the latents are sampled.
    """
    lag, window_dim = model.lag, model.window_dim
    if seq_len <= lag:
        raise SequenceTooShortError(f"sequence length {seq_len} must exceed the lag {lag}")
    generator = torch_generator(seed, "sample_msm")
    rows = torch.arange(num_sequences)
    if regimes is None:
        regimes = torch.empty(num_sequences, seq_len - lag + 1, dtype=torch.long)
        regimes[:, 0] = torch.multinomial(
            model.pi.unsqueeze(0).repeat(num_sequences, 1), 1, generator=generator
        ).squeeze(-1)
        Q0, Q = model.log_Q0.exp(), model.Q
        for j in range(1, regimes.shape[1]):
            probs = (Q0 if j == 1 else Q)[regimes[:, j - 1]]
            regimes[:, j] = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
    elif regimes.shape != (num_sequences, seq_len - lag + 1):
        raise ShapeError(f"expected regimes of shape {(num_sequences, seq_len - lag + 1)}")

    z = torch.empty(num_sequences, seq_len, model.latent_dim, dtype=DTYPE)
    noise = torch.randn(num_sequences, window_dim, generator=generator, dtype=DTYPE)
    head = model.init_means[regimes[:, 0]] + model.init_vars[regimes[:, 0]].sqrt() * noise
    z[:, :lag] = head.view(num_sequences, lag, model.latent_dim)
    for t in range(lag, seq_len):
        window = torch.cat([z[:, t - 1 - i] for i in range(lag)], dim=-1)
        means = model.regime_means(window)
        variances = model.covariance.variances(means)
        k = regimes[:, t - lag + 1]
        noise = torch.randn(num_sequences, model.latent_dim, generator=generator, dtype=DTYPE)
        z[:, t] = means[rows, k] + variances[rows, k].sqrt() * noise
    return z, regimes


def permute_regimes(model: MsmModel, perm: Sequence[int]) -> MsmModel:
    """A copy whose regime k is regime perm[k] of `model`. Initial labels follow when K0 == K."""
    perm = torch.as_tensor(perm, dtype=torch.long)
    if sorted(perm.tolist()) != list(range(model.num_regimes)):
        raise ValueError(f"{perm.tolist()} is not a permutation of {model.num_regimes} regimes")
    permuted = copy.deepcopy(model)
    with torch.no_grad():
        permuted.transition_logits.copy_(model.transition_logits[perm][:, perm])
        if model.initial_transition_logits is not None:
            permuted.initial_transition_logits.copy_(model.initial_transition_logits[:, perm])
        else:
            permuted.pi_logits.copy_(model.pi_logits[perm])
            permuted.init_means.copy_(model.init_means[perm])
            permuted.init_raw_vars.copy_(model.init_raw_vars[perm])
        if model.covariance.mode != "constant":
            permuted.covariance.raw.copy_(model.covariance.raw[perm])
    permuted.mean_nets = nn.ModuleList(copy.deepcopy(model.mean_nets[k]) for k in perm.tolist())
    return permuted


def _check_monomial(A: torch.Tensor):
    support = A != 0
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got {tuple(A.shape)}")
    if not (torch.all(support.sum(0) == 1) and torch.all(support.sum(1) == 1)):
        raise ValueError("expected a diagonal-times-permutation matrix")


class AffinePushforwardMean(nn.Module):
    """Mean function of the latents z' = A z + b: m'(w') = A m(A^-1 (w' - b)) + b, per lag block."""

    def __init__(self, base: nn.Module, A: torch.Tensor, b: torch.Tensor, lag: int):
        super(AffinePushforwardMean, self).__init__()
        self.base = base
        self.lag = lag
        self.register_buffer("A", torch.as_tensor(A, dtype=DTYPE))
        self.register_buffer("A_inv", torch.linalg.inv(self.A))
        self.register_buffer("b", torch.as_tensor(b, dtype=DTYPE))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def activation(self) -> str:
        return self.base.activation

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        blocks = w.unflatten(-1, (self.lag, self.A.shape[0]))
        u = ((blocks - self.b) @ self.A_inv.T).flatten(-2)
        return self.base(u) @ self.A.T + self.b


def affine_pushforward(model: MsmModel, A, b) -> MsmModel:
    """
    The MSM of z' = A z + b for a diagonal-times-permutation A, which keeps every covariance
    diagonal. log p'(z') = log p(z) - T log|det A|.
    """
    A = torch.as_tensor(A, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    _check_monomial(A)
    if model.covariance.mode == "history":
        raise ValueError("history-dependent covariances are not closed under this parameterization")
    lag, m = model.lag, model.latent_dim
    pushed = copy.deepcopy(model)
    squared = A**2
    with torch.no_grad():
        means = model.init_means.view(-1, lag, m) @ A.T + b
        variances = model.init_vars.view(-1, lag, m) @ squared.T
        pushed.set_initial_components(means.flatten(-2), variances.flatten(-2))
        pushed.covariance.set_values(model.covariance.values() @ squared.T)
    pushed.mean_nets = nn.ModuleList(
        AffinePushforwardMean(copy.deepcopy(net), A, b, lag) for net in model.mean_nets
    )
    return pushed
