"""
Synthetic switching time series with known regimes, latents and regime-dependent causal
graphs. Regimes follow a sticky cyclic chain, latents follow an MSM whose transition
means are graph-masked cosine networks, and observations are a Leaky ReLU network of the
latents plus Gaussian noise.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from isds.models.msm.assumptions import distinct_ratios
from isds.models.msm.configuration_msm import MsmConfig
from isds.models.msm.modeling_msm import MsmModel, sample_msm
from isds.models.sds.graphs import RegimeGraphSet, edge_strengths, graphs_from_masks
from isds.modules.nnet import DTYPE, BandOverlapMlp, MaskedMlp, Mlp
from isds.utils.config import check_choice, check_positive
from isds.utils.exceptions import ConfigError
from isds.utils.logging import get_logger
from isds.utils.seed import derive_seed, torch_generator
from isds.utils.vars import ABLATIONS, COVARIANCE_MODES, SETTINGS

logger = get_logger(__name__)

SPLITS = ("train", "heldout")


@dataclass
class GeneratorConfig:
    latent_dim: int = field(default=3, metadata={"help": "m, latent dimension."})
    obs_dim: int = field(default=10, metadata={"help": "n, observed dimension."})
    num_regimes: int = field(default=3, metadata={"help": "K, number of regimes."})
    lag: int = field(default=1, metadata={"help": "M, lag order."})
    seq_len: int = field(default=100, metadata={"help": "T, sequence length."})
    num_sequences: int = field(default=10_000, metadata={"help": "N, training sequences."})
    num_heldout: int = field(default=1_000, metadata={"help": "Held-out sequences."})
    noise_mode: str = field(
        default="constant", metadata={"help": f"Transition noise, one of {COVARIANCE_MODES}."}
    )
    graph_edge_prob: float = field(
        default=0.5, metadata={"help": "Edge probability of the causal graphs; i->i at lag 1 is always on."}
    )
    setting: str = field(default="custom", metadata={"help": f"Preset tag, one of {SETTINGS} or custom."})
    ablation: str = field(default="none", metadata={"help": f"One of {ABLATIONS}."})
    stay_prob: float = field(default=0.9, metadata={"help": "Probability of keeping the regime."})
    init_mean_std: float = field(default=0.7, metadata={"help": "Std of the initial component means."})
    init_var: float = field(default=0.1, metadata={"help": "Variance of the initial components."})
    constant_var: float = field(default=0.01, metadata={"help": "Transition variance, constant mode."})
    heterogeneous_var_range: List[float] = field(
        default_factory=lambda: [0.005, 0.08],
        metadata={"help": "Uniform range of the variances, heterogeneous mode."},
    )
    history_scale_range: List[float] = field(
        default_factory=lambda: [0.05, 0.1],
        metadata={"help": "Uniform range of C_k, history mode."},
    )
    max_resample: int = field(default=1000, metadata={"help": "Attempts to draw distinct variance ratios."})
    edge_min_strength: float = field(
        default=0.2, metadata={"help": "Lower bound of the mean |Jacobian| of every declared edge."}
    )
    calibration_sequences: int = field(
        default=200, metadata={"help": "Sequences sampled to measure the edge strengths."}
    )
    max_edge_rounds: int = field(default=50, metadata={"help": "Rescaling rounds of the weak edges."})
    hidden_dim: int = field(default=16, metadata={"help": "Hidden units of the transition means."})
    decoder_hidden_dim: int = field(default=8, metadata={"help": "Hidden units of the emission network."})
    negative_slope: float = field(default=0.2, metadata={"help": "Leaky ReLU slope of the emission."})
    obs_noise_var: float = field(default=1e-4, metadata={"help": "Observation noise variance, may be 0."})
    overlap_band: List[float] = field(
        default_factory=lambda: [3.0, 5.0],
        metadata={"help": "Window-norm band where the overlap ablation shares its mean."},
    )
    seed: int = field(default=0, metadata={"help": "Root seed of the generator and the samples."})

    def __post_init__(self):
        for name in ("latent_dim", "obs_dim", "num_regimes", "lag", "hidden_dim", "decoder_hidden_dim"):
            check_positive(getattr(self, name), name)
        check_positive(self.num_sequences, "num_sequences")
        check_positive(self.num_heldout, "num_heldout", allow_zero=True)
        if self.seq_len <= self.lag:
            raise ConfigError(f"must exceed the lag {self.lag}, got {self.seq_len}", field="seq_len")
        if self.obs_dim < self.latent_dim:
            raise ConfigError(f"must be >= latent_dim {self.latent_dim}", field="obs_dim")
        check_choice(self.noise_mode, COVARIANCE_MODES, "noise_mode")
        check_choice(self.setting, (*SETTINGS, "custom"), "setting")
        check_choice(self.ablation, ABLATIONS, "ablation")
        if not 0.0 < self.graph_edge_prob <= 1.0:
            raise ConfigError(f"expected a probability in (0, 1], got {self.graph_edge_prob}", "graph_edge_prob")
        if not 0.0 <= self.stay_prob <= 1.0:
            raise ConfigError(f"expected a probability, got {self.stay_prob}", "stay_prob")
        check_positive(self.obs_noise_var, "obs_noise_var", allow_zero=True)
        check_positive(self.max_resample, "max_resample")
        check_positive(self.edge_min_strength, "edge_min_strength", allow_zero=True)
        check_positive(self.calibration_sequences, "calibration_sequences")
        check_positive(self.max_edge_rounds, "max_edge_rounds")

    @property
    def window_dim(self) -> int:
        return self.latent_dim * self.lag


@dataclass
class SyntheticGenerator:
    prior: MsmModel
    decoder: Mlp
    graphs: RegimeGraphSet


@dataclass
class GroundTruth:
    latents: torch.Tensor  # (N, T, m)
    regimes: torch.Tensor  # (N, T - M + 1), labels of s_M..s_T
    observations: torch.Tensor  # (N, T, n)
    generator: SyntheticGenerator
    config: GeneratorConfig
    split: str = "train"

    @property
    def graphs(self) -> RegimeGraphSet:
        return self.generator.graphs


def cyclic_transition_matrix(num_regimes: int, stay_prob: float = 0.9) -> torch.Tensor:
    """Q[k, k] = stay_prob, Q[k, (k + 1) % K] = 1 - stay_prob."""
    eye = torch.eye(num_regimes, dtype=DTYPE)
    if num_regimes == 1:
        return eye
    return stay_prob * eye + (1.0 - stay_prob) * torch.roll(eye, shifts=1, dims=1)


def sample_regime_chain(
    num_regimes: int,
    seq_len: int,
    lag: int,
    generator: Optional[torch.Generator] = None,
    num_sequences: int = 1,
    stay_prob: float = 0.9,
) -> torch.Tensor:
    """(N, T - M + 1) labels of s_M..s_T: uniform start, then stay or move to the next regime."""
    num_steps = seq_len - lag + 1
    regimes = torch.empty(num_sequences, num_steps, dtype=torch.long)
    regimes[:, 0] = torch.randint(num_regimes, (num_sequences,), generator=generator)
    for t in range(1, num_steps):
        move = torch.rand(num_sequences, generator=generator, dtype=DTYPE) >= stay_prob
        regimes[:, t] = (regimes[:, t - 1] + move.long()) % num_regimes
    return regimes


def _random_dependency(config: GeneratorConfig, generator: torch.Generator) -> torch.Tensor:
    m = config.latent_dim
    dependency = torch.rand(m, config.window_dim, generator=generator, dtype=DTYPE) < config.graph_edge_prob
    # i -> i at lag 1
    dependency[torch.arange(m), torch.arange(m)] = True
    return dependency


def _heterogeneous_variances(config: GeneratorConfig, generator: torch.Generator) -> torch.Tensor:
    low, high = config.heterogeneous_var_range
    pairs = [(k, j) for k in range(config.num_regimes) for j in range(k + 1, config.num_regimes)]
    shape = (config.num_regimes, config.latent_dim)
    for attempt in range(config.max_resample):
        variances = low + (high - low) * torch.rand(shape, generator=generator, dtype=DTYPE)
        if not pairs:
            return variances
        for k, j in pairs:
            if distinct_ratios((variances[k] / variances[j])[None], 1e-4).item():
                return variances
        logger.debug(f"variance ratios not distinct, resampling (attempt {attempt + 1})")
    raise ConfigError(
        f"no regime pair with distinct variance ratios after {config.max_resample} draws",
        field="noise_mode",
    )


@torch.no_grad()
def _assemble(
    config: GeneratorConfig, mean_nets, graphs: Optional[RegimeGraphSet] = None
) -> SyntheticGenerator:
    generator = torch_generator(config.seed, "generator", "parameters")
    msm_config = MsmConfig(
        num_regimes=config.num_regimes,
        lag=config.lag,
        latent_dim=config.latent_dim,
        hidden_dims=[config.hidden_dim],
        activation="cosine",
        cov_mode=config.noise_mode,
        seed=derive_seed(config.seed, "generator", "msm"),
    )
    prior = MsmModel(msm_config, mean_nets=mean_nets)
    K = config.num_regimes
    prior.set_switching(
        torch.full((K,), 1.0 / K, dtype=DTYPE), cyclic_transition_matrix(K, config.stay_prob)
    )
    init_means = config.init_mean_std * torch.randn(K, config.window_dim, generator=generator, dtype=DTYPE)
    prior.set_initial_components(init_means, torch.full_like(init_means, config.init_var))

    if config.noise_mode == "constant":
        variances = torch.full((config.latent_dim,), config.constant_var, dtype=DTYPE)
    elif config.noise_mode == "heterogeneous":
        variances = _heterogeneous_variances(config, generator)
    else:
        low, high = config.history_scale_range
        variances = low + (high - low) * torch.rand(K, generator=generator, dtype=DTYPE)
    prior.covariance.set_values(variances)

    decoder = Mlp(
        [config.latent_dim, config.decoder_hidden_dim, config.obs_dim],
        "leaky_relu",
        config.negative_slope,
        seed=derive_seed(config.seed, "generator", "decoder"),
    )
    if graphs is None:
        graphs = graphs_from_masks(prior)
    return SyntheticGenerator(prior=prior, decoder=decoder, graphs=graphs)


def strengthen_edges(
    prior: MsmModel,
    min_strength: float,
    num_sequences: int = 200,
    seq_len: int = 100,
    seed: int = 0,
    max_rounds: int = 50,
    max_gain: float = 10.0,
) -> int:
    """
    Rescale the first-layer weights of masked transition means until every declared edge
    has a mean |Jacobian| of at least `min_strength` on the windows its regime drives.
    Strengths are measured on trajectories sampled from `prior` itself. Returns the
    number of rescaling rounds.
    """
    for net in prior.mean_nets:
        if not isinstance(net, MaskedMlp):
            raise TypeError("strengthen_edges needs MaskedMlp transition means")
    for rounds in range(max_rounds + 1):
        with torch.no_grad():
            latents, regimes = sample_msm(prior, num_sequences, seq_len, seed=seed)
        strengths = edge_strengths(prior, latents, regimes)
        # nan (no windows) compares False
        weak = torch.stack([net.dependency for net in prior.mean_nets]) & (strengths < min_strength)
        if not weak.any():
            if rounds:
                logger.info(f"edges reach mean |J| >= {min_strength} after {rounds} rescaling rounds")
            return rounds
        if rounds == max_rounds:
            break
        gain = (1.1 * min_strength / strengths.clamp_min(1e-12)).clamp(max=max_gain)
        with torch.no_grad():
            for k, net in enumerate(prior.mean_nets):
                scale = torch.where(weak[k], gain[k], torch.ones_like(gain[k]))
                # hidden unit u serves output u % m
                groups = torch.arange(net.layers[0].out_features) % prior.latent_dim
                net.layers[0].weight.mul_(scale[groups])
    raise ConfigError(
        f"{int(weak.sum())} edges stay below mean |J| {min_strength} after {max_rounds} rounds",
        field="edge_min_strength",
    )


def build_generator(config: GeneratorConfig) -> SyntheticGenerator:
    """
    Graph-masked cosine transition means, one random causal graph per regime. Declared
    edges are rescaled to a mean |Jacobian| of at least `edge_min_strength` on the
    generated data, so thresholding the Jacobians recovers the graphs.
    """
    generator = torch_generator(config.seed, "generator", "graphs")
    mean_nets = [
        MaskedMlp(
            _random_dependency(config, generator),
            hidden_dims=(config.hidden_dim,),
            activation="cosine",
            seed=derive_seed(config.seed, "generator", "mean", k),
        )
        for k in range(config.num_regimes)
    ]
    assembled = _assemble(config, mean_nets)
    if config.edge_min_strength > 0:
        strengthen_edges(
            assembled.prior,
            config.edge_min_strength,
            num_sequences=config.calibration_sequences,
            seq_len=config.seq_len,
            seed=derive_seed(config.seed, "generator", "calibration"),
            max_rounds=config.max_edge_rounds,
        )
    return assembled


def build_ablation_generator(config: GeneratorConfig) -> SyntheticGenerator:
    """
    zero: the standard generator. overlap: unmasked cosine means that all switch to one
    shared network while the window norm lies inside `overlap_band`.
    """
    if config.ablation == "none":
        raise ConfigError("expected an ablation, got none", field="ablation")
    if config.ablation == "zero":
        return build_generator(config)
    low, high = config.overlap_band
    dims = [config.window_dim, config.hidden_dim, config.latent_dim]
    shared = Mlp(dims, "cosine", seed=derive_seed(config.seed, "generator", "shared"))
    mean_nets = [
        BandOverlapMlp(
            Mlp(dims, "cosine", seed=derive_seed(config.seed, "generator", "mean", k)),
            shared,
            low=low,
            high=high,
        )
        for k in range(config.num_regimes)
    ]
    dense = torch.ones(
        config.num_regimes, config.latent_dim, config.latent_dim, config.lag, dtype=torch.bool
    )
    return _assemble(config, mean_nets, RegimeGraphSet(dense))


def make_generator(config: GeneratorConfig) -> SyntheticGenerator:
    if config.ablation == "none":
        return build_generator(config)
    return build_ablation_generator(config)


@torch.no_grad()
def generate_dataset(
    config: GeneratorConfig,
    split: str = "train",
    generator: Optional[SyntheticGenerator] = None,
) -> GroundTruth:
    """
    Sample one split. Every split shares the generator built from `config.seed` and draws
    its regimes, latents and observation noise from its own derived streams.
    """
    check_choice(split, SPLITS, "split")
    generator = generator or make_generator(config)
    num_sequences = config.num_sequences if split == "train" else config.num_heldout
    if num_sequences == 0:
        raise ConfigError(f"no sequences requested for the {split} split", field="num_heldout")
    regimes = sample_regime_chain(
        config.num_regimes,
        config.seq_len,
        config.lag,
        torch_generator(config.seed, split, "regimes"),
        num_sequences=num_sequences,
        stay_prob=config.stay_prob,
    )
    latents, _ = sample_msm(
        generator.prior,
        num_sequences,
        config.seq_len,
        seed=derive_seed(config.seed, split, "latents"),
        regimes=regimes,
    )
    noise = torch.randn(
        num_sequences,
        config.seq_len,
        config.obs_dim,
        generator=torch_generator(config.seed, split, "obs_noise"),
        dtype=DTYPE,
    )
    observations = generator.decoder(latents) + config.obs_noise_var**0.5 * noise
    logger.info(
        f"generated {split} split: {num_sequences} sequences of length {config.seq_len},"
        f" setting {config.setting}, ablation {config.ablation}"
    )
    return GroundTruth(
        latents=latents,
        regimes=regimes,
        observations=observations,
        generator=generator,
        config=config,
        split=split,
    )
