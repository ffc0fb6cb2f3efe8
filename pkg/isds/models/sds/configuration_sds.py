from dataclasses import dataclass, field
from typing import List

from isds.models.msm.configuration_msm import MsmConfig
from isds.utils.config import check_choice, check_positive
from isds.utils.exceptions import ConfigError
from isds.utils.vars import ACTIVATIONS, VAR_FLOOR


@dataclass
class SdsConfig:
    """
    A switching dynamical system: an MSM prior over latents, a Leaky ReLU decoder with
    diagonal Gaussian noise, and a per-timestep Gaussian encoder.
    """

    obs_dim: int = field(default=10, metadata={"help": "n, observed dimension (n >= m)."})
    msm: MsmConfig = field(default_factory=MsmConfig, metadata={"help": "Prior over latents."})
    decoder_hidden_dims: List[int] = field(
        default_factory=lambda: [128], metadata={"help": "Hidden layer sizes of the decoder."}
    )
    encoder_hidden_dims: List[int] = field(
        default_factory=lambda: [128], metadata={"help": "Hidden layer sizes of the encoder."}
    )
    encoder_activation: str = field(
        default="leaky_relu", metadata={"help": f"Encoder activation, one of {ACTIVATIONS}."}
    )
    negative_slope: float = field(
        default=0.2, metadata={"help": "Leaky ReLU slope of the decoder and encoder."}
    )
    init_obs_var: float = field(
        default=0.1, metadata={"help": "Initial diagonal observation-noise variance."}
    )
    var_floor: float = field(default=VAR_FLOOR, metadata={"help": "Floor of every variance."})
    seed: int = field(default=0, metadata={"help": "Seed of the encoder/decoder initialization."})

    def __post_init__(self):
        check_positive(self.obs_dim, "obs_dim")
        if self.obs_dim < self.msm.latent_dim:
            raise ConfigError(
                f"observed dim {self.obs_dim} is smaller than latent dim {self.msm.latent_dim}",
                field="obs_dim",
            )
        for d in (*self.decoder_hidden_dims, *self.encoder_hidden_dims):
            check_positive(d, "hidden_dims")
        check_choice(self.encoder_activation, ACTIVATIONS, "encoder_activation")
        if not 0.0 < self.negative_slope < 1.0:
            raise ConfigError(f"expected a slope in (0, 1), got {self.negative_slope}", "negative_slope")
        check_positive(self.init_obs_var, "init_obs_var")

    @property
    def latent_dim(self) -> int:
        return self.msm.latent_dim
