from dataclasses import dataclass, field
from typing import List, Optional

from isds.utils.config import check_choice, check_positive
from isds.utils.vars import ANALYTIC_ACTIVATIONS, COVARIANCE_MODES, VAR_FLOOR


@dataclass
class MsmConfig:
    """
    Dimensions and architecture of a multi-lag Markov switching model.
    """

    num_regimes: int = field(default=3, metadata={"help": "K, number of regimes."})
    num_initial: Optional[int] = field(
        default=None,
        metadata={"help": "K0, number of initial Gaussian components. Defaults to K."},
    )
    lag: int = field(default=1, metadata={"help": "M, lag order of the transitions."})
    latent_dim: int = field(default=3, metadata={"help": "m, latent dimension."})
    hidden_dims: List[int] = field(
        default_factory=lambda: [16],
        metadata={"help": "Hidden layer sizes of the transition mean networks."},
    )
    activation: str = field(
        default="cosine",
        metadata={"help": f"Transition activation, one of {ANALYTIC_ACTIVATIONS}."},
    )
    cov_mode: str = field(
        default="heterogeneous",
        metadata={"help": f"Transition covariance mode, one of {COVARIANCE_MODES}."},
    )
    init_transition_var: float = field(
        default=0.1, metadata={"help": "Initial diagonal variance of every transition."}
    )
    var_floor: float = field(
        default=VAR_FLOOR, metadata={"help": "Floor added to every variance."}
    )
    seed: int = field(default=0, metadata={"help": "Seed of the parameter initialization."})

    def __post_init__(self):
        if self.num_initial is None:
            self.num_initial = self.num_regimes
        for name in ("num_regimes", "num_initial", "lag", "latent_dim"):
            check_positive(getattr(self, name), name)
        for d in self.hidden_dims:
            check_positive(d, "hidden_dims")
        check_choice(self.activation, ANALYTIC_ACTIVATIONS, "activation")
        check_choice(self.cov_mode, COVARIANCE_MODES, "cov_mode")
        check_positive(self.init_transition_var, "init_transition_var")
        check_positive(self.var_floor, "var_floor")

    @property
    def window_dim(self) -> int:
        return self.latent_dim * self.lag
