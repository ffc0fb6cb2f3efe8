import math

from torch.optim import Optimizer
from torch.optim.lr_scheduler import ReduceLROnPlateau

from isds.utils.logging import get_logger

logger = get_logger(__name__)


class RelativeReduceLROnPlateau(ReduceLROnPlateau):
    """
    Maximises an objective that may be negative (a log-likelihood or an ELBO):
    an epoch improves when it beats the best value by `threshold * |best|`.
    """

    def __init__(self, optimizer: Optimizer, factor=0.5, patience=10, threshold=1e-4, min_lr=0):
        super().__init__(
            optimizer,
            mode="max",
            factor=factor,
            patience=patience,
            threshold=threshold,
            threshold_mode="rel",
            min_lr=min_lr,
        )

    def is_better(self, a, best):
        if math.isinf(best):
            return a > best
        return a > best + self.threshold * abs(best)


class PlateauDecay:
    """
    Halves the learning rate each time the objective plateaus, at most `max_decays` times;
    a further plateau asks the caller to stop.
    """

    def __init__(
        self,
        optimizer: Optimizer,
        factor: float = 0.5,
        patience: int = 10,
        threshold: float = 1e-4,
        max_decays: int = 2,
    ):
        self.optimizer = optimizer
        self.scheduler = RelativeReduceLROnPlateau(
            optimizer, factor=factor, patience=patience, threshold=threshold
        )
        self.max_decays = max_decays
        self.num_decays = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, objective: float) -> bool:
        """Returns True once the objective plateaus after the last allowed decay."""
        best_before = self.scheduler.best
        self.scheduler.step(objective)
        plateaued = self.scheduler.num_bad_epochs == 0 and self.scheduler.best == best_before
        if not plateaued:
            return False
        if self.num_decays >= self.max_decays:
            logger.info(f"objective plateaued after {self.num_decays} lr decays, stopping")
            return True
        self.num_decays += 1
        logger.info(f"objective plateaued, lr decayed to {self.lr:.3e}")
        if self.num_decays >= self.max_decays:
            # keep the lr where it is from now on
            self.scheduler.min_lrs = [group["lr"] for group in self.optimizer.param_groups]
        return False
