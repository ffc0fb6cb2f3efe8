"""
Runtime checks of the identifiability assumptions on a concrete MsmModel, by sampling
lag windows from a Gaussian.

- m1: no regime pair shares both mean and covariance on a set of nonzero measure
- m2: transition means are analytic
- s2: some regime pair has pairwise distinct covariance ratios across all m dimensions
- m3: masked transition means are constant along their non-parent coordinates
"""
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch

from isds.models.msm.modeling_msm import MsmModel
from isds.modules.nnet import DTYPE, BandOverlapMlp, MaskedMlp
from isds.utils.logging import get_logger
from isds.utils.seed import torch_generator
from isds.utils.vars import ANALYTIC_ACTIVATIONS

logger = get_logger(__name__)

PASS = "PASS"
WARN = "WARN"
FAIL = "FAIL"
NOT_APPLICABLE = "N/A"


@dataclass
class CheckConfig:
    num_points: int = field(default=10_000, metadata={"help": "Number of check windows."})
    scale: float = field(
        default=1.0, metadata={"help": "Std of the Gaussian the check windows are drawn from."}
    )
    tol_eq: float = field(default=1e-6, metadata={"help": "Equality tolerance of m1 and m3."})
    tol_ratio: float = field(
        default=1e-4, metadata={"help": "Relative tolerance for distinct covariance ratios."}
    )
    m1_fail_fraction: float = field(
        default=1e-3, metadata={"help": "m1 fails above this intersection fraction."}
    )
    seed: int = field(default=0, metadata={"help": "Seed of the check windows."})


@dataclass
class AssumptionReport:
    num_points: int
    m1_intersection_fraction: float
    m1_status: str
    m2_status: str
    s2_satisfied_fraction: float
    s2_status: str
    m3_max_deviation: Optional[float]
    m3_status: str
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return FAIL not in (self.m1_status, self.m2_status, self.s2_status, self.m3_status)

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    def format(self) -> str:
        m3 = "-" if self.m3_max_deviation is None else f"{self.m3_max_deviation:.3e}"
        lines = [
            f"m1 {self.m1_status}: intersection fraction {self.m1_intersection_fraction:.4g}"
            f" over {self.num_points} points",
            f"m2 {self.m2_status}",
            f"s2 {self.s2_status}: satisfied fraction {self.s2_satisfied_fraction:.4g}",
            f"m3 {self.m3_status}: max masked deviation {m3}",
        ]
        return "\n".join(lines + [f"note: {note}" for note in self.notes])


def _regime_pairs(num_regimes: int):
    return [(k, j) for k in range(num_regimes) for j in range(k + 1, num_regimes)]


def distinct_ratios(ratios: torch.Tensor, tol_ratio: float) -> torch.Tensor:
    """(P, m) -> (P,), all m ratios pairwise distinct beyond a relative tolerance."""
    gaps = (ratios[:, :, None] - ratios[:, None, :]).abs()
    scale = torch.maximum(ratios[:, :, None].abs(), ratios[:, None, :].abs())
    distinct = gaps > tol_ratio * scale
    off_diagonal = ~torch.eye(ratios.shape[-1], dtype=torch.bool)
    return (distinct | ~off_diagonal).all(-1).all(-1)


def _masked_deviation(net: MaskedMlp, windows: torch.Tensor, generator) -> float:
    deviation = 0.0
    base = net(windows)
    for j in range(net.out_features):
        free = ~net.dependency[j]
        if not free.any():
            continue
        noise = torch.randn(windows.shape, generator=generator, dtype=DTYPE)
        moved = net(windows + noise * free)
        deviation = max(deviation, float((moved[:, j] - base[:, j]).abs().max()))
    return deviation


@torch.no_grad()
def validate_assumptions(model: MsmModel, check: Optional[CheckConfig] = None) -> AssumptionReport:
    check = check or CheckConfig()
    generator = torch_generator(check.seed, "windows")
    windows = check.scale * torch.randn(
        check.num_points, model.window_dim, generator=generator, dtype=DTYPE
    )
    means = model.regime_means(windows)
    variances = model.covariance.variances(means)
    pairs = _regime_pairs(model.num_regimes)
    notes = []

    # m1
    intersect = torch.zeros(check.num_points, dtype=torch.bool)
    for k, j in pairs:
        same_mean = ((means[:, k] - means[:, j]).abs() <= check.tol_eq).all(-1)
        same_cov = ((variances[:, k] - variances[:, j]).abs() <= check.tol_eq).all(-1)
        intersect |= same_mean & same_cov
    m1_fraction = float(intersect.double().mean())
    m1_status = FAIL if m1_fraction > check.m1_fail_fraction else PASS

    # m2
    if any(isinstance(net, BandOverlapMlp) for net in model.mean_nets):
        m2_status = WARN
        notes.append("transition means are only piecewise analytic")
    elif all(net.activation in ANALYTIC_ACTIVATIONS for net in model.mean_nets):
        m2_status = PASS
    else:
        m2_status = FAIL

    # s2
    satisfied = torch.zeros(check.num_points, dtype=torch.bool)
    for k, j in pairs:
        satisfied |= distinct_ratios(variances[:, k] / variances[:, j], check.tol_ratio)
    s2_fraction = float(satisfied.double().mean())
    if model.covariance.mode == "constant":
        s2_status = WARN
        notes.append("constant covariance: identifiable up to an affine map only")
    elif s2_fraction < 1.0 - check.m1_fail_fraction:
        s2_status = WARN
        notes.append("covariance ratios are not distinct everywhere")
    else:
        s2_status = PASS

    # m3
    masked = [net for net in model.mean_nets if isinstance(net, MaskedMlp)]
    if masked:
        m3_deviation = max(_masked_deviation(net, windows, generator) for net in masked)
        m3_status = PASS if m3_deviation <= check.tol_eq else FAIL
    else:
        m3_deviation, m3_status = None, NOT_APPLICABLE

    report = AssumptionReport(
        num_points=check.num_points,
        m1_intersection_fraction=m1_fraction,
        m1_status=m1_status,
        m2_status=m2_status,
        s2_satisfied_fraction=s2_fraction,
        s2_status=s2_status,
        m3_max_deviation=m3_deviation,
        m3_status=m3_status,
        notes=notes,
    )
    if not report.passed:
        logger.warning(f"assumption check failed:\n{report.format()}")
    return report
