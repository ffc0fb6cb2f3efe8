from .alignment import AffineAlignment, fit_affine_alignment  # noqa: F401
from .causal import CausalF1, causal_f1  # noqa: F401
from .mcc import MccResult, mcc  # noqa: F401
from .mean_function import (  # noqa: F401
    MeanFunctionScore,
    best_r2_permutation,
    mean_function_l2,
    partition_windows,
)
from .regime import RegimeF1, regime_f1  # noqa: F401
from .report import EvalConfig, MetricReport, evaluate_model, write_metric_rows  # noqa: F401
