from .elbow import ELBOW_RHO, ElbowChoice, elbow_select  # noqa: F401
from .sweep import (  # noqa: F401
    GridSpec,
    SelectionCell,
    SelectionChoice,
    SelectionGrid,
    run_cell,
    select_from_grid,
    sweep,
    sweep_efficiency,
)
