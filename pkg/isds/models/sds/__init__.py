from .configuration_sds import SdsConfig  # noqa: F401
from .graphs import (  # noqa: F401
    RegimeGraphSet,
    edge_strengths,
    extract_regime_graphs,
    graphs_from_masks,
)
from .modeling_sds import (  # noqa: F401
    ElboEstimate,
    SdsModel,
    elbo_and_gradients,
    elbo_objective,
    encode,
    jacobian_penalty,
    reparameterized_sample,
)
from .pca import PcaResult, pca_fit  # noqa: F401
