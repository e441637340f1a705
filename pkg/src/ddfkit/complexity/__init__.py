from .costs import (
    KINDS,
    CostReport,
    LayerCost,
    LayerSpec,
    NetworkDescriptor,
    TopologyError,
    cost_table,
    layer_cost,
    network_cost,
)
from .descriptors import (
    BUILTINS,
    FLOPS_TOL,
    PARAMS_TOL,
    PUBLISHED,
    PUBLISHED_SIGMA,
    builtin,
    descriptor_from_dict,
    expand_bottleneck,
    load_descriptor,
    resnet_dict,
)

__all__ = [
    "BUILTINS",
    "FLOPS_TOL",
    "PARAMS_TOL",
    "PUBLISHED",
    "PUBLISHED_SIGMA",
    "KINDS",
    "CostReport",
    "LayerCost",
    "LayerSpec",
    "NetworkDescriptor",
    "TopologyError",
    "builtin",
    "cost_table",
    "descriptor_from_dict",
    "expand_bottleneck",
    "layer_cost",
    "load_descriptor",
    "network_cost",
    "resnet_dict",
]
