from .unet import (
    NetConfig,
    ParamStore,
    VelocityNet,
    init_params,
    param_count,
    param_shapes,
    sinusoidal_features,
    validate_params,
)

__all__ = [
    "NetConfig",
    "ParamStore",
    "VelocityNet",
    "init_params",
    "param_count",
    "param_shapes",
    "sinusoidal_features",
    "validate_params",
]
