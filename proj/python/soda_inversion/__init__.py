"""Exact input reconstruction for small causal transformers.

The heavy lifting lives in the compiled extension; this package re-exports
its surface. See the repository README for the CLI and file formats.
"""

from ._core import (
    ALL,
    CapacityError,
    ConfigError,
    ContractError,
    GcgParams,
    Model,
    ModelConfig,
    ParamError,
    ParseError,
    ShapeError,
    SodaParams,
    Target,
    __version__,
    gen_dataset,
    init_model,
    invert,
    load_model,
    make_target,
    replay_loss,
)

__all__ = [
    "ALL",
    "CapacityError",
    "ConfigError",
    "ContractError",
    "GcgParams",
    "Model",
    "ModelConfig",
    "ParamError",
    "ParseError",
    "ShapeError",
    "SodaParams",
    "Target",
    "__version__",
    "gen_dataset",
    "init_model",
    "invert",
    "load_model",
    "make_target",
    "replay_loss",
]
