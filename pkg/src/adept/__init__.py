"""Offline RL with an adaptively re-weighted diffusion world model, at toy scale."""

from .config import ExperimentConfig, desk_config, load_config
from .errors import (
    AdeptError,
    BadMagicError,
    ConfigError,
    ContractError,
    FormatError,
    GenerationError,
    MalformedHeaderError,
    NumericError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)

__version__ = "0.1.0"
