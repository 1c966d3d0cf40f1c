"""Anchor-residual action factorization on a deterministic planar testbed."""

__version__ = "0.1.0"

from .core import ActionChunk, LossWeights  # noqa: F401
from .errors import ConfigError, ContractError, NumericsError  # noqa: F401
