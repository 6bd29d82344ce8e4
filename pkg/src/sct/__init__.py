"""Spectral compact training: weights kept as truncated SVD factors (U, s, V)."""

from sct.errors import (
    ConfigError,
    ConvergenceError,
    DegenerateColumnError,
    MaterializationError,
    NumericError,
    RankError,
    SCTError,
    ShapeError,
)
from sct.numerics import matmul, qr_thin, random_orthonormal, svd_truncated
from sct.spectral import (
    SpectralFactors,
    from_dense,
    init_scratch,
    spectral_backward,
    spectral_forward,
    to_dense,
)
from sct.retraction import retract_layer, retract_qr

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DegenerateColumnError",
    "MaterializationError",
    "NumericError",
    "RankError",
    "SCTError",
    "ShapeError",
    "SpectralFactors",
    "from_dense",
    "init_scratch",
    "matmul",
    "qr_thin",
    "random_orthonormal",
    "retract_layer",
    "retract_qr",
    "spectral_backward",
    "spectral_forward",
    "svd_truncated",
    "to_dense",
]
