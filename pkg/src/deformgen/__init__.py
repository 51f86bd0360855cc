"""Geodesic shooting, bandlimited latent geodesics and conditional diffusion on the 2-D torus."""

from .errors import (ConfigError, DeformgenError, DivergenceError, NumericError,
                     ParseError, ShapeError, StallError)
from .fields import DeformationField, Grid, ScalarField, VectorField

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "ScalarField",
    "VectorField",
    "DeformationField",
    "DeformgenError",
    "ConfigError",
    "ShapeError",
    "NumericError",
    "DivergenceError",
    "StallError",
    "ParseError",
]
