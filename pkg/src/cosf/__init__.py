"""Coarse/super-resolve/fine deformable registration for 4D volumetric
sequences, trained and validated on synthetic breathing phantoms."""

__version__ = "0.1.0"

from .core import (DisplacementField, Grid3, PhiPair, RegistrationPair,
                   Sequence4D, Volume, normalize_intensity)

__all__ = [
    "DisplacementField", "Grid3", "PhiPair", "RegistrationPair",
    "Sequence4D", "Volume", "normalize_intensity", "__version__",
]
