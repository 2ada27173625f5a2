"""Subject-level regression from bags of image patches.

A shared encoder maps every patch of a subject to a latent vector; an
attention network scores the patches; the scored latents are pooled into one
subject vector that a linear head regresses onto the target. A decoder
reconstructs each patch from its latent so the latent space stays diverse.
"""

from .errors import (DimensionError, DomainError, FormatError, IncompatibilityError, NumericError, SetVecError,
                     UsageError)

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "DomainError", "FormatError", "IncompatibilityError", "NumericError", "SetVecError",
    "UsageError", "__version__",
]
