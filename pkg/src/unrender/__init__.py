"""Outdoor inverse rendering by direct energy minimization.

Recovers per-pixel albedo, surface normals, a multiplicative shadow channel
and order-2 spherical-harmonic colour lighting from a single photograph, or
from calibrated multiview pairs with depth supervision.
"""

from jax import config as _jax_config

# All numerics in this package run in double precision on CPU. Must happen
# before the first jax array is created anywhere in the process.
_jax_config.update("jax_enable_x64", True)

from unrender.types import (  # noqa: E402
    AlbedoMap,
    Camera,
    DepthMap,
    ImageRGB,
    LossWeights,
    Mask,
    NormalMap,
    NormalParams,
    ShadowMap,
    SHLighting,
)
from unrender.color import GAMMA, encode_gamma, linearize, to_lab  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AlbedoMap",
    "Camera",
    "DepthMap",
    "GAMMA",
    "ImageRGB",
    "LossWeights",
    "Mask",
    "NormalMap",
    "NormalParams",
    "SHLighting",
    "ShadowMap",
    "encode_gamma",
    "linearize",
    "to_lab",
    "__version__",
]
