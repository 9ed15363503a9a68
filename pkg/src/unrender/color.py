"""Gamma handling and the LAB feature transform.

Stored images are assumed gamma-encoded with a pure power law (gamma 2.2,
not the piecewise sRGB curve); `linearize` inverts it. `to_lab` converts
linear RGB to CIE L*a*b* under D65 and rescales all three channels to O(1).

Array-level helpers (`lab_features`, `gamma_expand`) accept jax arrays and
are differentiable, so they can sit inside the energy terms.
"""

from __future__ import annotations

import jax.numpy as jnp
import numpy as np

from unrender.types import ENCODING_GAMMA, ENCODING_LINEAR, ImageRGB

GAMMA = 2.2

# Linear sRGB -> XYZ under D65.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)  # XYZ of linear (1,1,1)

_LAB_DELTA = 6.0 / 29.0


def gamma_expand(x):
    """Raise gamma-encoded values to the power 2.2. Differentiable."""
    x = jnp.asarray(x)
    safe = jnp.where(x > 0.0, x, 1.0)
    return jnp.where(x > 0.0, safe ** GAMMA, 0.0)


def gamma_compress(x):
    """Inverse of `gamma_expand` on non-negative values."""
    x = jnp.asarray(x)
    safe = jnp.where(x > 0.0, x, 1.0)
    return jnp.where(x > 0.0, safe ** (1.0 / GAMMA), 0.0)


def _lab_f(t):
    # Cube root above (6/29)^3, linear continuation below; the linear branch
    # also covers slightly negative inputs from unclamped renders.
    d3 = _LAB_DELTA ** 3
    safe = jnp.where(t > d3, t, 1.0)
    return jnp.where(t > d3, safe ** (1.0 / 3.0),
                     t / (3.0 * _LAB_DELTA ** 2) + 4.0 / 29.0)


def lab_features(rgb_linear):
    """Linear RGB (..., 3) to scaled L*a*b* features (..., 3).

    L is divided by 100 and a, b by 128 so every channel is O(1).
    """
    rgb = jnp.asarray(rgb_linear)
    xyz = rgb @ _RGB_TO_XYZ.T
    fx = _lab_f(xyz[..., 0] / _WHITE_D65[0])
    fy = _lab_f(xyz[..., 1] / _WHITE_D65[1])
    fz = _lab_f(xyz[..., 2] / _WHITE_D65[2])
    lum = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return jnp.stack([lum / 100.0, a / 128.0, b / 128.0], axis=-1)


def linearize(img: ImageRGB) -> ImageRGB:
    """Invert the stored nonlinear gamma (power 2.2)."""
    if img.encoding != ENCODING_GAMMA:
        raise ValueError("image is already linear; refusing to linearize twice")
    return ImageRGB(np.asarray(gamma_expand(img.data)), encoding=ENCODING_LINEAR)


def encode_gamma(img: ImageRGB) -> ImageRGB:
    """Gamma-encode a linear image for storage or display."""
    if img.encoding != ENCODING_LINEAR:
        raise ValueError("image is not linear; refusing to gamma-encode")
    if img.data.min() < 0.0 or img.data.max() > 1.0:
        raise ValueError("gamma encoding expects values in [0, 1]")
    return ImageRGB(np.asarray(gamma_compress(img.data)), encoding=ENCODING_GAMMA)


def to_lab(img: ImageRGB) -> np.ndarray:
    """LAB feature map of a linear image, shape (H, W, 3)."""
    if img.encoding != ENCODING_LINEAR:
        raise ValueError("to_lab expects a linear image")
    return np.asarray(lab_features(img.data))
