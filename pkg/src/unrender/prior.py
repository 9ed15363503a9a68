"""Statistical natural-illumination model.

HDR equirectangular environment maps are projected onto the order-2 SH
basis by sin(theta)-weighted least squares (the basis is not orthonormal,
so this is a 9x9 normal-equations solve per channel, not naive quadrature).
Unit-normalized lighting vectors are augmented over viewer rotations and a
PCA model (mean, principal directions, whitening scales) is fitted.

Environment frame: up is -y (image y points down); a texel at row theta in
[0, pi] (top = up) and column phi in [0, 2*pi) maps to the direction
(sin(theta)cos(phi), -cos(theta), sin(theta)sin(phi)). The augmentation
rotates about the vertical axis (azimuth, full circle) and about the two
horizontal axes (pitch and roll, limited range); rotations compose
extrinsically as azimuth @ pitch @ roll.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from unrender.shlight import basis_matrix, sh_rotation
from unrender.types import PriorCoeffs, PriorModel, SHLighting

AZIMUTH_STEPS = 36                      # full circle in pi/18 increments
TILT_STEPS = np.arange(-3, 4)           # pitch/roll in (-pi/6, pi/6), pi/18 apart
ROTATIONS_PER_ENVIRONMENT = AZIMUTH_STEPS * len(TILT_STEPS) ** 2  # 1764
DEFAULT_DIM = 18


@dataclass(frozen=True)
class EnvMap:
    """Equirectangular HDR radiance map, width = 2 * height."""

    data: np.ndarray  # (H, 2H, 3)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[1] != 2 * arr.shape[0]:
            raise ValueError(f"EnvMap wants (H, 2H, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("EnvMap must be finite")
        if arr.min() < 0:
            raise ValueError("EnvMap radiance must be non-negative")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def envmap_directions(height, width):
    """Unit direction and solid-angle weight per texel centre."""
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * np.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), -np.cos(th), np.sin(th) * np.sin(ph)],
                    axis=-1)
    weights = np.sin(th)  # the constant dtheta*dphi factor cancels in the fit
    return dirs, weights


def sh_project_envmap(env: EnvMap) -> SHLighting:
    """Weighted least-squares SH fit of an environment, unit-normalized."""
    dirs, w = envmap_directions(env.height, env.width)
    basis = np.asarray(basis_matrix(dirs)).reshape(-1, 9)
    wflat = w.reshape(-1)
    gram = basis.T @ (basis * wflat[:, None])
    rad = env.data.reshape(-1, 3)
    rhs = basis.T @ (rad * wflat[:, None])  # (9, 3)
    per_channel = np.linalg.solve(gram, rhs).T  # (3, 9)
    return normalize_lighting(SHLighting(per_channel.reshape(27)))


def normalize_lighting(lighting: SHLighting) -> SHLighting:
    """Scale to unit Euclidean norm; zero lighting is an error."""
    norm = lighting.norm()
    if norm <= 0.0 or not np.isfinite(norm):
        raise ValueError("cannot normalize zero-energy lighting")
    return SHLighting(lighting.coeffs / norm)


def rotate_envmap(env: EnvMap, R) -> EnvMap:
    """Resample an environment so its SH projection rotates by sh_rotation(R)."""
    R = np.asarray(R, dtype=np.float64)
    h, w = env.height, env.width
    dirs, _ = envmap_directions(h, w)
    src = dirs @ R  # rows R^T omega
    theta = np.arccos(np.clip(-src[..., 1], -1.0, 1.0))
    phi = np.mod(np.arctan2(src[..., 2], src[..., 0]), 2.0 * np.pi)
    r = np.clip(theta / np.pi * h - 0.5, 0.0, h - 1.0)
    c = phi / (2.0 * np.pi) * w - 0.5
    r0 = np.clip(np.floor(r).astype(int), 0, h - 2)
    fr = r - r0
    c0 = np.floor(c).astype(int)
    fc = c - c0
    c0 = np.mod(c0, w)
    c1 = np.mod(c0 + 1, w)
    img = env.data
    out = (img[r0, c0] * ((1 - fr) * (1 - fc))[..., None] +
           img[r0, c1] * ((1 - fr) * fc)[..., None] +
           img[r0 + 1, c0] * (fr * (1 - fc))[..., None] +
           img[r0 + 1, c1] * (fr * fc)[..., None])
    return EnvMap(np.maximum(out, 0.0))


def _axis_rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


@lru_cache(maxsize=1)
def _augmentation_blocks():
    """All 1764 coefficient-rotation blocks, (1764, 9, 9)."""
    step = np.pi / 18.0
    blocks = []
    for k in range(AZIMUTH_STEPS):
        r_az = _axis_rotation("y", k * step)
        for mp in TILT_STEPS:
            r_pitch = _axis_rotation("x", mp * step)
            for mr in TILT_STEPS:
                r = r_az @ r_pitch @ _axis_rotation("z", mr * step)
                blocks.append(sh_rotation(r).block9)
    return np.stack(blocks)


def augment_lighting_batch(lightings):
    """Rotation augmentation of (N, 27) lighting rows -> (N * 1764, 27).

    Coefficient rotations are not orthogonal in this basis, so every sample
    is rescaled back to its input norm.
    """
    arr = np.asarray(lightings, dtype=np.float64).reshape(-1, 3, 9)
    blocks = _augmentation_blocks()  # (M, 9, 9)
    out = np.einsum("mab,ncb->nmca", blocks, arr)  # (N, M, 3, 9)
    out = out.reshape(arr.shape[0], blocks.shape[0], 27)
    in_norm = np.linalg.norm(arr.reshape(-1, 27), axis=1)[:, None, None]
    norms = np.linalg.norm(out, axis=2, keepdims=True)
    out = out * (in_norm / np.where(norms > 0, norms, 1.0))
    return out.reshape(-1, 27)


def augment_rotations(lighting: SHLighting):
    """All 1764 rotated copies of one lighting vector (identity included)."""
    rows = augment_lighting_batch(lighting.coeffs[None, :])
    return [SHLighting(r) for r in rows]


def build_prior(samples, dim: int = DEFAULT_DIM) -> PriorModel:
    """PCA illumination model from lighting samples.

    sigma holds the per-component standard deviations of the centred sample
    set, so projected coefficients are whitened (approximately N(0, I)).
    """
    rows = np.stack([s.coeffs if isinstance(s, SHLighting) else np.asarray(s)
                     for s in samples]).astype(np.float64)
    n = rows.shape[0]
    if n < dim + 1:
        raise ValueError(f"build_prior needs at least {dim + 1} samples, got {n}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > 1e-10 * s[0]).sum()) if s[0] > 0 else 0
    if rank < dim:
        raise ValueError(f"samples span only rank {rank}, need {dim}")
    q = vt[:dim].T
    # deterministic column signs: largest-magnitude entry positive
    flips = np.sign(q[np.argmax(np.abs(q), axis=0), np.arange(dim)])
    q = q * flips[None, :]
    sigma = s[:dim] / np.sqrt(n)
    return PriorModel(mean=mean, Q=q, sigma=sigma)


def prior_loss(coeffs) -> float:
    """Squared Euclidean norm of the prior coefficients."""
    alpha = coeffs.alpha if isinstance(coeffs, PriorCoeffs) else np.asarray(coeffs)
    return float(alpha @ alpha)
