"""Order-2 spherical-harmonic lighting: basis, rendering, closed-form
lighting estimation, coefficient rotation, and hemisphere renders.

The basis for a unit normal n is

    b(n) = [1, nx, ny, nz, 3nz^2-1, nx*ny, nx*nz, ny*nz, nx^2-ny^2]

and a colour lighting vector holds 27 coefficients channel-major (r, g, b).
The basis is not orthonormal, so coefficient rotations are generally not
orthogonal matrices; they are built exactly by solving a small linear system
over sampled directions and verified via the render-equivariance identity.

Array-level functions (`basis_matrix`, `shade`, `render_radiance`,
`fit_lighting`, `fit_lighting_alpha`) accept jax arrays and are
differentiable; the pseudoinverse derivative follows Golub & Pereyra.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, partial

import jax
import jax.numpy as jnp
import numpy as np

from unrender.color import gamma_expand
from unrender.types import (
    AlbedoMap,
    ImageRGB,
    Mask,
    NormalMap,
    PriorCoeffs,
    PriorModel,
    SHLighting,
    ShadowMap,
)

ENCODING_LINEAR = "linear"

# Relative singular-value cutoff of the lighting pseudoinverse, applied per
# colour block (the stacked system is block-diagonal across channels).
SV_CUTOFF = 1e-8


def basis_matrix(normals):
    """SH basis rows b(n) for normals of shape (..., 3); returns (..., 9)."""
    n = jnp.asarray(normals)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    one = jnp.ones_like(x)
    return jnp.stack(
        [one, x, y, z, 3.0 * z * z - 1.0, x * y, x * z, y * z, x * x - y * y],
        axis=-1)


def sh_basis(n) -> np.ndarray:
    """Basis row for a single unit normal; rejects non-unit input."""
    n = np.asarray(n, dtype=np.float64)
    if n.shape != (3,):
        raise ValueError("sh_basis expects a single 3-vector")
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("sh_basis expects a unit vector")
    return np.asarray(basis_matrix(n))


def shade(normals, lighting):
    """Per-pixel RGB shading B(n) @ l; normals (..., 3), lighting (27,)."""
    return basis_matrix(normals) @ jnp.asarray(lighting).reshape(3, 9).T


def render_radiance(albedo, shadow, normals, lighting):
    """Unclamped linear radiance albedo * shadow * B(n) l. Differentiable."""
    return jnp.asarray(albedo) * jnp.asarray(shadow)[..., None] * shade(normals, lighting)


def render(albedo: AlbedoMap, shadow: ShadowMap, normals: NormalMap,
           lighting: SHLighting, mask: Mask) -> ImageRGB:
    """Render the image-formation model on the mask; off-mask pixels are 0.

    Output is clamped below at 0 for storage; energy terms use the unclamped
    `render_radiance` internally.
    """
    if not (albedo.shape == shadow.shape == normals.shape == mask.shape):
        raise ValueError("render: map shapes disagree")
    on = mask.data & normals.valid
    img = np.asarray(render_radiance(albedo.data, shadow.data, normals.data, lighting.coeffs))
    img = np.where(on[..., None], np.maximum(img, 0.0), 0.0)
    return ImageRGB(img, encoding=ENCODING_LINEAR)


def _stack_channel_major(values, mask):
    """(H, W, 3) restricted to mask, stacked [r..., g..., b...] -> (3K,)."""
    sel = values[mask]
    return jnp.concatenate([sel[:, 0], sel[:, 1], sel[:, 2]])


def fit_lighting(albedo, shadow, normals, igamma_stacked, mask):
    """Least-squares lighting from linearized observations. Differentiable.

    albedo/shadow/normals are full maps; igamma_stacked is the channel-major
    (3K,) vector of linearized observations on the mask. Returns (27,).
    The stacked system is block-diagonal across colour channels, so it is
    solved as three K x 9 pseudoinverse problems.
    """
    basis = basis_matrix(normals)[mask]  # (K, 9)
    shad = jnp.asarray(shadow)[mask]
    alb = jnp.asarray(albedo)[mask]
    k = basis.shape[0]
    coeffs = []
    for c in range(3):
        a_c = (alb[:, c] * shad)[:, None] * basis
        coeffs.append(jnp.linalg.pinv(a_c, rtol=SV_CUTOFF) @ igamma_stacked[c * k:(c + 1) * k])
    return jnp.concatenate(coeffs)


def fit_lighting_alpha(albedo, shadow, normals, igamma_stacked, mask,
                       prior_mean, prior_basis_scaled):
    """Prior-subspace lighting coefficients, solved linearly. Differentiable.

    Substitutes l = Qs @ alpha + mean into the stacked least-squares system
    and solves the (3K, D) problem for alpha. Returns (D,).
    """
    basis = basis_matrix(normals)[mask]  # (K, 9)
    shad = jnp.asarray(shadow)[mask]
    alb = jnp.asarray(albedo)[mask]
    mean = jnp.asarray(prior_mean).reshape(3, 9)
    qs = jnp.asarray(prior_basis_scaled)  # (27, D)
    k = basis.shape[0]
    rows = []
    rhs = []
    for c in range(3):
        w = alb[:, c] * shad
        rows.append(w[:, None] * (basis @ qs[9 * c:9 * (c + 1), :]))
        rhs.append(igamma_stacked[c * k:(c + 1) * k] - w * (basis @ mean[c]))
    m = jnp.concatenate(rows)
    r = jnp.concatenate(rhs)
    return jnp.linalg.pinv(m, rtol=SV_CUTOFF) @ r


def _rank(matrix):
    s = np.linalg.svd(np.asarray(matrix), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > SV_CUTOFF * s[0]).sum())


def _check_solve_inputs(img, albedo, shadow, normals, mask, min_pixels):
    if not (img.shape == albedo.shape == shadow.shape == normals.shape == mask.shape):
        raise ValueError("solve_lighting: map shapes disagree")
    if img.encoding != "srgb_gamma":
        raise ValueError("solve_lighting expects a gamma-encoded observation")
    on = mask.data & normals.valid
    if int(on.sum()) < min_pixels:
        raise ValueError(f"solve_lighting needs at least {min_pixels} usable pixels")
    return on


def solve_lighting(img: ImageRGB, albedo: AlbedoMap, shadow: ShadowMap,
                   normals: NormalMap, mask: Mask):
    """Closed-form lighting fit over foreground pixels.

    Returns (SHLighting, degenerate) where degenerate means the stacked
    system had rank < 27 after the singular-value cutoff; the minimum-norm
    solution is still returned.
    """
    on = _check_solve_inputs(img, albedo, shadow, normals, mask, 27)
    igamma = _stack_channel_major(np.asarray(gamma_expand(img.data)), on)
    coeffs = np.asarray(fit_lighting(albedo.data, shadow.data, normals.data, igamma, on))
    basis = np.asarray(basis_matrix(normals.data))[on]
    shad = shadow.data[on]
    rank = sum(_rank((albedo.data[on][:, c] * shad)[:, None] * basis) for c in range(3))
    return SHLighting(coeffs), rank < 27


def solve_lighting_in_prior(img: ImageRGB, albedo: AlbedoMap, shadow: ShadowMap,
                            normals: NormalMap, mask: Mask, prior: PriorModel):
    """Lighting fit constrained to the prior subspace.

    Returns (PriorCoeffs, SHLighting, degenerate); degenerate means the
    reduced (3K, D) system lost rank under the cutoff.
    """
    on = _check_solve_inputs(img, albedo, shadow, normals, mask, prior.dim)
    igamma = _stack_channel_major(np.asarray(gamma_expand(img.data)), on)
    qs = prior.basis_scaled()
    alpha = np.asarray(fit_lighting_alpha(albedo.data, shadow.data, normals.data,
                                          igamma, on, prior.mean, qs))
    basis = np.asarray(basis_matrix(normals.data))[on]
    shad = shadow.data[on]
    rows = [(albedo.data[on][:, c] * shad)[:, None] * (basis @ qs[9 * c:9 * (c + 1), :])
            for c in range(3)]
    degenerate = _rank(np.concatenate(rows)) < prior.dim
    return PriorCoeffs(alpha), prior.reconstruct(alpha), degenerate


def _fibonacci_directions(n=32):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


@dataclass(frozen=True)
class SHRotation:
    """Coefficient transform matching a rotation of the lighting environment.

    For the 9x9 block M9 and any unit direction w:
        b(w) @ (M9 @ l9) == b(R^T w) @ l9
    The 27x27 matrix applies the same block to each colour channel.
    """

    block9: np.ndarray  # (9, 9)

    @property
    def matrix27(self):
        return np.kron(np.eye(3), self.block9)

    def apply(self, lighting: SHLighting) -> SHLighting:
        per = lighting.per_channel() @ self.block9.T
        return SHLighting(per.reshape(27))

    def compose(self, other: "SHRotation") -> "SHRotation":
        return SHRotation(np.asarray(self.block9 @ other.block9))


@lru_cache(maxsize=None)
def _sample_basis():
    dirs = _fibonacci_directions(32)
    x = np.asarray(basis_matrix(dirs))
    return dirs, np.linalg.pinv(x)


def sh_rotation(R) -> SHRotation:
    """Exact coefficient transform for a 3D rotation.

    The order-2 basis spans a rotation-invariant polynomial space, so the
    block is the exact least-squares solution over any spanning direction
    set (32 Fibonacci-sphere directions here).
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-9 \
            or abs(np.linalg.det(R) - 1.0) > 1e-9:
        raise ValueError("sh_rotation expects a proper rotation matrix")
    dirs, x_pinv = _sample_basis()
    x_rot = np.asarray(basis_matrix(dirs @ R))  # rows b(R^T w)
    return SHRotation(x_pinv @ x_rot)


def hemisphere_mask(resolution: int) -> Mask:
    """Disc of the orthographic front-hemisphere render."""
    u, v = _hemisphere_grid(resolution)
    return Mask(u * u + v * v < 1.0)


def _hemisphere_grid(resolution):
    if resolution < 16:
        raise ValueError("hemisphere resolution must be at least 16")
    half = resolution / 2.0
    xs = (np.arange(resolution) + 0.5 - half) / half
    u, v = np.meshgrid(xs, xs)
    return u, v


def render_hemisphere(lighting: SHLighting, resolution: int) -> ImageRGB:
    """Orthographic render of the front hemisphere (n_z > 0), albedo 1.

    Background pixels are zero; use `hemisphere_mask` for the disc.
    """
    u, v = _hemisphere_grid(resolution)
    inside = u * u + v * v < 1.0
    nz = np.sqrt(np.maximum(0.0, 1.0 - u * u - v * v))
    normals = np.stack([u, v, nz], axis=-1)
    img = np.asarray(shade(normals, lighting.coeffs))
    img = np.where(inside[..., None], np.maximum(img, 0.0), 0.0)
    return ImageRGB(img, encoding=ENCODING_LINEAR)
