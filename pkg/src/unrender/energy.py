"""Differentiable energy terms of the inverse-rendering objective.

Five losses: perceptual appearance against the shadow-free observation,
angular error to guide normals, cross-view albedo consistency, cross-view
rendering consistency with rotated lighting, and the squared-norm prior on
lighting coefficients.

The perceptual error compares feature stacks computed by pluggable
transforms ("lab" colour features and a multiscale-gradient "pyramid-grad"
stand-in for pretrained convolutional features; precomputed per-image
stacks can be loaded from files). Each transform contributes the root of
the count-normalized sum of squared differences over valid feature
elements, scaled by the transform weight.

All terms are pure functions of an `EnergyState`'s free parameters and are
differentiable with jax; masks and resampling stencils are fixed per scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import jax.numpy as jnp
import numpy as np

from unrender import geometry
from unrender.color import gamma_expand, lab_features
from unrender.shlight import shade
from unrender.types import (
    AlbedoMap,
    Camera,
    DepthMap,
    ImageRGB,
    LossWeights,
    Mask,
    NormalMap,
    PriorModel,
    SHLighting,
    ShadowMap,
    SHADOW_FLOOR,
)

ARCCOS_CLAMP = 1e-7  # keeps the angular loss differentiable at alignment
PYRAMID_LEVELS = 3

_BLUR5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# ---------------------------------------------------------------------------
# feature transforms

def _blur_and_halve(img):
    """5-tap separable Gaussian blur (reflect padding) then 2x decimation."""
    x = jnp.asarray(img)
    pad = jnp.pad(x, ((2, 2), (0, 0), (0, 0)), mode="reflect")
    x = sum(w * pad[k:k + x.shape[0]] for k, w in enumerate(_BLUR5))
    pad = jnp.pad(x, ((0, 0), (2, 2), (0, 0)), mode="reflect")
    x = sum(w * pad[:, k:k + img.shape[1]] for k, w in enumerate(_BLUR5))
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    return x[: 2 * h2: 2, : 2 * w2: 2]


def _halve_mask(mask):
    """Strict-all-valid 2x downsampling: a pixel is valid iff its 2x2 block is."""
    h2, w2 = mask.shape[0] // 2, mask.shape[1] // 2
    m = mask[: 2 * h2, : 2 * w2]
    return m[0::2, 0::2] & m[0::2, 1::2] & m[1::2, 0::2] & m[1::2, 1::2]


def _grad_levels(img):
    """Forward-difference x/y gradients at each pyramid level."""
    out = []
    level = jnp.asarray(img)
    for k in range(PYRAMID_LEVELS):
        out.append(level[:, 1:] - level[:, :-1])
        out.append(level[1:, :] - level[:-1, :])
        if k + 1 < PYRAMID_LEVELS:
            level = _blur_and_halve(level)
    return out


def _grad_level_masks(mask):
    out = []
    level = np.asarray(mask, dtype=bool)
    for k in range(PYRAMID_LEVELS):
        out.append(level[:, 1:] & level[:, :-1])
        out.append(level[1:, :] & level[:-1, :])
        if k + 1 < PYRAMID_LEVELS:
            level = _halve_mask(level)
    return out


@dataclass(frozen=True)
class FeatureTransform:
    """Named pure mapping from a linear RGB image to weighted feature stacks.

    `compute` maps an image to a list of per-level feature arrays and
    `level_masks` maps the pixel mask to the matching validity arrays. A
    file-backed transform instead carries precomputed stacks for the two
    comparison sides ("x" and "y").
    """

    name: str
    weight: float
    compute: Optional[Callable] = None
    level_masks: Optional[Callable] = None
    precomputed: Optional[dict] = None

    def features(self, side, img):
        if self.precomputed is not None:
            return [jnp.asarray(f) for f in self.precomputed[side]]
        return self.compute(img)

    def masks(self, mask):
        if self.precomputed is not None:
            return [np.asarray(mask, dtype=bool) for _ in self.precomputed["x"]]
        return self.level_masks(mask)


def lab_transform(weight=0.5) -> FeatureTransform:
    return FeatureTransform(
        name="lab", weight=float(weight),
        compute=lambda img: [lab_features(img)],
        level_masks=lambda mask: [np.asarray(mask, dtype=bool)])


def pyramid_grad_transform(weight=2.5) -> FeatureTransform:
    return FeatureTransform(
        name="pyramid-grad", weight=float(weight),
        compute=_grad_levels, level_masks=_grad_level_masks)


def file_transform(weight, x_levels, y_levels, name="file") -> FeatureTransform:
    """Transform backed by externally computed feature stacks.

    Feature arrays must match the image resolution per level; the pixel
    mask is applied unchanged at each level. Suited to comparing two fixed
    images (an optimized render cannot be featurized by a file).
    """
    if len(x_levels) != len(y_levels):
        raise ValueError("file_transform: x and y stacks must have equal depth")
    return FeatureTransform(name=name, weight=float(weight),
                            precomputed={"x": list(x_levels), "y": list(y_levels)})


def default_transforms(weights: LossWeights):
    return (lab_transform(weights.w_lab), pyramid_grad_transform(weights.w_pyramid))


# ---------------------------------------------------------------------------
# perceptual error

def _masked_rms(diffs, masks):
    """sqrt(sum of squared masked diffs / count); exact 0 at equality."""
    ssq = 0.0
    count = 0
    for d, m in zip(diffs, masks):
        channels = d.shape[2] if d.ndim == 3 else 1
        md = d * jnp.asarray(m, dtype=d.dtype)[..., None] if d.ndim == 3 else d * m
        ssq = ssq + jnp.sum(md * md)
        count += int(m.sum()) * channels
    safe = jnp.where(ssq > 0, ssq, 1.0)
    return jnp.where(ssq > 0, jnp.sqrt(safe / count), 0.0), count


def perceptual_error_arrays(x, y, mask, transforms):
    """Weighted perceptual error between two linear images (jax arrays)."""
    total = 0.0
    for t in transforms:
        masks = t.masks(mask)
        fx = t.features("x", x)
        fy = t.features("y", y)
        val, count = _masked_rms([a - b for a, b in zip(fx, fy)], masks)
        if count == 0:
            raise ValueError(f"perceptual_error: transform {t.name!r} has no valid elements")
        total = total + t.weight * val
    return total


def perceptual_error(x: ImageRGB, y: ImageRGB, mask: Mask, transforms) -> float:
    if x.encoding != "linear" or y.encoding != "linear":
        raise ValueError("perceptual_error expects linear images")
    if x.shape != y.shape or x.shape != mask.shape:
        raise ValueError("perceptual_error: shape mismatch")
    if mask.count() == 0:
        raise ValueError("perceptual_error: empty mask")
    return float(perceptual_error_arrays(x.data, y.data, mask.data, transforms))


# ---------------------------------------------------------------------------
# shadow-free observation

def shadow_free_arrays(ilin, shadow):
    """min(1, linear observation / shadow), elementwise. Differentiable."""
    return jnp.minimum(1.0, jnp.asarray(ilin) / jnp.asarray(shadow)[..., None])


def shadow_free(img: ImageRGB, shadow: ShadowMap) -> ImageRGB:
    """Divide the estimated shadow out of the observation and clamp at one."""
    if img.encoding != "srgb_gamma":
        raise ValueError("shadow_free expects the stored (gamma-encoded) image")
    if img.shape != shadow.shape:
        raise ValueError("shadow_free: shape mismatch")
    ilin = gamma_expand(img.data)
    return ImageRGB(np.asarray(shadow_free_arrays(ilin, shadow.data)), encoding="linear")


# ---------------------------------------------------------------------------
# parameter coding

def decode_albedo(raw):
    return 0.5 * (jnp.tanh(raw) + 1.0)


def decode_shadow(raw):
    return SHADOW_FLOOR + (1.0 - SHADOW_FLOOR) * 0.5 * (jnp.tanh(raw) + 1.0)


def decode_normals(pq):
    v = jnp.concatenate([pq, jnp.ones(pq.shape[:-1] + (1,))], axis=-1)
    return v / jnp.linalg.norm(v, axis=-1, keepdims=True)


def decode_lighting(alpha, prior_mean, prior_basis_scaled):
    return jnp.asarray(prior_basis_scaled) @ alpha + jnp.asarray(prior_mean)


def encode_albedo(albedo):
    a = np.clip(np.asarray(albedo), 1e-4, 1.0 - 1e-4)
    return np.arctanh(2.0 * a - 1.0)


def encode_shadow(shadow):
    s = (np.asarray(shadow) - SHADOW_FLOOR) / (1.0 - SHADOW_FLOOR)
    return np.arctanh(2.0 * np.clip(s, 1e-4, 1.0 - 1e-4) - 1.0)


# ---------------------------------------------------------------------------
# fixed cross-view resampling (differentiable in the sampled values)

@dataclass(frozen=True)
class FixedResample:
    """Frozen bilinear stencil of a cross-projection onto a target view."""

    index: np.ndarray    # (4, H, W) flat source indices
    weight: np.ndarray   # (4, H, W)
    valid: np.ndarray    # (H, W)
    src_shape: tuple

    def apply(self, src):
        """Sample a source map (H', W') or (H', W', C); zero off-mask."""
        src = jnp.asarray(src)
        squeeze = src.ndim == 2
        flat = src.reshape(self.src_shape[0] * self.src_shape[1], -1)
        out = sum(jnp.asarray(self.weight[k])[..., None] * flat[self.index[k]]
                  for k in range(4))
        out = out * jnp.asarray(self.valid, dtype=out.dtype)[..., None]
        return out[..., 0] if squeeze else out


def make_resample(depth_tgt: DepthMap, cam_src: Camera, cam_tgt: Camera,
                  src_shape, src_valid=None) -> FixedResample:
    """Build the proj_{src->tgt} stencil from target depth and both cameras."""
    corr = geometry.compute_correspondence(depth_tgt, cam_src, cam_tgt, src_shape)
    i0, j0, fx, fy = geometry.bilinear_support(corr, src_shape)
    sh, sw = src_shape
    if src_valid is None:
        src_valid = np.ones(src_shape, dtype=bool)
    src_valid = np.asarray(src_valid, dtype=bool)
    corners = [(i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)]
    support_ok = np.logical_and.reduce([src_valid[ii, jj] for ii, jj in corners])
    valid = corr.valid & support_ok
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    weights = np.where(valid[None], weights, 0.0)
    index = np.stack([ii * sw + jj for ii, jj in corners])
    return FixedResample(index=index, weight=weights, valid=valid, src_shape=(sh, sw))


# ---------------------------------------------------------------------------
# loss terms (array level)

def appearance_term(albedo, normals, lighting, shadow, ilin, sky, transforms):
    """Perceptual error between the shadow-free observation and albedo * B l."""
    render = jnp.asarray(albedo) * shade(normals, lighting)
    target = shadow_free_arrays(ilin, shadow)
    return perceptual_error_arrays(render, target, sky, transforms)


def normal_guide_term(normals_est, guide_normals, joint_mask):
    """Mean angular error (radians) over the joint validity mask."""
    count = int(np.asarray(joint_mask).sum())
    if count == 0:
        raise ValueError("normal supervision: empty joint mask")
    dots = jnp.sum(jnp.asarray(normals_est) * jnp.asarray(guide_normals), axis=-1)
    dots = jnp.clip(dots, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    ang = jnp.arccos(dots) * jnp.asarray(joint_mask, dtype=dots.dtype)
    return jnp.sum(ang) / count


def albedo_consistency_term(albedo_i, albedo_j, resample: FixedResample,
                            sky_i, transforms):
    mask = np.asarray(sky_i, dtype=bool) & resample.valid
    projected = resample.apply(albedo_j)
    return perceptual_error_arrays(jnp.asarray(albedo_i), projected, mask, transforms)


def cross_render_term(albedo_i, normals_i, lighting_j, rot_block9, shadow_j,
                      image_proj_linear, resample: FixedResample, sky_i, transforms):
    """Compare the projected shadow-free view j against i's re-render.

    `image_proj_linear` is the fixed cross-projection of view j's linearized
    observation; `shadow_j` and `lighting_j` may be live optimization
    quantities of view j.
    """
    mask = np.asarray(sky_i, dtype=bool) & resample.valid
    shad_p = resample.apply(shadow_j)
    shad_p = jnp.where(jnp.asarray(mask), shad_p, 1.0)  # avoid 0/0 off-mask
    target = jnp.minimum(1.0, jnp.asarray(image_proj_linear) / shad_p[..., None])
    l9 = jnp.asarray(lighting_j).reshape(3, 9) @ jnp.asarray(rot_block9).T
    render = jnp.asarray(albedo_i) * shade(normals_i, l9.reshape(27))
    return perceptual_error_arrays(target, render, mask, transforms)


def lighting_prior_term(alpha):
    alpha = jnp.asarray(alpha)
    return jnp.sum(alpha * alpha)


# ---------------------------------------------------------------------------
# energy state and total loss

@dataclass(frozen=True)
class SceneInputs:
    """Fixed per-view observation data for the optimizer."""

    igamma: np.ndarray          # (H, W, 3) stored (gamma-encoded) image
    ilin: np.ndarray            # (H, W, 3) linearized observation
    sky: np.ndarray             # (H, W) foreground mask
    prior: PriorModel
    guide_normals: Optional[np.ndarray] = None  # (H, W, 3)
    guide_valid: Optional[np.ndarray] = None    # (H, W)

    @property
    def shape(self):
        return self.sky.shape

    @classmethod
    def from_observation(cls, img: ImageRGB, sky: Mask, prior: PriorModel,
                         guide: Optional[NormalMap] = None):
        if img.encoding != "srgb_gamma":
            raise ValueError("SceneInputs expects the stored gamma-encoded image")
        if img.shape != sky.shape:
            raise ValueError("SceneInputs: image and mask shapes disagree")
        ilin = np.asarray(gamma_expand(img.data))
        return cls(igamma=img.data, ilin=ilin, sky=sky.data, prior=prior,
                   guide_normals=None if guide is None else guide.data,
                   guide_valid=None if guide is None else guide.valid)


@dataclass(frozen=True)
class PairView:
    """What one view contributes when supervising another (target) view.

    Carries the fixed projection stencil, the fixed cross-projected linear
    image, and the lighting-coefficient rotation from this view's camera
    frame into the target's. For single-view evaluation the partner's
    shadow / lighting / albedo are fixed arrays; in joint pair solves they
    are decoded live from the partner state.
    """

    resample: FixedResample
    image_proj_linear: np.ndarray  # (H, W, 3) proj of j's linearized image
    rot_block9: np.ndarray         # (9, 9) lighting rotation j -> i
    shadow: Optional[np.ndarray] = None    # (H', W') fixed partner shadow
    lighting: Optional[np.ndarray] = None  # (27,) fixed partner lighting
    albedo: Optional[np.ndarray] = None    # (H', W', 3) fixed partner albedo


@dataclass(frozen=True)
class Supervision:
    """Optional supervision attached to one view's solve."""

    pair_views: tuple = ()   # PairView instances supervising this view

    @property
    def has_pairs(self):
        return len(self.pair_views) > 0


@dataclass
class EnergyState:
    """Free parameters of one view plus its fixed scene inputs.

    Albedo and shadow live as pre-squash values (tanh-coded), normals as
    the two-parameter (p, q) representation, lighting as whitened prior
    coefficients; decoded quantities therefore always satisfy their range
    invariants.
    """

    params: dict
    scene: SceneInputs

    def decoded(self):
        albedo = np.asarray(decode_albedo(self.params["albedo_raw"]))
        shadow = np.asarray(decode_shadow(self.params["shadow_raw"]))
        normals = np.asarray(decode_normals(self.params["normal_pq"]))
        alpha = np.asarray(self.params["light_alpha"])
        lighting = self.scene.prior.reconstruct(alpha)
        return (AlbedoMap(albedo), ShadowMap(np.clip(shadow, SHADOW_FLOOR, 1.0)),
                NormalMap(normals, np.ones(shadow.shape, dtype=bool)),
                alpha, lighting)


def _decode_all(params, scene: SceneInputs):
    albedo = decode_albedo(params["albedo_raw"])
    shadow = decode_shadow(params["shadow_raw"])
    normals = decode_normals(params["normal_pq"])
    lighting = decode_lighting(params["light_alpha"], scene.prior.mean,
                               scene.prior.basis_scaled())
    return albedo, shadow, normals, lighting


def total_loss_arrays(params, scene: SceneInputs, supervision: Supervision,
                      weights: LossWeights, transforms=None,
                      partner_quantities=None):
    """Weighted total energy and per-term breakdown (jax scalars).

    `partner_quantities`, when given, is a list parallel to
    `supervision.pair_views` of (albedo_j, shadow_j, lighting_j) live
    arrays; otherwise the fixed arrays stored on each PairView are used.
    Absent supervision terms contribute nothing and appear as None in the
    breakdown.
    """
    transforms = default_transforms(weights) if transforms is None else transforms
    albedo, shadow, normals, lighting = _decode_all(params, scene)

    terms = {"appearance": None, "nm": None, "albedo": None,
             "cross_rend": None, "lighting": None}
    terms["appearance"] = appearance_term(albedo, normals, lighting, shadow,
                                          scene.ilin, scene.sky, transforms)
    terms["lighting"] = lighting_prior_term(params["light_alpha"])

    if scene.guide_normals is not None:
        joint = scene.guide_valid & scene.sky
        terms["nm"] = normal_guide_term(normals, scene.guide_normals, joint)

    if supervision.has_pairs:
        alb_terms = []
        cross_terms = []
        for k, pv in enumerate(supervision.pair_views):
            if partner_quantities is not None:
                alb_j, shad_j, light_j = partner_quantities[k]
            else:
                alb_j, shad_j, light_j = pv.albedo, pv.shadow, pv.lighting
            alb_terms.append(albedo_consistency_term(
                albedo, alb_j, pv.resample, scene.sky, transforms))
            cross_terms.append(cross_render_term(
                albedo, normals, light_j, pv.rot_block9, shad_j,
                pv.image_proj_linear, pv.resample, scene.sky, transforms))
        terms["albedo"] = sum(alb_terms) / len(alb_terms)
        terms["cross_rend"] = sum(cross_terms) / len(cross_terms)

    total = (weights.appearance * terms["appearance"]
             + weights.lighting * terms["lighting"])
    if terms["nm"] is not None:
        total = total + weights.normals * terms["nm"]
    if terms["albedo"] is not None:
        total = total + weights.albedo * terms["albedo"]
    if terms["cross_rend"] is not None:
        total = total + weights.cross_render * terms["cross_rend"]
    return total, terms


def total_loss(state: EnergyState, supervision: Supervision = Supervision(),
               weights: LossWeights = LossWeights(), transforms=None):
    """Total energy of a state; returns (float, breakdown dict).

    The breakdown carries None for terms whose supervision is absent, plus
    the weights used, matching the serialized report layout.
    """
    total, terms = total_loss_arrays(state.params, state.scene, supervision,
                                     weights, transforms)
    breakdown = {k: (None if v is None else float(v)) for k, v in terms.items()}
    breakdown["total"] = float(total)
    breakdown["weights"] = weights.to_json()
    return float(total), breakdown


# ---------------------------------------------------------------------------
# public single-operation wrappers

def appearance_loss(state: EnergyState, weights: LossWeights = LossWeights(),
                    transforms=None) -> float:
    transforms = default_transforms(weights) if transforms is None else transforms
    albedo, shadow, normals, lighting = _decode_all(state.params, state.scene)
    return float(appearance_term(albedo, normals, lighting, shadow,
                                 state.scene.ilin, state.scene.sky, transforms))


def normal_supervision_loss(est: NormalMap, guide: NormalMap) -> float:
    if est.shape != guide.shape:
        raise ValueError("normal_supervision_loss: shape mismatch")
    joint = est.valid & guide.valid
    return float(normal_guide_term(est.data, guide.data, joint))


def albedo_consistency_loss(albedo_i: AlbedoMap, albedo_j: AlbedoMap,
                            depth_i: DepthMap, cam_i: Camera, cam_j: Camera,
                            sky_i: Mask, src_valid=None,
                            weights: LossWeights = LossWeights(),
                            transforms=None) -> float:
    """Perceptual distance between albedo_i and proj_{j->i}(albedo_j)."""
    transforms = default_transforms(weights) if transforms is None else transforms
    fr = make_resample(depth_i, cam_j, cam_i, albedo_j.shape, src_valid)
    if not (np.asarray(sky_i.data) & fr.valid).any():
        raise ValueError("albedo_consistency_loss: empty joint mask")
    return float(albedo_consistency_term(albedo_i.data, albedo_j.data, fr,
                                         sky_i.data, transforms))


def cross_render_loss(state_i: EnergyState, view_j: PairView,
                      weights: LossWeights = LossWeights(),
                      transforms=None) -> float:
    transforms = default_transforms(weights) if transforms is None else transforms
    albedo, shadow, normals, lighting = _decode_all(state_i.params, state_i.scene)
    if not (state_i.scene.sky & view_j.resample.valid).any():
        raise ValueError("cross_render_loss: empty joint mask")
    return float(cross_render_term(albedo, normals, view_j.lighting,
                                   view_j.rot_block9, view_j.shadow,
                                   view_j.image_proj_linear, view_j.resample,
                                   state_i.scene.sky, transforms))


def lighting_rotation_between(cam_from: Camera, cam_to: Camera):
    """SH coefficient rotation taking lighting from one camera frame to another."""
    from unrender.shlight import sh_rotation

    return sh_rotation(cam_to.R @ cam_from.R.T)
