"""Synthetic scenes with exact ground truth.

Single-view scenes are defined directly as an analytic depth map (slanted
base plane, smooth terrain ripple, fronto-parallel box faces) so surface
normals follow from exact partial derivatives. Two-view scenes raycast a
world-frame heightfield so both views observe one consistent surface with
world-anchored albedo and shadow fields. Lighting is drawn from the
illumination prior with positivity and directionality acceptance checks.

Stored quantities are quantized to float32 first and the image is rendered
from the quantized maps, so re-rendering from files reproduces the stored
image bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from unrender import energy
from unrender.color import gamma_compress
from unrender.prior import EnvMap
from unrender.shlight import basis_matrix, sh_rotation
from unrender.types import (
    AlbedoMap,
    Camera,
    DepthMap,
    ImageRGB,
    Mask,
    NormalMap,
    PriorModel,
    SHLighting,
    ShadowMap,
)

SHADOW_MIN = 0.3


# ---------------------------------------------------------------------------
# lighting draws

def draw_scene_lighting(prior: PriorModel, rng, normals, albedo=None,
                        scale=0.7, min_shading=0.1, max_product=0.97,
                        min_directionality=0.25, attempts=200):
    """Sample prior lighting that lights a normal set positively.

    Rejects draws whose shading dips below `min_shading` on the given
    normals, whose brightest albedo-times-shading exceeds `max_product`,
    or whose linear-band energy is too weak to be usefully directional.
    """
    flat = np.asarray(normals).reshape(-1, 3)
    basis = np.asarray(basis_matrix(flat))
    amax = 1.0 if albedo is None else float(np.asarray(albedo).max())
    fallback = None
    for trial in range(attempts):
        alpha = rng.normal(size=prior.dim) * scale
        lighting = prior.reconstruct(alpha)
        shading = basis @ lighting.per_channel().T
        if shading.min() < min_shading or amax * shading.max() > max_product:
            continue
        linear_band = lighting.per_channel()[:, 1:4]
        direction = np.linalg.norm(linear_band) / max(lighting.norm(), 1e-12)
        if fallback is None:
            fallback = (alpha, lighting)
        if direction >= min_directionality:
            return alpha, lighting
    if fallback is not None:
        return fallback
    # last resort: a bright diffuse sky, always valid
    alpha = np.zeros(prior.dim)
    return alpha, prior.reconstruct(alpha)


def perturb_normals(normals: NormalMap, mean_deg: float, rng) -> NormalMap:
    """Tangential Gaussian perturbation with the given mean angular error."""
    n = normals.data
    sigma = np.deg2rad(mean_deg) / np.sqrt(np.pi / 2.0)
    ref = np.where(np.abs(n[..., :1]) < 0.9,
                   np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t1 = np.cross(n, ref)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    g1 = rng.normal(size=n.shape[:2]) * sigma
    g2 = rng.normal(size=n.shape[:2]) * sigma
    out = n + g1[..., None] * t1 + g2[..., None] * t2
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    bad = out[..., 2] <= 1e-3
    out[bad] = n[bad]
    return NormalMap(out, normals.valid.copy())


def _quantize_normals(n):
    q = np.asarray(n, dtype=np.float32).astype(np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# single-view depth-defined scene

@dataclass(frozen=True)
class SyntheticScene:
    """Ground-truth bundle for one synthetic view."""

    image: ImageRGB          # stored observation (gamma-encoded, f32 exact)
    albedo: AlbedoMap
    shadow: ShadowMap
    normals: NormalMap
    depth: DepthMap
    sky: Mask
    camera: Camera
    lighting: SHLighting
    lighting_alpha: np.ndarray
    guide: NormalMap
    scene_id: int


def _soft_box(x, y, x0, x1, y0, y1, edge):
    sx = 1.0 / (1.0 + np.exp(-(x - x0) / edge)) * 1.0 / (1.0 + np.exp(-(x1 - x) / edge))
    sy = 1.0 / (1.0 + np.exp(-(y - y0) / edge)) * 1.0 / (1.0 + np.exp(-(y1 - y) / edge))
    return sx * sy


def make_scene(size: int = 64, scene_id: int = 0, guide_noise_deg: float = 10.0,
               prior: Optional[PriorModel] = None) -> SyntheticScene:
    """Terrain-and-boxes scene with piecewise-constant albedo, an analytic
    cast-shadow field in [0.3, 1], and lighting drawn from the prior."""
    if prior is None:
        prior = load_default_prior()
    rng = np.random.default_rng(1_000_003 * (scene_id + 1))
    h = w = size
    f = 1.25 * size
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    cam = Camera(f=f, cx=cx, cy=cy)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xs - cx) / f
    v = (ys - cy) / f

    # base slanted plane with a smooth ripple, both with exact derivatives
    c0 = 3.0
    slope_a = rng.uniform(-0.22, 0.22)
    slope_b = rng.uniform(-0.22, 0.22)
    base = c0 * (1.0 + slope_a * u + slope_b * v)
    base_x = c0 * slope_a / f
    base_y = c0 * slope_b / f
    amp = rng.uniform(0.05, 0.09)
    px = 2.0 * np.pi * rng.integers(1, 3) / w
    py = 2.0 * np.pi * rng.integers(1, 3) / h
    phx = rng.uniform(0, 2 * np.pi)
    phy = rng.uniform(0, 2 * np.pi)
    ripple = 1.0 + amp * np.sin(px * xs + phx) * np.sin(py * ys + phy)
    ripple_x = amp * px * np.cos(px * xs + phx) * np.sin(py * ys + phy)
    ripple_y = amp * py * np.sin(px * xs + phx) * np.cos(py * ys + phy)
    depth = base * ripple
    wx = base_x * ripple + base * ripple_x
    wy = base_y * ripple + base * ripple_y

    # fronto-parallel box faces punched nearer than the terrain
    n_boxes = int(rng.integers(2, 5))
    box_regions = []
    for _ in range(n_boxes):
        bw = int(rng.integers(size // 8, size // 4))
        bh = int(rng.integers(size // 8, size // 4))
        x0 = int(rng.integers(2, w - bw - 2))
        y0 = int(rng.integers(2, h - bh - 2))
        region = np.zeros((h, w), dtype=bool)
        region[y0:y0 + bh, x0:x0 + bw] = True
        local = depth[y0:y0 + bh, x0:x0 + bw].min()
        depth = np.where(region, local * rng.uniform(0.7, 0.85), depth)
        wx = np.where(region, 0.0, wx)
        wy = np.where(region, 0.0, wy)
        box_regions.append((x0, y0, bw, bh))

    nbar = np.stack([-f * wx, -f * wy, (xs - cx) * wx + (ys - cy) * wy + depth],
                    axis=-1)
    normals = _quantize_normals(nbar / np.linalg.norm(nbar, axis=-1, keepdims=True))

    # piecewise-constant albedo palette over blocky regions; kept bright so
    # the albedo <= 1 bound carries shading information into the energy
    palette = rng.uniform(0.72, 0.97, size=(6, 3))
    palette[0] = rng.uniform(0.9, 0.97, size=3)
    bx = max(4, size // 9)
    by = max(4, size // 9)
    idx = (np.floor(xs / bx) + 3.0 * np.floor(ys / by)).astype(int) % 6
    albedo = palette[idx]
    for k, (x0, y0, bw, bh) in enumerate(box_regions):
        albedo[y0:y0 + bh, x0:x0 + bw] = palette[(k + 2) % 6]
    albedo = np.asarray(albedo, dtype=np.float32).astype(np.float64)

    # compact cast shadows anchored next to the boxes: small dense cores
    # reaching the bottom of the [0.3, 1] range plus soft fringes
    shadow = np.ones((h, w))
    for m, (x0, y0, bw, bh) in enumerate(box_regions[:2]):
        dx = rng.uniform(-0.8, 0.8) * bw
        dy = rng.uniform(0.5, 1.1) * bh
        depth_k = rng.uniform(0.55, 0.7) if m == 0 else rng.uniform(0.3, 0.45)
        shadow -= depth_k * _soft_box(xs, ys, x0 + dx, x0 + dx + bw * 0.5,
                                      y0 + dy, y0 + dy + bh * 0.45, edge=0.8)
    shadow = np.clip(shadow, SHADOW_MIN, 1.0)
    shadow = np.asarray(shadow, dtype=np.float32).astype(np.float64)

    alpha, lighting = draw_scene_lighting(prior, rng, normals, albedo)
    shading = np.asarray(basis_matrix(normals)) @ lighting.per_channel().T
    radiance = albedo * shadow[..., None] * shading
    image = np.asarray(gamma_compress(np.clip(radiance, 0.0, 1.0)))
    image = np.asarray(image, dtype=np.float32).astype(np.float64)

    normal_map = NormalMap(normals, np.ones((h, w), dtype=bool))
    guide = perturb_normals(normal_map, guide_noise_deg,
                            np.random.default_rng(7_000_003 * (scene_id + 1)))
    return SyntheticScene(
        image=ImageRGB(image, encoding="srgb_gamma"),
        albedo=AlbedoMap(albedo),
        shadow=ShadowMap(shadow),
        normals=normal_map,
        depth=DepthMap(np.asarray(depth, dtype=np.float32).astype(np.float64)),
        sky=Mask(np.ones((h, w), dtype=bool)),
        camera=cam,
        lighting=lighting,
        lighting_alpha=np.asarray(alpha),
        guide=guide,
        scene_id=scene_id)


# ---------------------------------------------------------------------------
# two-view world scenes

@dataclass(frozen=True)
class SyntheticView:
    image: ImageRGB
    albedo: AlbedoMap
    shadow: ShadowMap
    normals: NormalMap
    depth: DepthMap
    sky: Mask
    camera: Camera
    lighting: SHLighting
    guide: NormalMap


@dataclass(frozen=True)
class PairScene:
    views: tuple  # (SyntheticView, SyntheticView)
    scene_id: int
    mode: str


def _look_at_camera(center, target, f, cx, cy) -> Camera:
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down_c = np.cross(forward, right)
    R = np.stack([right, down_c, forward])
    return Camera(f=f, cx=cx, cy=cy, R=R, t=-R @ center)


def _raycast_heightfield(cam: Camera, height_fn, size, t_max=9.0, steps=400):
    """First intersection of each pixel ray with the surface y = -h(x, z).

    Returns (depth with NaN holes, world hit points). Depth equals the ray
    parameter for the unnormalized direction ((x-cx)/f, (y-cy)/f, 1), i.e.
    the camera-frame z of the hit.
    """
    h = w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d_cam = np.stack([(xs - cam.cx) / cam.f, (ys - cam.cy) / cam.f,
                      np.ones_like(xs)], axis=-1)
    d_world = d_cam.reshape(-1, 3) @ cam.R
    center = cam.center()

    ts = np.linspace(0.05, t_max, steps)
    pts = center[None, None, :] + ts[:, None, None] * d_world[None, :, :]
    g = pts[..., 1] + height_fn(pts[..., 0], pts[..., 2])  # <0 above surface
    below = g >= 0.0
    first = np.argmax(below, axis=0)
    hit = below.any(axis=0) & (first > 0)
    lo = np.where(hit, ts[np.maximum(first - 1, 0)], 0.0)
    hi = np.where(hit, ts[first], 1.0)

    def g_of(t):
        p = center[None, :] + t[:, None] * d_world
        return p[:, 1] + height_fn(p[:, 0], p[:, 2])

    for _ in range(50):
        mid = 0.5 * (lo + hi)
        gm = g_of(mid)
        take_hi = gm >= 0.0
        hi = np.where(take_hi, mid, hi)
        lo = np.where(take_hi, lo, mid)
    t_hit = 0.5 * (lo + hi)
    world = center[None, :] + t_hit[:, None] * d_world
    depth = np.where(hit, t_hit, np.nan).reshape(h, w)
    return depth, world.reshape(h, w, 3), hit.reshape(h, w)


class _Terrain:
    """Smooth world heightfield with analytic gradients."""

    def __init__(self, rng, amplitude=0.32):
        self.amp = amplitude
        self.ax = rng.uniform(1.5, 2.6)
        self.az = rng.uniform(1.5, 2.6)
        self.px = rng.uniform(0, 2 * np.pi)
        self.pz = rng.uniform(0, 2 * np.pi)
        self.bx = rng.uniform(3.0, 4.5)
        self.bz = rng.uniform(3.0, 4.5)
        self.qx = rng.uniform(0, 2 * np.pi)
        self.qz = rng.uniform(0, 2 * np.pi)

    def height(self, x, z):
        return self.amp * (1.0 + np.sin(self.ax * x + self.px) * np.sin(self.az * z + self.pz)
                           + 0.4 * np.sin(self.bx * x + self.qx) * np.cos(self.bz * z + self.qz)) / 2.0

    def gradient(self, x, z):
        hx = self.amp * (self.ax * np.cos(self.ax * x + self.px) * np.sin(self.az * z + self.pz)
                         + 0.4 * self.bx * np.cos(self.bx * x + self.qx) * np.cos(self.bz * z + self.qz)) / 2.0
        hz = self.amp * (self.az * np.sin(self.ax * x + self.px) * np.cos(self.az * z + self.pz)
                         - 0.4 * self.bz * np.sin(self.bx * x + self.qx) * np.sin(self.bz * z + self.qz)) / 2.0
        return hx, hz


class _Flat:
    def height(self, x, z):
        return np.zeros_like(np.asarray(x))

    def gradient(self, x, z):
        zero = np.zeros_like(np.asarray(x))
        return zero, zero


def _world_albedo_blocky(rng):
    palette = rng.uniform(0.15, 0.85, size=(6, 3))
    bx = rng.uniform(0.5, 0.8)
    bz = rng.uniform(0.5, 0.8)

    def fn(x, z):
        idx = (np.floor((x + 16.0) / bx) + 3.0 * np.floor((z + 16.0) / bz)).astype(int) % 6
        return palette[idx]

    return fn


def _world_albedo_smooth(rng):
    phase = rng.uniform(0, 2 * np.pi, size=3)
    freq = rng.uniform(1.2, 2.2, size=3)

    def fn(x, z):
        chans = [0.5 + 0.3 * np.sin(freq[c] * x + phase[c]) * np.cos(freq[c] * z - phase[c])
                 for c in range(3)]
        return np.clip(np.stack(chans, axis=-1), 0.05, 0.95)

    return fn


def _world_shadow(rng, n_blobs=3):
    params = [(rng.uniform(-1.2, 1.2), rng.uniform(0.6, 2.6),
               rng.uniform(0.25, 0.5), rng.uniform(0.35, 0.6))
              for _ in range(n_blobs)]

    def fn(x, z):
        s = np.ones_like(np.asarray(x, dtype=np.float64))
        for (x0, z0, radius, depth_k) in params:
            s = s - depth_k * np.exp(-((x - x0) ** 2 + (z - z0) ** 2) / radius ** 2)
        return np.clip(s, SHADOW_MIN, 1.0)

    return fn


def make_pair_scene(size: int = 64, scene_id: int = 0, mode: str = "rotated",
                    flat: bool = False, smooth_albedo: bool = False,
                    guide_noise_deg: float = 10.0,
                    prior: Optional[PriorModel] = None) -> PairScene:
    """Two calibrated views of one world surface.

    mode "rotated": both views see the same world illumination (their
    lighting vectors differ exactly by the relative-rotation coefficient
    transform). mode "tinted": each view gets an independently drawn
    lighting with a different colour balance.
    """
    if mode not in ("rotated", "tinted"):
        raise ValueError(f"unknown pair mode {mode!r}")
    if prior is None:
        prior = load_default_prior()
    rng = np.random.default_rng(2_000_003 * (scene_id + 1))
    surface = _Flat() if flat else _Terrain(rng)
    albedo_fn = _world_albedo_smooth(rng) if smooth_albedo else _world_albedo_blocky(rng)
    shadow_fn = _world_shadow(rng)

    f = 1.25 * size
    cx = cy = (size - 1) / 2.0
    target = np.array([0.0, -0.15, 1.6])
    jitter = rng.uniform(-0.08, 0.08, size=2)
    cams = [
        _look_at_camera(np.array([-0.5 + jitter[0], -1.7, -1.25]), target, f, cx, cy),
        _look_at_camera(np.array([0.55 + jitter[1], -1.55, -1.05]), target, f, cx, cy),
    ]

    views = []
    per_view_lighting = []
    if mode == "rotated":
        # validate positivity on world-frame normals (shading is frame-invariant)
        gx, gz = surface.gradient(np.linspace(-2, 2, 24)[None, :],
                                  np.linspace(-0.5, 3.5, 24)[:, None])
        nw = np.stack([gx, np.ones_like(gx), gz], axis=-1)
        nw /= np.linalg.norm(nw, axis=-1, keepdims=True)
        world_dirs = nw.reshape(-1, 3)
        alpha_w, light_w = draw_scene_lighting(prior, rng, world_dirs)
        for cam in cams:
            block = sh_rotation(cam.R)
            per_view_lighting.append(block.apply(light_w))
    else:
        tints = [np.array([1.25, 1.0, 0.75]), np.array([0.75, 1.0, 1.3])]
        for k, cam in enumerate(cams):
            sub_rng = np.random.default_rng(3_000_017 * (scene_id + 1) + k)
            gx, gz = surface.gradient(np.linspace(-2, 2, 24)[None, :],
                                      np.linspace(-0.5, 3.5, 24)[:, None])
            nw = np.stack([gx, np.ones_like(gx), gz], axis=-1)
            nw /= np.linalg.norm(nw, axis=-1, keepdims=True)
            ncam = nw.reshape(-1, 3) @ cam.R.T
            _, light = draw_scene_lighting(prior, sub_rng, ncam)
            tinted = light.per_channel() * tints[k][:, None]
            tinted = tinted / np.linalg.norm(tinted)
            per_view_lighting.append(SHLighting(tinted.reshape(27)))

    for k, cam in enumerate(cams):
        depth, world, hit = _raycast_heightfield(cam, surface.height, size)
        gx, gz = surface.gradient(world[..., 0], world[..., 2])
        n_world = np.stack([gx, np.ones_like(gx), gz], axis=-1)
        n_world /= np.linalg.norm(n_world, axis=-1, keepdims=True)
        n_cam = n_world @ cam.R.T
        ok = hit & (n_cam[..., 2] > 1e-6)
        n_cam = np.where(ok[..., None], n_cam, np.array([0.0, 0.0, 1.0]))
        n_cam = _quantize_normals(n_cam)

        albedo = albedo_fn(world[..., 0], world[..., 2])
        albedo = np.where(ok[..., None], albedo, 0.5)
        albedo = np.asarray(albedo, dtype=np.float32).astype(np.float64)
        shadow = shadow_fn(world[..., 0], world[..., 2])
        shadow = np.where(ok, shadow, 1.0)
        shadow = np.asarray(shadow, dtype=np.float32).astype(np.float64)

        lighting = per_view_lighting[k]
        shading = np.asarray(basis_matrix(n_cam)) @ lighting.per_channel().T
        radiance = albedo * shadow[..., None] * np.maximum(shading, 0.0)
        image = np.asarray(gamma_compress(np.clip(radiance, 0.0, 1.0)),
                           dtype=np.float32).astype(np.float64)

        normal_map = NormalMap(n_cam, ok)
        guide = perturb_normals(normal_map, guide_noise_deg,
                                np.random.default_rng(9_000_019 * (scene_id + 1) + k))
        views.append(SyntheticView(
            image=ImageRGB(image, encoding="srgb_gamma"),
            albedo=AlbedoMap(albedo),
            shadow=ShadowMap(shadow),
            normals=normal_map,
            depth=DepthMap(np.where(ok, np.asarray(depth, dtype=np.float32), np.nan).astype(np.float64)),
            sky=Mask(ok),
            camera=cam,
            lighting=lighting,
            guide=guide))
    return PairScene(views=(views[0], views[1]), scene_id=scene_id, mode=mode)


def pair_views_for(scene: PairScene, target: int):
    """Build the PairView supervising `target` from the other view.

    The fixed partner slots carry the other view's ground truth; joint
    solves override them with live parameters.
    """
    from unrender.color import gamma_expand

    src = 1 - target
    vt, vs = scene.views[target], scene.views[src]
    fr = energy.make_resample(vt.depth, vs.camera, vt.camera, vs.image.shape,
                              src_valid=vs.sky.data)
    ilin_src = np.asarray(gamma_expand(vs.image.data))
    proj_img = np.asarray(fr.apply(ilin_src))
    rot = energy.lighting_rotation_between(vs.camera, vt.camera)
    return energy.PairView(resample=fr, image_proj_linear=proj_img,
                           rot_block9=rot.block9, shadow=vs.shadow.data,
                           lighting=vs.lighting.coeffs, albedo=vs.albedo.data)


# ---------------------------------------------------------------------------
# procedural outdoor environment maps and the shipped prior

def make_outdoor_envmap(height: int = 64, rng=None) -> EnvMap:
    """Sky gradient + sun lobe + ground bounce, HDR-ish, seeded."""
    rng = np.random.default_rng(0) if rng is None else rng
    width = 2 * height
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * np.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), -np.cos(th), np.sin(th) * np.sin(ph)],
                    axis=-1)

    zenith = np.array([0.35, 0.5, 0.95]) * rng.uniform(0.6, 1.4)
    horizon = np.array([0.9, 0.85, 0.8]) * rng.uniform(0.7, 1.5)
    tsky = np.clip(np.cos(th), 0.0, 1.0)[..., None]
    sky = zenith * tsky + horizon * (1.0 - tsky)

    sun_theta = rng.uniform(0.25, 1.25)
    sun_phi = rng.uniform(0, 2 * np.pi)
    sun_dir = np.array([np.sin(sun_theta) * np.cos(sun_phi), -np.cos(sun_theta),
                        np.sin(sun_theta) * np.sin(sun_phi)])
    sun_col = np.array([1.0, 0.85, 0.6]) * rng.uniform(4.0, 40.0)
    spread = rng.uniform(0.06, 0.18)
    cosang = np.clip(dirs @ sun_dir, -1.0, 1.0)
    sun = sun_col * np.exp((cosang - 1.0) / spread ** 2)[..., None]

    ground_col = rng.uniform(0.05, 0.3, size=3) * horizon
    below = (th > np.pi / 2)[..., None]
    radiance = np.where(below, ground_col[None, None, :] * np.ones_like(sky), sky + sun)
    return EnvMap(np.maximum(radiance, 0.0))


def build_default_prior(n_envs: int = 79, height: int = 64, seed: int = 20_240,
                        dim: int = 18) -> PriorModel:
    """Regenerate the shipped prior from procedural environments."""
    from unrender.prior import augment_lighting_batch, build_prior, sh_project_envmap

    rng = np.random.default_rng(seed)
    lightings = [sh_project_envmap(make_outdoor_envmap(height, rng)).coeffs
                 for _ in range(n_envs)]
    samples = augment_lighting_batch(np.stack(lightings))
    return build_prior(samples, dim=dim)


def load_default_prior() -> PriorModel:
    """The shipped illumination prior (79 procedural outdoor environments,
    rotation-augmented, D = 18)."""
    global _DEFAULT_PRIOR
    if _DEFAULT_PRIOR is None:
        import importlib.resources as resources
        import json

        path = resources.files("unrender").joinpath("data/default_prior.json")
        _DEFAULT_PRIOR = PriorModel.from_json(json.loads(path.read_text()))
    return _DEFAULT_PRIOR


_DEFAULT_PRIOR = None
