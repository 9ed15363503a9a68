"""Data ingestion and preprocessing: view records, the 200-crop resize
convention with exact camera adjustment, overlapping-pair selection, and
guide-normal preparation.

Resizing scales focal length and principal point by s = target/min(H, W)
and cropping shifts the principal point, so projections transform exactly
as (x, y) -> (s*x - ox, s*y - oy). Images are resampled bilinearly; depth
maps and masks use nearest-neighbour to keep holes and labels crisp.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from unrender import fileio, geometry
from unrender.color import gamma_expand
from unrender.geometry import GroundPlane, fit_ground_plane, inpaint_ground_normals
from unrender.types import Camera, DepthMap, ImageRGB, Mask, NormalMap

CROP_SIZE = 200
HISTOGRAM_BINS = 64
HISTOGRAM_R_MAX = 0.9
CAMERA_DISTANCE_FACTOR = 2.0    # times the median inter-camera spacing
CENTROID_DISTANCE_FACTOR = 0.25  # times the scene diameter


@dataclass(frozen=True)
class ViewRecord:
    """Paths of one calibrated view's files."""

    image: str
    camera: str
    depth: Optional[str] = None
    sky_mask: Optional[str] = None
    ground_mask: Optional[str] = None
    guide_normals: Optional[str] = None

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__
                if getattr(self, k) is not None}

    @classmethod
    def from_json(cls, obj, base=None):
        kwargs = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        if base is not None:
            kwargs = {k: str(Path(base) / v) for k, v in kwargs.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class LoadedView:
    """One view's data in memory, shapes verified."""

    image: ImageRGB
    camera: Camera
    depth: Optional[DepthMap] = None
    sky: Optional[Mask] = None
    ground: Optional[Mask] = None
    guide: Optional[NormalMap] = None

    def __post_init__(self):
        shape = self.image.shape
        for name in ("depth", "sky", "ground", "guide"):
            v = getattr(self, name)
            if v is not None and v.shape != shape:
                raise ValueError(f"view {name} shape {v.shape} != image shape {shape}")

    @property
    def sky_or_full(self):
        return self.sky if self.sky is not None else Mask(np.ones(self.image.shape, bool))


def load_view(record: ViewRecord) -> LoadedView:
    img_path = Path(record.image)
    if img_path.suffix.lower() == ".pfm":
        image = ImageRGB(np.clip(fileio.read_pfm(record.image), 0.0, 1.0))
    else:
        image = fileio.read_png(record.image)
    camera = Camera.from_json(fileio.read_json(record.camera))
    depth = sky = ground = guide = None
    if record.depth:
        depth = DepthMap(fileio.read_pfm(record.depth))
    if record.sky_mask:
        sky = fileio.read_mask_png(record.sky_mask)
    if record.ground_mask:
        ground = fileio.read_mask_png(record.ground_mask)
    if record.guide_normals:
        data = fileio.read_pfm(record.guide_normals).astype(np.float64)
        norms = np.linalg.norm(data, axis=-1)
        valid = (norms > 0.5) & (data[..., 2] > 0)
        unit = data / np.where(norms > 0, norms, 1.0)[..., None]
        unit[~valid] = (0.0, 0.0, 1.0)
        guide = NormalMap(unit, valid)
    return LoadedView(image=image, camera=camera, depth=depth, sky=sky,
                      ground=ground, guide=guide)


# ---------------------------------------------------------------------------
# resize / crop

def resize_bilinear(data, scale):
    """Origin-aligned bilinear resize of (H, W) or (H, W, C) float data."""
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape[:2]
    nh, nw = int(round(h * scale)), int(round(w * scale))
    ys = np.minimum(np.arange(nh) / scale, h - 1.0)
    xs = np.minimum(np.arange(nw) / scale, w - 1.0)
    y0 = np.minimum(ys.astype(int), h - 2) if h > 1 else np.zeros(nh, int)
    x0 = np.minimum(xs.astype(int), w - 2) if w > 1 else np.zeros(nw, int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if data.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    a = data[np.ix_(y0, x0)]
    b = data[np.ix_(y0, np.minimum(x0 + 1, w - 1))]
    c = data[np.ix_(np.minimum(y0 + 1, h - 1), x0)]
    d = data[np.ix_(np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1))]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def resize_nearest(data, scale):
    data = np.asarray(data)
    h, w = data.shape[:2]
    nh, nw = int(round(h * scale)), int(round(w * scale))
    ys = np.clip(np.round(np.arange(nh) / scale).astype(int), 0, h - 1)
    xs = np.clip(np.round(np.arange(nw) / scale).astype(int), 0, w - 1)
    return data[np.ix_(ys, xs)]


@dataclass(frozen=True)
class ViewTransform:
    """Resize scale and crop offset mapping an original view to a crop."""

    scale: float
    ox: int
    oy: int
    size: int

    def adjust_camera(self, cam: Camera) -> Camera:
        return Camera(f=self.scale * cam.f,
                      cx=self.scale * cam.cx - self.ox,
                      cy=self.scale * cam.cy - self.oy,
                      R=cam.R, t=cam.t)

    def apply_image(self, data, nearest=False):
        resized = resize_nearest(data, self.scale) if nearest \
            else resize_bilinear(data, self.scale)
        return resized[self.oy:self.oy + self.size, self.ox:self.ox + self.size]


def plan_crops(valid_counts_shape, valid, size):
    """Greedy non-overlapping crop placement by valid-pixel count.

    Returns a list of (oy, ox). Always returns at least one crop; further
    crops require a positive valid count. Tie-breaks favour the smallest
    (oy, ox) for determinism.
    """
    h, w = valid_counts_shape
    if h < size or w < size:
        raise ValueError(f"image smaller than {size} after resize")
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(valid.astype(np.int64), axis=0), axis=1)

    def count(oy, ox):
        return (integral[oy + size, ox + size] - integral[oy, ox + size]
                - integral[oy + size, ox] + integral[oy, ox])

    positions = [(oy, ox) for oy in range(h - size + 1) for ox in range(w - size + 1)]
    chosen = []
    while positions:
        best = max(positions, key=lambda p: (count(*p), -p[0], -p[1]))
        if chosen and count(*best) <= 0:
            break
        chosen.append(best)
        positions = [p for p in positions
                     if abs(p[0] - best[0]) >= size or abs(p[1] - best[1]) >= size]
    return chosen


def preprocess(image: ImageRGB, camera: Camera, depth: Optional[DepthMap] = None,
               size: int = CROP_SIZE):
    """Resize so the smaller side equals `size`, then crop square views.

    Crops are placed greedily to maximise defined-depth pixels (everything
    counts as defined when no depth is given). Returns a list of
    (ImageRGB, Camera, ViewTransform).
    """
    h, w = image.shape
    if min(h, w) < 1:
        raise ValueError("empty image")
    scale = size / min(h, w)
    resized = resize_bilinear(image.data, scale)
    nh, nw = resized.shape[:2]
    if nh < size or nw < size:
        raise ValueError(f"image smaller than {size} pixels after resize")
    if depth is not None:
        dvalid = resize_nearest(np.isfinite(depth.data), scale)
    else:
        dvalid = np.ones((nh, nw), dtype=bool)
    out = []
    for oy, ox in plan_crops((nh, nw), dvalid, size):
        tf = ViewTransform(scale=scale, ox=ox, oy=oy, size=size)
        crop = ImageRGB(np.clip(resized[oy:oy + size, ox:ox + size], 0.0, 1.0),
                        encoding=image.encoding)
        out.append((crop, tf.adjust_camera(camera), tf))
    return out


# ---------------------------------------------------------------------------
# pair selection

def backprojected_centroid(view: LoadedView):
    """World centroid of the view's valid depth pixels."""
    if view.depth is None or not view.depth.valid.any():
        return None
    h, w = view.depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    m = view.depth.valid
    pts = geometry.backproject(view.camera,
                               np.stack([xs[m], ys[m]], axis=-1),
                               view.depth.data[m])
    return pts.mean(axis=0)


def _grayscale_linear(rgb_linear):
    return np.mean(rgb_linear, axis=-1)


def _histogram_correlation(view_i: LoadedView, view_j: LoadedView) -> float:
    """Pearson correlation of grayscale histograms over cross-projected pixels."""
    lin_i = np.asarray(gamma_expand(view_i.image.data))
    lin_j = np.asarray(gamma_expand(view_j.image.data))
    proj, valid = geometry.cross_project(lin_j, view_i.depth, view_j.camera,
                                         view_i.camera)
    joint = valid.data & view_i.sky_or_full.data
    if joint.sum() < 2:
        return 1.0  # no overlap evidence: treat as a duplicate-like pair
    g_i = _grayscale_linear(lin_i)[joint]
    g_j = _grayscale_linear(proj)[joint]
    h_i, _ = np.histogram(g_i, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    h_j, _ = np.histogram(g_j, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    h_i = h_i.astype(np.float64)
    h_j = h_j.astype(np.float64)
    si, sj = h_i.std(), h_j.std()
    if si == 0.0 or sj == 0.0:
        return 1.0
    return float(np.corrcoef(h_i, h_j)[0, 1])


@dataclass(frozen=True)
class PairThresholds:
    camera_distance: Optional[float] = None   # absolute override
    centroid_distance: Optional[float] = None  # absolute override
    r_max: float = HISTOGRAM_R_MAX


def select_pairs(views, thresholds: PairThresholds = PairThresholds()):
    """Overlapping, illumination-diverse view pairs.

    Gates: camera distance, backprojected-centroid distance, and a
    histogram-correlation test that rejects near-identical appearance.
    Criteria are evaluated once per unordered pair (canonical i < j); both
    orders are returned.
    """
    views = list(views)
    n = len(views)
    if n < 2:
        raise ValueError("select_pairs needs at least 2 views")
    centers = np.stack([v.camera.center() for v in views])
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
    pair_d = dists[np.triu_indices(n, 1)]
    cam_gate = thresholds.camera_distance
    if cam_gate is None:
        cam_gate = CAMERA_DISTANCE_FACTOR * float(np.median(pair_d)) if pair_d.size else 0.0

    centroids = [backprojected_centroid(v) for v in views]
    pts = [c for c in centroids if c is not None] + [c for c in centers]
    pts = np.stack(pts)
    diameter = float(np.max(np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)))
    cen_gate = thresholds.centroid_distance
    if cen_gate is None:
        cen_gate = CENTROID_DISTANCE_FACTOR * diameter

    kept = []
    for i in range(n):
        for j in range(i + 1, n):
            if dists[i, j] > cam_gate:
                continue
            if centroids[i] is not None and centroids[j] is not None:
                if np.linalg.norm(centroids[i] - centroids[j]) > cen_gate:
                    continue
            if views[i].depth is not None and views[j].depth is not None:
                if _histogram_correlation(views[i], views[j]) > thresholds.r_max:
                    continue
            kept.append((i, j))
            kept.append((j, i))
    return kept


# ---------------------------------------------------------------------------
# guide normals

def guide_normals(view: LoadedView, plane: Optional[GroundPlane] = None) -> NormalMap:
    """MVS-style guide normals: depth normals with ground-plane inpainting."""
    if view.depth is None:
        raise ValueError("guide_normals requires a depth map")
    normals = geometry.normals_from_depth(view.depth, view.camera)
    if plane is not None and view.ground is not None:
        normals = inpaint_ground_normals(normals, view.ground, plane, view.camera)
    return normals


def ground_plane_from_views(views) -> GroundPlane:
    return fit_ground_plane([v.camera for v in views])
