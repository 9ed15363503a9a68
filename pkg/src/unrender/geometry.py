"""Camera projection, normals from perspective depth, two-parameter normal
representation, cross-projection between calibrated views, and ground-plane
estimation/inpainting.

Pixel (x, y) refers to column x, row y, with x = j and y = i for array
index (i, j); no half-pixel offset is applied anywhere, so camera
adjustments under resize/crop stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unrender.types import Camera, DepthMap, Mask, NormalMap, NormalParams


def project(cam: Camera, points):
    """Project world points (..., 3) to pixels; returns (xy, depth).

    depth is the camera-frame z (the projective scale); entries with
    depth <= 0 are behind the camera and the pixel coordinates there are
    not meaningful.
    """
    p = np.asarray(points, dtype=np.float64)
    x_cam = p @ cam.R.T + cam.t
    lam = x_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = cam.f * x_cam[..., 0] / lam + cam.cx
        y = cam.f * x_cam[..., 1] / lam + cam.cy
    return np.stack([x, y], axis=-1), lam


def backproject(cam: Camera, xy, depth):
    """World points for pixels (..., 2) at camera-frame depth (...)."""
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    u = (xy[..., 0] - cam.cx) / cam.f * depth
    v = (xy[..., 1] - cam.cy) / cam.f * depth
    cam_pts = np.stack([u, v, depth], axis=-1)
    return (cam_pts - cam.t) @ cam.R


def normal_from_params(p, q):
    """Unit normal (p, q, 1)/||.||; n_z > 0 by construction."""
    v = np.stack(np.broadcast_arrays(np.asarray(p, dtype=np.float64),
                                     np.asarray(q, dtype=np.float64),
                                     1.0), axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def params_from_normal(n):
    """(n_x/n_z, n_y/n_z) for normals with n_z > 0."""
    n = np.asarray(n, dtype=np.float64)
    nz = n[..., 2]
    if np.any(nz <= 0):
        raise ValueError("params_from_normal requires n_z > 0")
    return n[..., 0] / nz, n[..., 1] / nz


def normal_map_from_params(params: NormalParams) -> NormalMap:
    n = normal_from_params(params.data[..., 0], params.data[..., 1])
    return NormalMap(n, np.ones(params.shape, dtype=bool))


def _finite_differences(w):
    """Per-axis derivative, central where possible, else one-sided.

    Returns (wx, wy, ok_x, ok_y, hole_adjacent). The hole-adjacency flag is
    set when any 4-neighbour inside the image is non-finite.
    """
    finite = np.isfinite(w)
    h, wid = w.shape
    pad = np.pad(w, 1, constant_values=np.nan)
    fin = np.isfinite(pad)
    left, right = pad[1:-1, :-2], pad[1:-1, 2:]
    up, down = pad[:-2, 1:-1], pad[2:, 1:-1]
    fl, fr = fin[1:-1, :-2], fin[1:-1, 2:]
    fu, fd = fin[:-2, 1:-1], fin[2:, 1:-1]

    def one_axis(lo, hi, flo, fhi):
        central = flo & fhi
        fwd = ~central & fhi & finite
        bwd = ~central & ~fhi & flo & finite
        d = np.zeros_like(w)
        d[central] = (hi[central] - lo[central]) / 2.0
        d[fwd] = hi[fwd] - w[fwd]
        d[bwd] = w[bwd] - lo[bwd]
        return d, central | fwd | bwd

    wx, okx = one_axis(left, right, fl, fr)
    wy, oky = one_axis(up, down, fu, fd)

    # neighbours outside the image are padded NaN but do not count as holes
    inside_l = np.zeros_like(finite); inside_l[:, 1:] = True
    inside_r = np.zeros_like(finite); inside_r[:, :-1] = True
    inside_u = np.zeros_like(finite); inside_u[1:, :] = True
    inside_d = np.zeros_like(finite); inside_d[:-1, :] = True
    hole_adjacent = ((inside_l & ~fl) | (inside_r & ~fr) |
                     (inside_u & ~fu) | (inside_d & ~fd))
    return wx, wy, okx, oky, hole_adjacent


def normals_from_depth(depth: DepthMap, cam: Camera) -> NormalMap:
    """Surface normals from a perspective depth map.

    Uses n = [-f*wx, -f*wy, (x-cx)*wx + (y-cy)*wy + w] with central finite
    differences (one-sided at image borders). Pixels adjacent to depth
    holes, pixels without a usable difference stencil, and pixels whose
    normal has n_z <= 0 are marked invalid.
    """
    w = np.asarray(depth.data)
    h, wid = w.shape
    wx, wy, okx, oky, hole_adjacent = _finite_differences(w)
    ys, xs = np.mgrid[0:h, 0:wid].astype(np.float64)
    nb = np.stack([-cam.f * wx,
                   -cam.f * wy,
                   (xs - cam.cx) * wx + (ys - cam.cy) * wy + np.nan_to_num(w)],
                  axis=-1)
    norm = np.linalg.norm(nb, axis=-1)
    ok = np.isfinite(w) & okx & oky & ~hole_adjacent & (norm > 0)
    n = np.where(ok[..., None], nb / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    valid = ok & (n[..., 2] > 0)
    n[~valid] = (0.0, 0.0, 1.0)
    return NormalMap(n, valid)


@dataclass(frozen=True)
class PixelCorrespondence:
    """Per-target-pixel source coordinates from cross-projection."""

    coords: np.ndarray  # (H, W, 2) source (x', y'), float
    valid: np.ndarray   # (H, W) bool

    @property
    def shape(self):
        return self.valid.shape


def compute_correspondence(depth_tgt: DepthMap, cam_src: Camera,
                           cam_tgt: Camera, src_shape) -> PixelCorrespondence:
    """Source-view pixel locations for every target pixel with depth.

    Valid entries lie inside the source bounds (with full bilinear support)
    and have positive source depth; target depth holes are invalid.
    """
    h, w = depth_tgt.shape
    sh, sw = src_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    finite = depth_tgt.valid
    d = np.where(finite, depth_tgt.data, 1.0)
    world = backproject(cam_tgt, np.stack([xs, ys], axis=-1), d)
    xy, lam = project(cam_src, world)
    inb = ((xy[..., 0] >= 0.0) & (xy[..., 0] <= sw - 1.0) &
           (xy[..., 1] >= 0.0) & (xy[..., 1] <= sh - 1.0))
    valid = finite & (lam > 0) & inb & np.isfinite(xy).all(axis=-1)
    coords = np.where(valid[..., None], xy, 0.0)
    return PixelCorrespondence(coords, valid)


def bilinear_support(corr: PixelCorrespondence, src_shape):
    """Integer corner indices and weights of the bilinear stencil.

    Returns (i0, j0, fx, fy): the top-left corner (row i0, col j0) and the
    fractional offsets. Corners are clamped so (i0+1, j0+1) stays in range;
    at the far edge the fractional weight becomes exactly 1.
    """
    sh, sw = src_shape
    x, y = corr.coords[..., 0], corr.coords[..., 1]
    j0 = np.clip(np.floor(x).astype(np.int64), 0, max(sw - 2, 0))
    i0 = np.clip(np.floor(y).astype(np.int64), 0, max(sh - 2, 0))
    return i0, j0, x - j0, y - i0


def resample(src, corr: PixelCorrespondence, src_valid=None):
    """Bilinearly sample a source map at the correspondence locations.

    src is (H, W) or (H, W, C). A target pixel is valid only if the
    correspondence is valid and all four bilinear support pixels are valid
    in the source (strict validity).
    """
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    if src_valid is None:
        src_valid = np.isfinite(src).all(axis=-1)
    i0, j0, fx, fy = bilinear_support(corr, src.shape[:2])
    i1, j1 = i0 + 1, j0 + 1

    def gather(a, ii, jj):
        return a[ii, jj]

    v00 = gather(src_valid, i0, j0) & gather(src_valid, i0, j1) & \
        gather(src_valid, i1, j0) & gather(src_valid, i1, j1)
    valid = corr.valid & v00
    wx, wy = fx[..., None], fy[..., None]
    patch = (gather(src, i0, j0) * (1 - wx) * (1 - wy) +
             gather(src, i0, j1) * wx * (1 - wy) +
             gather(src, i1, j0) * (1 - wx) * wy +
             gather(src, i1, j1) * wx * wy)
    patch = np.where(valid[..., None], np.nan_to_num(patch), 0.0)
    if squeeze:
        patch = patch[..., 0]
    return patch, Mask(valid)


def cross_project(src, depth_tgt: DepthMap, cam_src: Camera, cam_tgt: Camera,
                  src_valid=None):
    """Resample a source-view quantity onto the target view's pixels.

    For each target pixel with finite depth: back-project through the
    target camera, reproject into the source camera, and bilinearly sample
    `src`. No occlusion test is performed.
    """
    src = np.asarray(src)
    corr = compute_correspondence(depth_tgt, cam_src, cam_tgt, src.shape[:2])
    return resample(src, corr, src_valid=src_valid)


@dataclass(frozen=True)
class GroundPlane:
    """World-frame plane: unit normal and offset with n . x = offset."""

    normal: np.ndarray  # (3,)
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))


def fit_ground_plane(cameras) -> GroundPlane:
    """Plane through the camera centres, by principal components.

    The normal is the smallest-variance principal direction, oriented to
    agree with the average camera up direction. Fewer than 3 cameras or a
    collinear/degenerate spread is an error.
    """
    cams = list(cameras)
    if len(cams) < 3:
        raise ValueError("fit_ground_plane needs at least 3 cameras")
    centers = np.stack([c.center() for c in cams])
    centroid = centers.mean(axis=0)
    centered = centers - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        raise ValueError("camera positions are collinear; plane is underdetermined")
    normal = vt[2]
    mean_up = np.mean([c.up_world() for c in cams], axis=0)
    if normal @ mean_up < 0:
        normal = -normal
    return GroundPlane(normal, float(normal @ centroid))


def inpaint_ground_normals(normals: NormalMap, ground_mask: Mask,
                           plane: GroundPlane, cam: Camera) -> NormalMap:
    """Replace ground-pixel normals with the plane normal in camera frame.

    The plane normal is rotated into camera coordinates with the sign
    chosen to satisfy the n_z > 0 visibility convention (matching normals
    computed from depth). If neither sign is visible (grazing or behind),
    the ground pixels are marked invalid.
    """
    if normals.shape != ground_mask.shape:
        raise ValueError("inpaint_ground_normals: shape mismatch")
    n_cam = cam.R @ plane.normal
    if -n_cam[2] > n_cam[2]:
        n_cam = -n_cam
    data = normals.data.copy()
    valid = normals.valid.copy()
    g = ground_mask.data
    if n_cam[2] > 0:
        data[g] = n_cam
        valid[g] = True
    else:
        data[g] = (0.0, 0.0, 1.0)
        valid[g] = False
    return NormalMap(data, valid)
