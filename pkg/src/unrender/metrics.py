"""Evaluation metrics: scaled albedo MSE/LMSE, angular normal errors, and
hemisphere lighting error under global or per-colour scaling.

Albedo predictions carry an arbitrary colour balance, so a per-channel
optimal scale is fitted before measuring errors; LMSE refits the scale in
local windows. Lighting is compared between orthographic hemisphere
renders after fitting one global (or per-channel) intensity scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from unrender.shlight import hemisphere_mask, render_hemisphere
from unrender.types import AlbedoMap, Mask, NormalMap, SHLighting

LMSE_WINDOW_FRACTION = 0.1
LMSE_MIN_VALID_FRACTION = 0.25
HEMISPHERE_RESOLUTION = 64


def _optimal_scale(pred, ref):
    denom = float(np.sum(pred * pred))
    if denom <= 0.0:
        return 0.0
    return float(np.sum(pred * ref)) / denom


def _scaled_mse(pred, ref, mask):
    """Per-channel optimally scaled masked MSE over (H, W, 3) arrays."""
    total = 0.0
    count = 0
    for c in range(3):
        p, r = pred[..., c][mask], ref[..., c][mask]
        k = _optimal_scale(p, r)
        total += float(np.sum((k * p - r) ** 2))
        count += p.size
    return total / count if count else 0.0


def albedo_error(pred: AlbedoMap, ref: AlbedoMap, mask: Mask):
    """(mse, lmse) with per-channel optimal scaling; local windows for lmse."""
    if pred.shape != ref.shape or pred.shape != mask.shape:
        raise ValueError("albedo_error: shape mismatch")
    m = mask.data
    if not m.any():
        raise ValueError("albedo_error: empty mask")
    mse = _scaled_mse(pred.data, ref.data, m)

    h, w = pred.shape
    side = int(np.ceil(LMSE_WINDOW_FRACTION * max(h, w)))
    side = max(2, min(side, h, w))
    stride = max(1, side // 2)
    window_errors = []
    for i in range(0, h - side + 1, stride):
        for j in range(0, w - side + 1, stride):
            wm = m[i:i + side, j:j + side]
            if wm.sum() < LMSE_MIN_VALID_FRACTION * side * side:
                continue
            window_errors.append(_scaled_mse(pred.data[i:i + side, j:j + side],
                                             ref.data[i:i + side, j:j + side], wm))
    lmse = float(np.mean(window_errors)) if window_errors else mse
    return mse, lmse


def normal_error(pred: NormalMap, ref: NormalMap):
    """(mean, median) angular error in degrees over the joint validity mask."""
    if pred.shape != ref.shape:
        raise ValueError("normal_error: shape mismatch")
    joint = pred.valid & ref.valid
    if not joint.any():
        raise ValueError("normal_error: empty joint mask")
    dots = np.clip(np.sum(pred.data[joint] * ref.data[joint], axis=-1), -1.0, 1.0)
    degrees = np.degrees(np.arccos(dots))
    return float(degrees.mean()), float(np.median(degrees))


def lighting_error(pred: SHLighting, ref: SHLighting, mode: str = "global",
                   resolution: int = HEMISPHERE_RESOLUTION) -> float:
    """MSE between hemisphere renders after optimal intensity scaling.

    mode "global" fits one scalar across channels; "per_colour" fits one
    scalar per channel. A prediction rendering to zero energy is an error.
    """
    if mode not in ("global", "per_colour"):
        raise ValueError(f"unknown lighting_error mode {mode!r}")
    disc = hemisphere_mask(resolution).data
    p = render_hemisphere(pred, resolution).data[disc]
    r = render_hemisphere(ref, resolution).data[disc]
    if mode == "global":
        if float(np.sum(p * p)) <= 0.0:
            raise ValueError("lighting_error: zero-energy prediction")
        k = _optimal_scale(p, r)
        return float(np.mean((k * p - r) ** 2))
    total = 0.0
    for c in range(3):
        if float(np.sum(p[:, c] ** 2)) <= 0.0:
            raise ValueError("lighting_error: zero-energy prediction channel")
        k = _optimal_scale(p[:, c], r[:, c])
        total += float(np.sum((k * p[:, c] - r[:, c]) ** 2))
    return total / p.size


def reconstruction_error(pred_linear, obs_linear, mask: Mask) -> float:
    """Plain masked MSE between a rendered and an observed linear image."""
    m = mask.data
    if not m.any():
        raise ValueError("reconstruction_error: empty mask")
    d = np.asarray(pred_linear) - np.asarray(obs_linear)
    return float(np.mean(d[m] ** 2))


@dataclass(frozen=True)
class MetricsReport:
    albedo_mse: Optional[float] = None
    albedo_lmse: Optional[float] = None
    normal_mean_deg: Optional[float] = None
    normal_median_deg: Optional[float] = None
    reconstruction_mse: Optional[float] = None
    lighting_mse_global: Optional[float] = None
    lighting_mse_per_colour: Optional[float] = None

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v < 0):
                raise ValueError(f"metric {name} must be finite and >= 0")

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: obj.get(k) for k in cls.__dataclass_fields__})
