"""Shared domain types: images, per-pixel maps, cameras, lighting vectors.

All types are immutable value objects wrapping read-only float64 numpy
arrays. Shape and range invariants are checked at construction; operations
elsewhere in the package may therefore assume them.

Conventions: image origin top-left, x right, y down. Camera frame x right,
y down, z forward. Valid normals have n_z > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHADOW_FLOOR = 1e-3  # lower bound on shadow values; guards the shadow-free division

ENCODING_GAMMA = "srgb_gamma"
ENCODING_LINEAR = "linear"


def _frozen(a, dtype=np.float64):
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    out.setflags(write=False)
    return out


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class ImageRGB:
    """RGB image, float values, either gamma-encoded or linear radiance."""

    data: np.ndarray  # (H, W, 3)
    encoding: str = ENCODING_GAMMA

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _require(self.data.ndim == 3 and self.data.shape[2] == 3,
                 f"ImageRGB wants (H, W, 3), got {self.data.shape}")
        _require(np.isfinite(self.data).all(), "ImageRGB data must be finite")
        _require(self.encoding in (ENCODING_GAMMA, ENCODING_LINEAR),
                 f"unknown encoding {self.encoding!r}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in camera units; holes are non-finite entries."""

    data: np.ndarray  # (H, W)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _require(self.data.ndim == 2, f"DepthMap wants (H, W), got {self.data.shape}")
        finite = np.isfinite(self.data)
        _require((self.data[finite] > 0).all(), "finite depths must be strictly positive")

    @property
    def shape(self):
        return self.data.shape

    @property
    def valid(self):
        return np.isfinite(self.data)


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals in camera coordinates with a validity mask.

    Valid pixels satisfy ||n|| = 1 (to 1e-6) and n_z > 0; invalid pixels may
    hold arbitrary finite values and must be ignored by consumers.
    """

    data: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        object.__setattr__(self, "valid", _frozen(self.valid, dtype=bool))
        _require(self.data.ndim == 3 and self.data.shape[2] == 3,
                 f"NormalMap wants (H, W, 3), got {self.data.shape}")
        _require(self.valid.shape == self.data.shape[:2],
                 "validity mask shape mismatch")
        _require(np.isfinite(self.data).all(), "NormalMap data must be finite")
        if self.valid.any():
            v = self.data[self.valid]
            norms = np.linalg.norm(v, axis=-1)
            _require(np.abs(norms - 1.0).max() <= 1e-6,
                     "valid normals must be unit length")
            _require((v[:, 2] > 0).all(), "valid normals must have n_z > 0")

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class NormalParams:
    """Two-parameter normal representation (n_x/n_z, n_y/n_z) per pixel."""

    data: np.ndarray  # (H, W, 2)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _require(self.data.ndim == 3 and self.data.shape[2] == 2,
                 f"NormalParams wants (H, W, 2), got {self.data.shape}")
        _require(np.isfinite(self.data).all(), "NormalParams must be finite")

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class AlbedoMap:
    """Per-pixel RGB diffuse albedo in [0, 1]."""

    data: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _require(self.data.ndim == 3 and self.data.shape[2] == 3,
                 f"AlbedoMap wants (H, W, 3), got {self.data.shape}")
        _require(np.isfinite(self.data).all(), "AlbedoMap must be finite")
        _require(self.data.min() >= 0.0 and self.data.max() <= 1.0,
                 "albedo must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class ShadowMap:
    """Per-pixel scalar shadow multiplier in [SHADOW_FLOOR, 1]."""

    data: np.ndarray  # (H, W)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _require(self.data.ndim == 2, f"ShadowMap wants (H, W), got {self.data.shape}")
        _require(np.isfinite(self.data).all(), "ShadowMap must be finite")
        _require(self.data.min() >= SHADOW_FLOOR - 1e-12 and self.data.max() <= 1.0 + 1e-12,
                 f"shadow values must lie in [{SHADOW_FLOOR}, 1]")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    """Per-pixel boolean mask."""

    data: np.ndarray  # (H, W) bool

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, dtype=bool))
        _require(self.data.ndim == 2, f"Mask wants (H, W), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def count(self):
        return int(self.data.sum())


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: focal length, principal point, world-to-camera pose."""

    f: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "R", _frozen(self.R))
        object.__setattr__(self, "t", _frozen(self.t))
        _require(self.R.shape == (3, 3), "R must be 3x3")
        _require(self.t.shape == (3,), "t must be a 3-vector")
        _require(np.abs(self.R.T @ self.R - np.eye(3)).max() <= 1e-9,
                 "R must be orthonormal")
        _require(abs(np.linalg.det(self.R) - 1.0) <= 1e-9,
                 "R must be a proper rotation (det +1)")
        _require(self.f > 0, "focal length must be positive")

    @property
    def K(self):
        return np.array([[self.f, 0.0, self.cx],
                         [0.0, self.f, self.cy],
                         [0.0, 0.0, 1.0]])

    def center(self):
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def up_world(self):
        """World-frame up direction of this camera (image y points down)."""
        return -self.R[1, :]

    def to_json(self):
        return {"f": self.f, "cx": self.cx, "cy": self.cy,
                "R": [float(v) for v in self.R.ravel()],
                "t": [float(v) for v in self.t]}

    @classmethod
    def from_json(cls, obj):
        return cls(f=obj["f"], cx=obj["cx"], cy=obj["cy"],
                   R=np.asarray(obj["R"], dtype=np.float64).reshape(3, 3),
                   t=np.asarray(obj["t"], dtype=np.float64))


SH_LAYOUT_TAG = "channel-major-order2"


@dataclass(frozen=True)
class SHLighting:
    """Order-2 colour SH lighting: 27 coefficients, channel-major.

    coeffs[0:9] are the red-channel coefficients in the basis order
    [1, nx, ny, nz, 3nz^2-1, nx*ny, nx*nz, ny*nz, nx^2-ny^2], then green,
    then blue.
    """

    coeffs: np.ndarray  # (27,)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _frozen(self.coeffs))
        _require(self.coeffs.shape == (27,), "SHLighting wants 27 coefficients")
        _require(np.isfinite(self.coeffs).all(), "SHLighting must be finite")

    def per_channel(self):
        """Coefficients as a (3, 9) array, rows r/g/b."""
        return self.coeffs.reshape(3, 9)

    def norm(self):
        return float(np.linalg.norm(self.coeffs))

    def to_json(self):
        return {"layout": SH_LAYOUT_TAG, "coeffs": [float(v) for v in self.coeffs]}

    @classmethod
    def from_json(cls, obj):
        if obj.get("layout") != SH_LAYOUT_TAG:
            raise ValueError(f"unsupported lighting layout {obj.get('layout')!r}")
        return cls(np.asarray(obj["coeffs"], dtype=np.float64))


@dataclass(frozen=True)
class PriorModel:
    """PCA model of unit-norm natural-illumination SH vectors.

    A lighting vector is reconstructed as mean + Q @ diag(sigma) @ alpha,
    with alpha approximately standard normal over the training set.
    """

    mean: np.ndarray   # (27,)
    Q: np.ndarray      # (27, D), orthonormal columns
    sigma: np.ndarray  # (D,), descending positive

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "Q", _frozen(self.Q))
        object.__setattr__(self, "sigma", _frozen(self.sigma))
        _require(self.mean.shape == (27,), "prior mean must have 27 entries")
        d = self.sigma.shape[0]
        _require(self.Q.shape == (27, d), "Q shape must be (27, D)")
        _require(np.abs(self.Q.T @ self.Q - np.eye(d)).max() <= 1e-9,
                 "Q columns must be orthonormal")
        _require((self.sigma > 0).all(), "sigma must be positive")
        _require((np.diff(self.sigma) <= 1e-12).all(), "sigma must be non-increasing")

    @property
    def dim(self):
        return self.sigma.shape[0]

    def basis_scaled(self):
        """Q @ diag(sigma), the map from whitened coefficients to lighting."""
        return self.Q * self.sigma[np.newaxis, :]

    def reconstruct(self, alpha) -> SHLighting:
        alpha = np.asarray(alpha, dtype=np.float64)
        return SHLighting(self.basis_scaled() @ alpha + self.mean)

    def project(self, lighting: SHLighting) -> np.ndarray:
        """Whitened coefficients of a lighting vector (its PriorCoeffs alpha)."""
        return (self.Q.T @ (lighting.coeffs - self.mean)) / self.sigma

    def to_json(self):
        return {"D": int(self.dim),
                "mean": [float(v) for v in self.mean],
                "sigma": [float(v) for v in self.sigma],
                "Q": [float(v) for v in self.Q.ravel()]}

    @classmethod
    def from_json(cls, obj):
        d = int(obj["D"])
        return cls(mean=np.asarray(obj["mean"], dtype=np.float64),
                   Q=np.asarray(obj["Q"], dtype=np.float64).reshape(27, d),
                   sigma=np.asarray(obj["sigma"], dtype=np.float64))


@dataclass(frozen=True)
class PriorCoeffs:
    """Whitened coordinates of a lighting vector in the prior subspace."""

    alpha: np.ndarray  # (D,)

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        _require(self.alpha.ndim == 1, "alpha must be a vector")
        _require(np.isfinite(self.alpha).all(), "alpha must be finite")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five energy terms plus the feature-space sub-weights."""

    appearance: float = 0.1      # w1
    normals: float = 1.0         # w2
    albedo: float = 0.1          # w3
    cross_render: float = 0.1    # w4
    lighting: float = 0.005      # w5
    w_pyramid: float = 2.5       # multiscale-gradient feature term inside the perceptual error
    w_lab: float = 0.5           # LAB feature term inside the perceptual error

    def __post_init__(self):
        for name in ("appearance", "normals", "albedo", "cross_render",
                     "lighting", "w_pyramid", "w_lab"):
            v = float(getattr(self, name))
            _require(v >= 0.0, f"loss weight {name} must be >= 0")
            object.__setattr__(self, name, v)

    def to_json(self):
        return {"appearance": self.appearance, "nm": self.normals,
                "albedo": self.albedo, "cross_rend": self.cross_render,
                "lighting": self.lighting,
                "pyramid": self.w_pyramid, "lab": self.w_lab}
