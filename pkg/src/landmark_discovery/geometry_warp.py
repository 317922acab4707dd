"""Similarity deformations used to build intra-subject image pairs.

Points are ``(x, y)`` pixel coordinates with pixel centers on integers, so the
image center is ``((W - 1) / 2, (H - 1) / 2)``. The forward transform applied to
a point is: scale about the center, rotate about the center, then translate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import ConfigError


@dataclass(frozen=True)
class DeformParams:
    scale: float = 1.0
    rotation: float = 0.0  # radians
    tx: float = 0.0  # fraction of image width
    ty: float = 0.0  # fraction of image height

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not -math.pi <= self.rotation <= math.pi:
            raise ValueError(f"rotation must lie in [-pi, pi], got {self.rotation}")
        if abs(self.tx) > 0.5 or abs(self.ty) > 0.5:
            raise ValueError(f"translation must lie in [-0.5, 0.5], got {(self.tx, self.ty)}")

    @property
    def translation(self) -> tuple[float, float]:
        return (self.tx, self.ty)


IDENTITY = DeformParams()


@dataclass(frozen=True)
class DeformRanges:
    scale_min: float = 0.9
    scale_max: float = 1.1
    rot_max: float = math.radians(15.0)
    trans_max: float = 0.1

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(
                f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}"
            )
        if not 0 <= self.rot_max <= math.pi:
            raise ConfigError(f"rot_max must lie in [0, pi], got {self.rot_max}")
        if not 0 <= self.trans_max <= 0.5:
            raise ConfigError(f"trans_max must lie in [0, 0.5], got {self.trans_max}")

    @classmethod
    def from_degrees(cls, scale_min=0.9, scale_max=1.1, rot_max_deg=15.0, trans_max=0.1):
        return cls(scale_min, scale_max, math.radians(rot_max_deg), trans_max)


def sample_deform(ranges: DeformRanges, rng: np.random.Generator) -> DeformParams:
    """Draw each deformation field independently and uniformly from ``ranges``."""
    scale = rng.uniform(ranges.scale_min, ranges.scale_max)
    rotation = rng.uniform(-ranges.rot_max, ranges.rot_max)
    tx, ty = rng.uniform(-ranges.trans_max, ranges.trans_max, size=2)
    return DeformParams(float(scale), float(rotation), float(tx), float(ty))


def warp_matrix(params: DeformParams, image_size: tuple[int, int]) -> np.ndarray:
    """2x3 forward matrix acting on homogeneous ``(x, y, 1)`` pixel coordinates."""
    h, w = image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = math.cos(params.rotation), math.sin(params.rotation)
    lin = params.scale * np.array([[c, -s], [s, c]])
    center = np.array([cx, cy])
    offset = center - lin @ center + np.array([params.tx * w, params.ty * h])
    return np.hstack([lin, offset[:, None]])


def apply_warp_points(points, params: DeformParams, image_size: tuple[int, int]) -> np.ndarray:
    """Map ``(..., 2)`` array of ``(x, y)`` points through the forward transform."""
    pts = np.asarray(points, dtype=np.float64)
    m = warp_matrix(params, image_size)
    return pts @ m[:, :2].T + m[:, 2]


def apply_warp_image(image: np.ndarray, params: DeformParams) -> np.ndarray:
    """Warp an ``H x W`` or ``H x W x C`` image with bilinear, mirror-padded sampling.

    Output pixel ``q`` reads the input at the inverse-transformed location, so a
    feature at ``p`` in the input lands at ``apply_warp_points(p)``.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"expected a nonempty HxW or HxWxC image, got shape {image.shape}")
    h, w = image.shape[:2]
    m = warp_matrix(params, (h, w))
    inv_lin = np.linalg.inv(m[:, :2])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - m[0, 2], ys - m[1, 2]
    src_x = inv_lin[0, 0] * dx + inv_lin[0, 1] * dy
    src_y = inv_lin[1, 0] * dx + inv_lin[1, 1] * dy
    coords = np.stack([src_y, src_x])
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode="mirror").astype(image.dtype)
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(image[..., ch], coords, order=1, mode="mirror")
    return out
