"""Landmark detector: image -> K score maps -> soft-argmax coordinates -> Gaussian heatmaps.

All coordinates produced here are ``(row, col)`` positions on the score-map grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigError


@dataclass(frozen=True)
class DetectorConfig:
    K: int = 10
    beta: float = 10.0
    sigma: float = 0.5
    in_size: int = 128
    map_size: int = 32
    width: int = 64

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not self.beta > 0 or not self.sigma > 0:
            raise ConfigError("beta and sigma must be positive")
        if self.map_size < 1 or self.in_size % self.map_size:
            raise ConfigError(
                f"in_size ({self.in_size}) must be divisible by map_size ({self.map_size})"
            )
        if self.in_size // self.map_size != 4:
            raise ConfigError("the network downsamples by exactly 4; use in_size = 4 * map_size")

    @property
    def stride(self) -> int:
        return self.in_size // self.map_size


def soft_argmax(maps: torch.Tensor, beta: float) -> torch.Tensor:
    """Softmax-weighted average of grid positions, per channel.

    ``maps`` is ``(..., H, W)``; returns ``(..., 2)`` as ``(row, col)``.
    """
    if not torch.isfinite(maps).all():
        raise FloatingPointError("soft_argmax received non-finite scores")
    *lead, h, w = maps.shape
    flat = beta * maps.reshape(*lead, h * w)
    flat = flat - flat.amax(dim=-1, keepdim=True).detach()
    weights = torch.softmax(flat, dim=-1).reshape(*lead, h, w)
    rows = torch.arange(h, dtype=maps.dtype, device=maps.device)
    cols = torch.arange(w, dtype=maps.dtype, device=maps.device)
    r = (weights.sum(dim=-1) * rows).sum(dim=-1)
    c = (weights.sum(dim=-2) * cols).sum(dim=-1)
    return torch.stack([r, c], dim=-1)


def render_heatmaps(landmarks: torch.Tensor, sigma: float, map_size: int) -> torch.Tensor:
    """Unnormalized Gaussian bumps ``exp(-|u - u_k|^2 / (2 sigma^2))`` on the grid.

    ``landmarks`` is ``(..., K, 2)``; returns ``(..., K, map_size, map_size)``.
    """
    grid = torch.arange(map_size, dtype=landmarks.dtype, device=landmarks.device)
    dr = grid.view(map_size, 1) - landmarks[..., 0, None, None]
    dc = grid.view(1, map_size) - landmarks[..., 1, None, None]
    return torch.exp(-(dr**2 + dc**2) / (2.0 * sigma**2))


class Residual(nn.Module):
    # No normalization layers: detections stay per-sample and identical in
    # train and eval mode, which the equivariance measurements rely on.
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        y = self.conv1(F.relu(x))
        y = self.conv2(F.relu(y))
        return self.skip(x) + y


class Hourglass(nn.Module):
    def __init__(self, depth, width):
        super().__init__()
        self.up = Residual(width, width)
        self.down = Residual(width, width)
        self.inner = Hourglass(depth - 1, width) if depth > 1 else Residual(width, width)
        self.out = Residual(width, width)

    def forward(self, x):
        low = self.down(F.max_pool2d(x, 2))
        low = self.out(self.inner(low))
        return self.up(x) + F.interpolate(low, scale_factor=2, mode="nearest")


class LandmarkDetector(nn.Module):
    """Single hourglass producing K score maps at 1/4 input resolution."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        w = config.width
        depth = max(1, min(3, int(math.log2(config.map_size)) - 1))
        self.stem = nn.Conv2d(3, w, 7, stride=2, padding=3)
        self.pre = Residual(w, w)
        self.hourglass = Hourglass(depth, w)
        self.post = Residual(w, w)
        self.head = nn.Conv2d(w, config.K, 1)

    def score_maps(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, in, in)`` images -> ``(B, K, map, map)`` raw scores."""
        cfg = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, cfg.in_size, cfg.in_size):
            raise ValueError(
                f"expected (B, 3, {cfg.in_size}, {cfg.in_size}) images, got {tuple(images.shape)}"
            )
        x = self.pre(self.stem(images))
        x = F.max_pool2d(x, 2)
        x = self.post(self.hourglass(x))
        return self.head(F.relu(x))

    def forward(self, images):
        """Return ``(landmarks, heatmaps)``: ``(B, K, 2)`` grid coords and ``(B, K, map, map)``."""
        cfg = self.config
        landmarks = soft_argmax(self.score_maps(images), cfg.beta)
        return landmarks, render_heatmaps(landmarks, cfg.sigma, cfg.map_size)


def grid_to_pixel(landmarks, stride):
    """Grid ``(row, col)`` -> image pixel ``(x, y)``; cell centers map to block centers."""
    rc = landmarks * stride + (stride - 1) / 2.0
    return rc[..., [1, 0]]


def extract_score_maps(image, detector: LandmarkDetector) -> torch.Tensor:
    return detector.score_maps(as_batch(image, detector.config.in_size))


def detect(image, detector: LandmarkDetector):
    """Run the full detector on ``H x W x 3`` array(s) or an NCHW tensor."""
    return detector(as_batch(image, detector.config.in_size))


def as_batch(image, in_size=None) -> torch.Tensor:
    """Accept HxWx3 / NxHxWx3 arrays or NCHW tensors, return an NCHW float tensor."""
    if isinstance(image, torch.Tensor) and image.dim() == 4 and image.shape[1] == 3:
        return image
    t = torch.as_tensor(image)
    if not t.is_floating_point():
        t = t.float()
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected HxWx3 or NxHxWx3 images, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous()
