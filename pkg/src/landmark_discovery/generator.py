"""Shared image encoder and heatmap-conditioned generator, plus the two-stage and cycle passes."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .detector import DetectorConfig, LandmarkDetector


@dataclass(frozen=True)
class ModelConfig:
    detector: DetectorConfig = DetectorConfig()
    feature_dim: int = 256
    encoder_width: int = 64
    generator_width: int = 256
    residual_blocks: int = 6

    @property
    def upsample_blocks(self) -> int:
        return 2


class PreActBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.bn2(self.conv1(F.relu(self.bn1(x))))))


class Encoder(nn.Module):
    """Image -> feature map at 1/4 resolution with ``feature_dim`` channels."""

    def __init__(self, feature_dim, width):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 5, stride=2, padding=2)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * width)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(2 * width)
        self.final = nn.Conv2d(2 * width, feature_dim, 3, padding=1)

    def forward(self, images):
        x = F.relu(self.bn1(self.conv1(images)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = F.relu(self.bn3(self.conv3(x)))
        return self.final(x)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, activation=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm2d(cout) if activation else None

    def forward(self, x):
        x = self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        return x if self.bn is None else F.relu(self.bn(x))


class Generator(nn.Module):
    """Concatenated (features, heatmaps) -> residual trunk -> two x2 upsamplings.

    The second upsampling block emits RGB directly and has no output activation.
    """

    def __init__(self, feature_dim, K, width, residual_blocks=6):
        super().__init__()
        self.inp = nn.Conv2d(feature_dim + K, width, 3, padding=1)
        self.blocks = nn.Sequential(*[PreActBlock(width) for _ in range(residual_blocks)])
        self.bn = nn.BatchNorm2d(width)
        self.up1 = UpBlock(width, width // 2)
        self.up2 = UpBlock(width // 2, 3, activation=False)

    def forward(self, features, heatmaps):
        if features.shape[-2:] != heatmaps.shape[-2:]:
            raise ValueError(
                f"feature map {tuple(features.shape[-2:])} and heatmaps "
                f"{tuple(heatmaps.shape[-2:])} differ in spatial size"
            )
        x = self.inp(torch.cat([features, heatmaps], dim=1))
        x = F.relu(self.bn(self.blocks(x)))
        return self.up2(self.up1(x))


@dataclass
class GenerationOutputs:
    """Images and landmark intermediates of one source -> target pass.

    ``aux_image`` is None when the auxiliary stage is disabled (baseline).
    """

    aux_image: torch.Tensor | None
    target_image: torch.Tensor
    landmarks: dict
    heatmaps: dict


class InterIntraModel(nn.Module):
    """Holds the single detector, encoder and generator shared by every generation stage."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        det = config.detector
        self.detector = LandmarkDetector(det)
        self.encoder = Encoder(config.feature_dim, config.encoder_width)
        self.generator = Generator(
            config.feature_dim, det.K, config.generator_width, config.residual_blocks
        )

    def encode(self, images):
        return self.encoder(images)

    def generate(self, features, heatmaps):
        return self.generator(features, heatmaps)

    def inter_intra_forward(self, x, x_prime, x_aux=None, *, detections=None):
        """Two-stage generation of ``x_prime`` from ``x``.

        Stage 1 re-poses ``x`` with the landmarks of ``x_aux``; stage 2 re-poses
        that result with the landmarks of ``x_prime``. With ``x_aux=None`` the
        first stage is skipped. ``detections`` may carry precomputed
        ``(landmarks, heatmaps)`` keyed by ``"x_prime"`` / ``"aux"`` so batch
        permutations can reuse one detector pass.
        """
        detections = detections or {}
        lm_t, hm_t = detections.get("x_prime") or self.detector(x_prime)
        landmarks, heatmaps = {"x_prime": lm_t}, {"x_prime": hm_t}
        source = x
        aux_image = None
        if x_aux is not None or "aux" in detections:
            lm_a, hm_a = detections.get("aux") or self.detector(x_aux)
            landmarks["aux"], heatmaps["aux"] = lm_a, hm_a
            aux_image = self.generator(self.encoder(x), hm_a)
            source = aux_image
        target = self.generator(self.encoder(source), hm_t)
        return GenerationOutputs(aux_image, target, landmarks, heatmaps)

    def cycle_forward(self, x, x_prime, x_aux=None, *, aux_index=None, cycle=True,
                      use_aux=True, aux_index_backward=None):
        """Forward path x -> x_prime and, if ``cycle``, the backward path x_prime -> x.

        When ``aux_index`` is given the auxiliary images are ``x[aux_index]`` and
        their detections are gathered from the pass over ``x`` instead of being
        recomputed. ``aux_index_backward`` selects a different in-batch
        auxiliary image for the backward path; by default both paths share one.
        """
        # one detector pass over x and x_prime, so both see the same batch statistics
        lm, hm = self.detector(torch.cat([x, x_prime]))
        n = x.shape[0]
        det_x, det_xp = (lm[:n], hm[:n]), (lm[n:], hm[n:])
        aux_det = aux_bwd = None
        if use_aux:
            if aux_index is not None:
                aux_det = (det_x[0][aux_index], det_x[1][aux_index])
            elif x_aux is not None:
                aux_det = self.detector(x_aux)
            else:
                raise ValueError("auxiliary stage enabled but no auxiliary images given")
            aux_bwd = aux_det
            if aux_index_backward is not None:
                aux_bwd = (det_x[0][aux_index_backward], det_x[1][aux_index_backward])

        def path(src, det_target, aux):
            d = {"x_prime": det_target}
            if aux is not None:
                d["aux"] = aux
            return self.inter_intra_forward(src, None, detections=d)

        forward = path(x, det_xp, aux_det)
        backward = path(x_prime, det_x, aux_bwd) if cycle else None
        return forward, backward
