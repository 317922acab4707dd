"""Reconstruction, perceptual and total cycle losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigError

LOSS_MODES = ("both", "recon_only", "perceptual_only")
BACKBONES = ("pretrained16", "pretrained19", "random_fixed")
DEFAULT_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")

# indices of ReLU modules inside torchvision's ``vgg*.features``
_VGG_LAYERS = {
    "pretrained16": {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22},
    "pretrained19": {"relu1_2": 3, "relu2_2": 8, "relu3_4": 17, "relu4_4": 26,
                     "relu3_3": 17, "relu4_3": 26},
}
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PerceptualConfig:
    backbone: str = "pretrained16"
    layers: tuple = DEFAULT_LAYERS
    seed: int = 0  # only used by random_fixed
    weights_path: str = ""

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if not self.layers:
            raise ConfigError("at least one perceptual layer is required")


@dataclass
class LossReport:
    recon_fwd: torch.Tensor
    recon_bwd: torch.Tensor
    percep_fwd: torch.Tensor
    percep_bwd: torch.Tensor
    total: torch.Tensor

    FIELDS = ("recon_fwd", "recon_bwd", "percep_fwd", "percep_bwd", "total")

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in self.FIELDS}


class _RandomPyramid(nn.Module):
    """Four conv stages with frozen seeded weights; stage outputs stand in for VGG layers."""

    names = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")

    def __init__(self, seed, widths=(8, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)

    def forward(self, x, wanted):
        feats = {}
        x = x - 0.5
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            if self.names[i] in wanted:
                feats[self.names[i]] = x
        return feats


class _VGGFeatures(nn.Module):
    def __init__(self, backbone, weights_path):
        super().__init__()
        import torchvision

        ctor = torchvision.models.vgg16 if backbone == "pretrained16" else torchvision.models.vgg19
        try:
            if weights_path:
                net = ctor(weights=None)
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                tag = "VGG16_Weights" if backbone == "pretrained16" else "VGG19_Weights"
                net = ctor(weights=getattr(torchvision.models, tag).IMAGENET1K_V1)
        except Exception as exc:  # download or file errors
            raise ConfigError(
                f"could not load {backbone} weights ({exc}); set loss.weights_path "
                "or use loss.backbone = random_fixed"
            ) from exc
        self.index = _VGG_LAYERS[backbone]
        self.features = net.features[: max(self.index.values()) + 1]
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x, wanted):
        stop = {self.index[n]: n for n in wanted}
        feats = {}
        x = (x - self.mean) / self.std
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in stop:
                feats[stop[i]] = x
            if len(feats) == len(stop):
                break
        return feats


class PerceptualLoss(nn.Module):
    """Sum over selected layers of the mean squared feature difference.

    The layer name ``pixels`` selects the raw image, which reduces the loss to
    plain reconstruction MSE.
    """

    def __init__(self, config: PerceptualConfig = PerceptualConfig()):
        super().__init__()
        self.config = config
        if config.backbone == "random_fixed":
            self.net = _RandomPyramid(config.seed)
            known = set(_RandomPyramid.names)
        else:
            self.net = _VGGFeatures(config.backbone, config.weights_path)
            known = set(_VGG_LAYERS[config.backbone])
        bad = [n for n in config.layers if n not in known and n != "pixels"]
        if bad:
            raise ConfigError(f"unknown layers {bad} for {config.backbone}; choose from {sorted(known)}")
        self.layers = tuple(config.layers)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()

    def train(self, mode=True):
        super().train(mode)
        self.net.eval()
        return self

    def forward(self, generated, target):
        wanted = [n for n in self.layers if n != "pixels"]
        fg = self.net(generated, wanted) if wanted else {}
        with torch.no_grad():
            ft = self.net(target, wanted) if wanted else {}
        loss = generated.new_zeros(())
        for name in self.layers:
            if name == "pixels":
                loss = loss + F.mse_loss(generated, target)
            else:
                loss = loss + F.mse_loss(fg[name], ft[name])
        return loss


def reconstruction_loss(generated, target):
    """Mean squared pixel difference."""
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(generated, target)


def perceptual_loss(generated, target, perceptual: PerceptualLoss):
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}")
    return perceptual(generated, target)


def total_loss(forward, backward, x, x_prime, perceptual: PerceptualLoss | None,
               mode: str = "both") -> LossReport:
    """Unweighted sum of reconstruction and perceptual terms over both cycle directions.

    ``forward`` targets ``x_prime``; ``backward`` (may be None) targets ``x``.
    Terms excluded by ``mode`` or by a missing backward path are reported as 0.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; choose from {LOSS_MODES}")
    zero = x.new_zeros(())
    use_r = mode in ("both", "recon_only")
    use_p = mode in ("both", "perceptual_only")
    if use_p and perceptual is None:
        raise ConfigError(f"loss mode {mode!r} needs a perceptual backbone")

    def terms(out, target):
        if out is None:
            return zero, zero
        gen = out.target_image
        r = reconstruction_loss(gen, target) if use_r else zero
        p = perceptual_loss(gen, target, perceptual) if use_p else zero
        return r, p

    r_f, p_f = terms(forward, x_prime)
    r_b, p_b = terms(backward, x)
    return LossReport(r_f, r_b, p_f, p_b, r_f + r_b + p_f + p_b)
