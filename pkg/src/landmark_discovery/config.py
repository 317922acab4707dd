"""Flat ``key = value`` run configuration with typed, documented defaults."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from . import ConfigError
from .detector import DetectorConfig
from .generator import ModelConfig
from .geometry_warp import DeformRanges
from .objectives import BACKBONES, LOSS_MODES, PerceptualConfig
from .training import TrainConfig

_BOOLS = {"true": True, "1": True, "yes": True, "on": True,
          "false": False, "0": False, "no": False, "off": False}


def _bool(text):
    try:
        return _BOOLS[text.lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


def _int_pair(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {text!r}")
    return tuple(parts)


def _crop(text):
    if not text.strip():
        return None
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 4 or parts[2] <= 0 or parts[3] <= 0:
        raise ValueError("expected top,left,height,width with positive size")
    return parts


def _ridge(text):
    if text.strip().lower() == "auto":
        return None
    value = float(text)
    if value < 0:
        raise ValueError("ridge must be >= 0 or 'auto'")
    return value


def _layers(text):
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    if not names:
        raise ValueError("at least one layer name is required")
    return names


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text
    return parse


# key -> (parser, default text, description)
SCHEMA = {
    "model.K": (int, "10", "number of discovered landmarks"),
    "model.beta": (float, "10", "soft-argmax temperature"),
    "model.sigma": (float, "0.5", "heatmap Gaussian std in score-map cells"),
    "model.in_size": (int, "128", "input image side length"),
    "model.map_size": (int, "32", "score-map side length (in_size / 4)"),
    "model.detector_width": (int, "64", "hourglass channel width"),
    "model.feature_dim": (int, "256", "encoder output channels"),
    "model.encoder_width": (int, "64", "encoder hidden width"),
    "model.generator_width": (int, "256", "generator residual-trunk width"),
    "model.residual_blocks": (int, "6", "generator residual blocks"),
    "deform.scale_min": (float, "0.9", "minimum scale factor"),
    "deform.scale_max": (float, "1.1", "maximum scale factor"),
    "deform.rot_max_deg": (float, "15", "maximum absolute rotation, degrees"),
    "deform.trans_max": (float, "0.1", "maximum absolute translation, fraction of size"),
    "loss.mode": (_choice(LOSS_MODES), "both", "which loss terms are active"),
    "loss.backbone": (_choice(BACKBONES), "pretrained16", "perceptual feature extractor"),
    "loss.layers": (_layers, "relu1_2,relu2_2,relu3_3,relu4_3", "perceptual layers"),
    "loss.weights_path": (str, "", "local backbone weights file (optional)"),
    "loss.seed": (int, "0", "seed of the random_fixed backbone"),
    "train.batch_size": (int, "32", "images per step"),
    "train.lr": (float, "0.001", "initial Adam learning rate"),
    "train.lr_decay": (float, "0.1", "step-decay factor"),
    "train.lr_step_epochs": (int, "30", "epochs between decays"),
    "train.epochs": (int, "90", "training epochs"),
    "train.seed": (int, "0", "seed for initialization, batching and deformations"),
    "train.aux": (_bool, "true", "enable the auxiliary-subject stage"),
    "train.cycle": (_bool, "true", "enable the backward cycle path"),
    "train.adam_beta1": (float, "0.9", "Adam first-moment decay"),
    "train.adam_beta2": (float, "0.999", "Adam second-moment decay"),
    "train.adam_eps": (float, "1e-8", "Adam epsilon"),
    "train.checkpoint_every": (int, "1", "epochs between checkpoints"),
    "train.deterministic": (_bool, "true", "use deterministic torch kernels"),
    "cycle.fresh_aux": (_bool, "false", "draw a new auxiliary image for the backward path"),
    "eval.ridge": (_ridge, "auto", "probe ridge penalty, or auto"),
    "eval.interocular": (_int_pair, "0,1", "indices of the two eye points"),
    "eval.batch_size": (int, "64", "inference batch size"),
    "data.crop": (_crop, "", "optional crop top,left,height,width before resizing"),
    "data.limit": (int, "0", "use only the first N training images (0 = all)"),
}


@dataclass
class RunConfig:
    values: dict
    raw: dict
    source: str | None = None
    overrides: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, text):
        self.values[key] = _parse_value(key, text)
        self.raw[key] = text

    def dump(self) -> str:
        lines = [f"# source: {self.source or '<defaults>'}"]
        if self.overrides:
            lines.append(f"# overrides: {' '.join(self.overrides)}")
        lines += [f"{k} = {self.raw[k]}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "config.resolved.cfg"
        path.write_text(self.dump())
        return path

    def detector_config(self) -> DetectorConfig:
        v = self.values
        return DetectorConfig(K=v["model.K"], beta=v["model.beta"], sigma=v["model.sigma"],
                              in_size=v["model.in_size"], map_size=v["model.map_size"],
                              width=v["model.detector_width"])

    def train_config(self) -> TrainConfig:
        v = self.values
        model = ModelConfig(self.detector_config(), feature_dim=v["model.feature_dim"],
                            encoder_width=v["model.encoder_width"],
                            generator_width=v["model.generator_width"],
                            residual_blocks=v["model.residual_blocks"])
        deform = DeformRanges(v["deform.scale_min"], v["deform.scale_max"],
                              math.radians(v["deform.rot_max_deg"]), v["deform.trans_max"])
        percep = PerceptualConfig(v["loss.backbone"], v["loss.layers"], v["loss.seed"],
                                  v["loss.weights_path"])
        return TrainConfig(
            model=model, perceptual=percep, deform=deform, loss_mode=v["loss.mode"],
            batch_size=v["train.batch_size"], lr=v["train.lr"], lr_decay=v["train.lr_decay"],
            lr_step_epochs=v["train.lr_step_epochs"], epochs=v["train.epochs"],
            seed=v["train.seed"], aux=v["train.aux"], cycle=v["train.cycle"],
            fresh_aux=v["cycle.fresh_aux"],
            adam_betas=(v["train.adam_beta1"], v["train.adam_beta2"]),
            adam_eps=v["train.adam_eps"], checkpoint_every=v["train.checkpoint_every"],
            deterministic=v["train.deterministic"],
        )


def _parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config_text(text, source=None):
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source or '<config>'}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((key, value))
    return entries


def parse_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides, in that precedence."""
    raw = {k: spec[1] for k, spec in SCHEMA.items()}
    cfg = RunConfig({k: _parse_value(k, t) for k, t in raw.items()}, raw,
                    source=str(path) if path else None, overrides=list(overrides))
    if path:
        for key, value in parse_config_text(Path(path).read_text(), str(path)):
            cfg.set(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg
