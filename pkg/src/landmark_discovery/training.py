"""Batch construction, the optimization loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import ConfigError, __version__
from .detector import DetectorConfig
from .generator import InterIntraModel, ModelConfig
from .geometry_warp import DeformParams, DeformRanges, apply_warp_image, sample_deform
from .objectives import LOSS_MODES, LossReport, PerceptualConfig, PerceptualLoss, total_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "recon_fwd", "recon_bwd", "percep_fwd", "percep_bwd", "total", "lr")
ARCHITECTURE_TAG = "hourglass1-resgen6-up2"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    perceptual: PerceptualConfig = PerceptualConfig()
    deform: DeformRanges = DeformRanges()
    loss_mode: str = "both"
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_step_epochs: int = 30
    epochs: int = 90
    seed: int = 0
    aux: bool = True
    cycle: bool = True
    fresh_aux: bool = False
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}; choose from {LOSS_MODES}")
        for name in ("batch_size", "epochs", "lr_step_epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")


@dataclass
class TrainBatch:
    x: np.ndarray  # B x H x W x 3
    x_prime: np.ndarray
    aux_index: np.ndarray
    deform: list
    aux_index_backward: np.ndarray | None = None


def sample_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform fixed-point-free permutation by rejection (about e draws on average)."""
    if n == 1:
        log.warning("batch of size 1: auxiliary image falls back to the sample itself")
        return np.zeros(1, dtype=np.int64)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def build_training_batch(dataset, indices, ranges: DeformRanges, rng: np.random.Generator,
                         fresh_aux=False) -> TrainBatch:
    indices = list(indices)
    if not indices:
        raise ValueError("cannot build a batch from an empty index list")
    x = dataset.batch(indices)
    deform = [sample_deform(ranges, rng) for _ in indices]
    x_prime = np.stack([apply_warp_image(img, p) for img, p in zip(x, deform)])
    aux = sample_derangement(len(indices), rng)
    aux_b = sample_derangement(len(indices), rng) if fresh_aux else None
    return TrainBatch(x, x_prime, aux, deform, aux_b)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 0]).permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def _to_tensor(arr, dtype):
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype)


class Trainer:
    """Owns the model weights, the frozen perceptual network and the optimizer."""

    def __init__(self, cfg: TrainConfig, dtype=torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.model = InterIntraModel(cfg.model).to(dtype)
        self.perceptual = None
        if cfg.loss_mode != "recon_only":
            self.perceptual = PerceptualLoss(cfg.perceptual).to(dtype)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps
        )
        self.epoch = 0
        self.global_step = 0

    def set_lr(self, lr):
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def loss(self, batch: TrainBatch) -> LossReport:
        cfg = self.cfg
        x = _to_tensor(batch.x, self.dtype)
        xp = _to_tensor(batch.x_prime, self.dtype)
        aux = torch.from_numpy(batch.aux_index)
        aux_b = None if batch.aux_index_backward is None else torch.from_numpy(batch.aux_index_backward)
        fwd, bwd = self.model.cycle_forward(
            x, xp, aux_index=aux, aux_index_backward=aux_b, cycle=cfg.cycle, use_aux=cfg.aux
        )
        return total_loss(fwd, bwd, x, xp, self.perceptual, cfg.loss_mode)

    def train_step(self, batch: TrainBatch) -> LossReport:
        self.model.train()
        report = self.loss(batch)
        if not torch.isfinite(report.total):
            raise TrainingDiverged(
                f"non-finite loss at step {self.global_step}: {report.as_floats()}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        self.global_step += 1
        return report

    def run_epoch(self, dataset, writer=None):
        cfg = self.cfg
        lr = lr_at_epoch(cfg, self.epoch)
        self.set_lr(lr)
        rows = []
        for step, idx in enumerate(epoch_batches(len(dataset), cfg.batch_size, cfg.seed, self.epoch)):
            rng = np.random.default_rng([cfg.seed, self.epoch, step + 1])
            batch = build_training_batch(dataset, idx, cfg.deform, rng, cfg.fresh_aux)
            rep = self.train_step(batch).as_floats()
            row = {"epoch": self.epoch, "step": step, **rep, "lr": lr}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in METRICS_HEADER])
        self.epoch += 1
        return rows

    # --- checkpoints ---------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "epoch": self.epoch,
                "global_step": self.global_step,
            },
            path,
        )
        path.with_suffix(".json").write_text(json.dumps(checkpoint_sidecar(self.cfg), indent=2))
        return path

    @classmethod
    def resume(cls, path, cfg: TrainConfig, dtype=torch.float32) -> "Trainer":
        trainer = cls(cfg, dtype)
        state = torch.load(path, map_location="cpu", weights_only=True)
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.epoch = state["epoch"]
        trainer.global_step = state["global_step"]
        return trainer


def checkpoint_sidecar(cfg: TrainConfig) -> dict:
    m, d = cfg.model, cfg.model.detector
    return {
        "K": d.K, "beta": d.beta, "sigma": d.sigma, "in_size": d.in_size,
        "map_size": d.map_size, "detector_width": d.width,
        "architecture": ARCHITECTURE_TAG, "D": m.feature_dim,
        "encoder_width": m.encoder_width, "generator_width": m.generator_width,
        "residual_blocks": m.residual_blocks, "upsample_blocks": m.upsample_blocks,
        "version": __version__,
    }


def load_model(path) -> InterIntraModel:
    """Rebuild a model from ``<ckpt>.pt`` and its JSON sidecar."""
    path = Path(path)
    side_path = path.with_suffix(".json")
    if not side_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {side_path}")
    side = json.loads(side_path.read_text())
    det = DetectorConfig(K=side["K"], beta=side["beta"], sigma=side["sigma"],
                         in_size=side["in_size"], map_size=side["map_size"],
                         width=side["detector_width"])
    mcfg = ModelConfig(det, feature_dim=side["D"], encoder_width=side["encoder_width"],
                       generator_width=side["generator_width"],
                       residual_blocks=side["residual_blocks"])
    model = InterIntraModel(mcfg)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state["model"])
    model.eval()
    return model


def run_training(cfg: TrainConfig, dataset, out_dir, *, resume=None, progress=None):
    """Train for ``cfg.epochs``; write checkpoints, ``metrics.csv`` and ``run.json`` into ``out_dir``.

    Returns ``(final checkpoint path, list of metric rows)``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.size != cfg.model.detector.in_size:
        raise ConfigError(
            f"dataset image size {dataset.size} != model in_size {cfg.model.detector.in_size}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.resume(resume, cfg) if resume else Trainer(cfg)
    run_info = {
        "version": __version__,
        "seed": cfg.seed,
        "adam": {"lr": cfg.lr, "betas": list(cfg.adam_betas), "eps": cfg.adam_eps},
        "schedule": {"decay": cfg.lr_decay, "every_epochs": cfg.lr_step_epochs},
        "config": _jsonable(asdict(cfg)),
        "torch": torch.__version__,
        "resumed_from": str(resume) if resume else None,
    }
    (out / "run.json").write_text(json.dumps(run_info, indent=2))
    metrics_path = out / "metrics.csv"
    mode = "a" if resume and metrics_path.exists() else "w"
    rows = []
    ckpt = out / "checkpoint.pt"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        while trainer.epoch < cfg.epochs:
            epoch_rows = trainer.run_epoch(dataset, writer)
            fh.flush()
            rows.extend(epoch_rows)
            mean_total = float(np.mean([r["total"] for r in epoch_rows]))
            log.info("epoch %d  lr %.2e  mean total loss %.5f", trainer.epoch - 1,
                     epoch_rows[0]["lr"], mean_total)
            if progress is not None:
                progress(trainer.epoch - 1, mean_total)
            if trainer.epoch % cfg.checkpoint_every == 0 or trainer.epoch == cfg.epochs:
                trainer.save(ckpt)
                trainer.save(out / f"checkpoint_epoch{trainer.epoch:03d}.pt")
    return ckpt, rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
