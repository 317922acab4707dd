"""Linear-probe evaluation: regress discovered landmarks onto annotations and score by NME."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .detector import grid_to_pixel
from .geometry_warp import DeformRanges, apply_warp_image, apply_warp_points, sample_deform

log = logging.getLogger(__name__)


@dataclass
class RegressorWeights:
    """``(2K + 1) x 2M`` matrix; the last row is the bias."""

    matrix: np.ndarray
    ridge: float = 0.0

    @property
    def n_inputs(self):
        return (self.matrix.shape[0] - 1) // 2

    @property
    def n_outputs(self):
        return self.matrix.shape[1] // 2

    def predict(self, pred: np.ndarray) -> np.ndarray:
        pred = _flat(pred)
        return _design(pred) @ self.matrix

    def to_json(self) -> dict:
        return {"ridge": self.ridge, "K": self.n_inputs, "M": self.n_outputs,
                "matrix": self.matrix.tolist()}

    @classmethod
    def from_json(cls, obj) -> "RegressorWeights":
        m = np.asarray(obj["matrix"], dtype=np.float64)
        if m.ndim != 2 or (m.shape[0] - 1) % 2 or m.shape[1] % 2 or not np.isfinite(m).all():
            raise ValueError(f"malformed regressor matrix of shape {m.shape}")
        return cls(m, float(obj.get("ridge", 0.0)))


@dataclass
class EvalReport:
    nme_percent: float
    per_image: np.ndarray
    n_train_used: int | None = None


def _flat(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1) if a.ndim == 3 else a


def _design(pred):
    return np.hstack([pred, np.ones((pred.shape[0], 1))])


def default_ridge(n, K):
    return 0.0 if n >= 2 * K + 1 else 1e-6


def fit_linear_regressor(pred, gt, ridge: float | None = None) -> RegressorWeights:
    """Least squares ``[pred, 1] W ~ gt`` with optional ridge penalty ``ridge * |W|^2``.

    ``pred`` is ``n x 2K`` (or ``n x K x 2``) and ``gt`` ``n x 2M``. With
    ``ridge = 0`` the minimum-norm solution is returned, which also covers
    under-determined fits. ``ridge=None`` picks the default for the sample size.
    """
    X, Y = _flat(pred), _flat(gt)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a regressor on zero samples")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row mismatch: {X.shape[0]} predictions vs {Y.shape[0]} targets")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("regressor inputs contain NaN or Inf")
    if ridge is None:
        ridge = default_ridge(X.shape[0], X.shape[1] // 2)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    A = _design(X)
    if ridge == 0:
        W, _, rank, _ = np.linalg.lstsq(A, Y, rcond=None)
        if rank < A.shape[1]:
            log.info("rank-deficient design (rank %d of %d): minimum-norm solution", rank, A.shape[1])
    else:
        # augmented least squares keeps conditioning of A rather than A^T A
        aug = np.vstack([A, np.sqrt(ridge) * np.eye(A.shape[1])])
        rhs = np.vstack([Y, np.zeros((A.shape[1], Y.shape[1]))])
        W = np.linalg.lstsq(aug, rhs, rcond=None)[0]
    return RegressorWeights(W, float(ridge))


def compute_nme(pred, gt, interocular=(0, 1)) -> EvalReport:
    """Mean point error over inter-ocular distance, as a percentage.

    ``pred`` and ``gt`` are ``n x M x 2`` (or flattened ``n x 2M``). Images with
    zero inter-ocular distance are excluded with a warning.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1, 2)
    g = np.asarray(gt, dtype=np.float64).reshape(len(gt), -1, 2)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    left, right = interocular
    iod = np.linalg.norm(g[:, left] - g[:, right], axis=-1)
    valid = iod > 0
    if not valid.all():
        log.warning("excluding %d image(s) with zero inter-ocular distance", int((~valid).sum()))
    err = np.linalg.norm(p - g, axis=-1).mean(axis=1)
    per_image = err[valid] / iod[valid]
    if per_image.size == 0:
        raise ValueError("no image has a positive inter-ocular distance")
    return EvalReport(100.0 * float(per_image.mean()), per_image)


def limited_supervision_sweep(pred_train, gt_train, pred_test, gt_test, ns, seeds,
                              interocular=(0, 1), ridge=None):
    """NME of the probe trained on ``n`` random training rows, for each ``n`` and seed.

    ``n`` may be ``"all"`` (or any value >= the row count), in which case a
    single full fit is made. Returns a list of dicts with ``n``, ``mean``,
    ``std`` and the raw per-seed values.
    """
    X, Y = _flat(pred_train), _flat(gt_train)
    rows = []
    for n in ns:
        full = n == "all" or int(n) >= len(X)
        if not full and int(n) < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        values = []
        for seed in ([0] if full else seeds):
            if full:
                idx = np.arange(len(X))
            else:
                idx = np.random.default_rng(seed).choice(len(X), size=int(n), replace=False)
            reg = fit_linear_regressor(X[idx], Y[idx], ridge)
            values.append(compute_nme(reg.predict(pred_test), gt_test, interocular).nme_percent)
        rows.append({"n": "all" if full else int(n), "mean": float(np.mean(values)),
                     "std": float(np.std(values)), "values": values})
    return rows


def format_sweep(rows) -> str:
    lines = [f"{'n supervised':>12}  {'NME %':>8}  {'std':>6}"]
    for r in rows:
        lines.append(f"{str(r['n']):>12}  {r['mean']:8.3f}  {r['std']:6.3f}")
    return "\n".join(lines)


@torch.no_grad()
def predict_landmarks(model_or_detector, images, batch_size=64) -> np.ndarray:
    """Pixel ``(x, y)`` landmarks, ``n x K x 2``, for ``n x H x W x 3`` images."""
    detector = getattr(model_or_detector, "detector", model_or_detector)
    was_training = detector.training
    detector.eval()
    dtype = next(detector.parameters()).dtype
    stride = detector.config.stride
    out = []
    for i in range(0, len(images), batch_size):
        chunk = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size]))
        lm, _ = detector(chunk.permute(0, 3, 1, 2).to(dtype))
        out.append(grid_to_pixel(lm.double(), stride).numpy())
    detector.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, detector.config.K, 2))


def predict_dataset(model, dataset, batch_size=64) -> np.ndarray:
    chunks = []
    for i in range(0, len(dataset), batch_size):
        chunks.append(predict_landmarks(model, dataset.batch(range(i, min(i + batch_size, len(dataset))))))
    return np.concatenate(chunks)


def equivariance_errors(model, images, n_warps, seed=0, ranges=DeformRanges()) -> np.ndarray:
    """Pixel distance between landmarks of a warped image and warped landmarks of the original.

    Returns an ``n_warps x K`` array; warp ``i`` is applied to image ``i mod n``.
    """
    rng = np.random.default_rng(seed)
    size = images.shape[1:3]
    src, warped, params = [], [], []
    for i in range(n_warps):
        img = images[i % len(images)]
        p = sample_deform(ranges, rng)
        src.append(img)
        warped.append(apply_warp_image(img, p))
        params.append(p)
    base = predict_landmarks(model, np.stack(src))
    moved = predict_landmarks(model, np.stack(warped))
    expected = np.stack([apply_warp_points(b, p, size) for b, p in zip(base, params)])
    return np.linalg.norm(moved - expected, axis=-1)
