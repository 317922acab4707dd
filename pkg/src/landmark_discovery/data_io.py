"""Datasets: image-directory corpora, the synthetic face-sprite generator, landmark CSV files.

Landmarks are stored as ``(x, y)`` pixel coordinates. The CSV layout is
``image_id,point_index,x_px,y_px`` with one row per point.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

LANDMARK_HEADER = ("image_id", "point_index", "x_px", "y_px")
TOY_POINT_NAMES = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class DatasetError(RuntimeError):
    pass


class LandmarkFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images plus optional ``(N, M, 2)`` ground-truth landmarks.

    Images are held either in memory (``images``, ``N x H x W x 3`` float32 in
    [0, 1]) or as paths decoded on access.
    """

    ids: list
    size: int
    images: np.ndarray | None = None
    paths: list | None = None
    landmarks: np.ndarray | None = None
    split: str = "train"
    crop: tuple | None = None
    scales: np.ndarray | None = None  # per-image (sx, sy) from source to loaded pixels
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def image(self, i) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        return _decode(self.paths[i], self.size, self.crop)[0]

    def batch(self, indices) -> np.ndarray:
        if self.images is not None:
            return self.images[np.asarray(indices)]
        return np.stack([self.image(i) for i in indices])

    def materialize(self) -> "Dataset":
        """Decode every image into memory (in place); returns self."""
        if self.images is None:
            self.images = np.stack([self.image(i) for i in range(len(self))])
        return self

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            size=self.size,
            images=None if self.images is None else self.images[idx],
            paths=None if self.paths is None else [self.paths[i] for i in idx],
            landmarks=None if self.landmarks is None else self.landmarks[idx],
            split=self.split,
            crop=self.crop,
            scales=None if self.scales is None else self.scales[idx],
        )

    def to_source_coords(self, points: np.ndarray) -> np.ndarray:
        """Map ``n x M x 2`` loaded-pixel points back to each source image's frame."""
        pts = np.asarray(points, dtype=np.float64)
        if self.scales is not None:
            pts = pts / self.scales[:, None, :]
        if self.crop is not None:
            pts = pts + np.array([self.crop[1], self.crop[0]], dtype=np.float64)
        return pts


def _decode(path, target_size, crop=None):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if crop is not None:
            top, left, h, w = crop
            im = im.crop((left, top, left + w, top + h))
        src_w, src_h = im.size
        if (src_w, src_h) != (target_size, target_size):
            im = im.resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr, (target_size / src_w, target_size / src_h)


def _read_manifest(root: Path):
    manifest = root / "manifest.txt"
    if manifest.exists():
        lines = [ln.strip() for ln in manifest.read_text().splitlines()]
        return [ln for ln in lines if ln and not ln.startswith("#")]
    img_dir = root / "images" if (root / "images").is_dir() else root
    return sorted(
        str(p.relative_to(root)) for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_image_dataset(root_dir, target_size=128, split="train", crop=None,
                       manifest=None) -> Dataset:
    """Load a directory with ``manifest.txt`` (relative paths) and optional ``annotations.csv``.

    Without a manifest every image under ``images/`` (or the root) is used in
    sorted order. Images are checked at load time and decoded lazily.
    Annotations are scaled by the same factors as the images.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    rel_paths = list(manifest) if manifest is not None else _read_manifest(root)
    if not rel_paths:
        raise DatasetError(f"empty dataset: {root}")
    for rel in rel_paths:
        if not (root / rel).is_file():
            raise DatasetError(f"missing image listed in manifest: {root / rel}")

    ids, paths, scales, skipped = [], [], [], []
    for rel in rel_paths:
        path = root / rel
        try:
            with Image.open(path) as im:
                im.verify()
            with Image.open(path) as im:
                w, h = im.size
        except Exception as exc:
            log.warning("skipping corrupt image %s: %s", path, exc)
            skipped.append(rel)
            continue
        if crop is not None:
            h, w = crop[2], crop[3]
        ids.append(rel)
        paths.append(path)
        scales.append((target_size / w, target_size / h))
    if skipped:
        log.warning("skipped %d corrupt image(s) of %d", len(skipped), len(rel_paths))
    if not ids:
        raise DatasetError(f"empty dataset: no readable images in {root}")

    scales = np.asarray(scales, dtype=np.float64)
    landmarks = None
    ann = root / "annotations.csv"
    if ann.exists():
        table = read_landmarks(ann)
        missing = [i for i in ids if i not in table]
        if missing:
            raise DatasetError(f"{ann}: no annotation for {missing[0]}")
        pts = np.stack([table[i] for i in ids]).astype(np.float64)
        if crop is not None:
            pts = pts - np.array([crop[1], crop[0]], dtype=np.float64)
        landmarks = pts * scales[:, None, :]
    return Dataset(ids=ids, size=target_size, paths=paths, landmarks=landmarks,
                   split=split, crop=crop, scales=scales, skipped=skipped)


# --- synthetic face sprites -------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    count: int = 2000
    image_size: int = 64
    seed: int = 7
    clutter: int = 5  # maximum number of background distractor shapes
    max_tilt_deg: float = 20.0
    max_offset: float = 0.08  # head-center jitter, fraction of image size

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")


def _ellipse_mask(xx, yy, cx, cy, ax, ay, angle):
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v <= 1.0


def _capsule_mask(xx, yy, p, q, radius):
    d = np.subtract(q, p)
    t = ((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return (xx - p[0] - t * d[0]) ** 2 + (yy - p[1] - t * d[1]) ** 2 <= radius**2


def render_sprite(rng: np.random.Generator, size: int, cfg: ToyConfig = ToyConfig()):
    """Draw one face sprite.

    Returns ``(image, landmarks, masks)`` where landmarks are the exact
    ``(x, y)`` centers of the eyes, nose tip and mouth corners, and ``masks``
    maps each eye/nose name to its drawn region (for verification).
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0.0, 1.0, 3)

    for _ in range(rng.integers(0, cfg.clutter + 1)):
        color = rng.uniform(0.0, 1.0, 3)
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(0.05, 0.15) * size
        if rng.random() < 0.5:
            m = _ellipse_mask(xx, yy, cx, cy, r, r * rng.uniform(0.5, 1.5), rng.uniform(0, math.pi))
        else:
            m = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r * rng.uniform(0.3, 1.2))
        img[m] = color

    hc = np.array([size - 1, size - 1]) / 2.0 + rng.uniform(-cfg.max_offset, cfg.max_offset, 2) * size
    ax = rng.uniform(0.24, 0.3) * size
    ay = ax * rng.uniform(1.15, 1.35)
    tilt = math.radians(rng.uniform(-cfg.max_tilt_deg, cfg.max_tilt_deg))
    c, s = math.cos(tilt), math.sin(tilt)
    rot = np.array([[c, -s], [s, c]])

    def to_image(u, v):  # head-local (u right, v down) in head radii
        return hc + rot @ np.array([u * ax, v * ay])

    skin = rng.uniform(0.35, 1.0, 3)
    img[_ellipse_mask(xx, yy, hc[0], hc[1], ax, ay, tilt)] = skin

    eye_dx = rng.uniform(0.35, 0.5)
    eye_dy = -rng.uniform(0.15, 0.35)
    eye_r = rng.uniform(0.1, 0.15) * ax
    nose_v = rng.uniform(0.05, 0.2)
    mouth_v = rng.uniform(0.45, 0.6)
    mouth_dx = rng.uniform(0.3, 0.45)

    left_eye, right_eye = to_image(-eye_dx, eye_dy), to_image(eye_dx, eye_dy)
    nose = to_image(0.0, nose_v)
    mouth_l, mouth_r = to_image(-mouth_dx, mouth_v), to_image(mouth_dx, mouth_v)

    dark = rng.uniform(0.0, 0.2, 3)
    sclera = np.clip(skin + 0.35, 0.0, 1.0)
    masks = {}
    for name, ctr in (("left_eye", left_eye), ("right_eye", right_eye)):
        white = _ellipse_mask(xx, yy, ctr[0], ctr[1], 1.8 * eye_r, 1.2 * eye_r, tilt)
        img[white] = sclera
        m = _ellipse_mask(xx, yy, ctr[0], ctr[1], eye_r, eye_r, 0.0)
        img[m] = dark
        masks[name] = m
    bridge = to_image(0.0, eye_dy + 0.1)
    nose_color = np.clip(skin * 0.6, 0.0, 1.0)
    img[_capsule_mask(xx, yy, bridge, nose, 0.06 * ax)] = nose_color
    m = _ellipse_mask(xx, yy, nose[0], nose[1], 0.12 * ax, 0.12 * ax, 0.0)
    img[m] = nose_color
    masks["nose"] = m
    img[_capsule_mask(xx, yy, mouth_l, mouth_r, 0.07 * ax)] = rng.uniform(0.5, 1.0) * np.array([0.8, 0.1, 0.15])

    points = np.stack([left_eye, right_eye, nose, mouth_l, mouth_r])
    return img.astype(np.float32), points, masks


def synthesize_toy_dataset(cfg: ToyConfig = ToyConfig()) -> Dataset:
    """Deterministic face-sprite dataset; sprite ``i`` depends only on ``(seed, i)``."""
    images = np.empty((cfg.count, cfg.image_size, cfg.image_size, 3), dtype=np.float32)
    points = np.empty((cfg.count, len(TOY_POINT_NAMES), 2))
    for i in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, i])
        images[i], points[i], _ = render_sprite(rng, cfg.image_size, cfg)
    ids = [f"images/{i:06d}.png" for i in range(cfg.count)]
    return Dataset(ids=ids, size=cfg.image_size, images=images, landmarks=points, split="toy")


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write ``images/``, ``manifest.txt`` and (if present) ``annotations.csv``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, rel in enumerate(dataset.ids):
        arr = np.clip(np.rint(dataset.image(i) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / rel)
    (out / "manifest.txt").write_text("".join(f"{rel}\n" for rel in dataset.ids))
    if dataset.landmarks is not None:
        write_landmarks(out / "annotations.csv", dict(zip(dataset.ids, dataset.landmarks)))
    return out


# --- landmark CSV -----------------------------------------------------------


def write_landmarks(path, table: dict) -> None:
    """Write ``{image_id: (M, 2) array of (x, y)}`` to CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LANDMARK_HEADER)
        for image_id, pts in table.items():
            for k, (x, y) in enumerate(np.asarray(pts, dtype=np.float64)):
                w.writerow([image_id, k, repr(float(x)), repr(float(y))])


def read_landmarks(path) -> dict:
    """Read a landmark CSV into ``{image_id: (M, 2) float array}`` in file order."""
    rows: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if tuple(h.strip() for h in header) != LANDMARK_HEADER:
            raise LandmarkFormatError(f"{path}:1: expected header {','.join(LANDMARK_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LandmarkFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                idx, x, y = int(row[1]), float(row[2]), float(row[3])
            except ValueError as exc:
                raise LandmarkFormatError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(row[0], {})[idx] = (x, y)
    table = {}
    for image_id, pts in rows.items():
        if sorted(pts) != list(range(len(pts))):
            raise LandmarkFormatError(f"{path}: image {image_id} has non-contiguous point indices")
        table[image_id] = np.array([pts[k] for k in range(len(pts))], dtype=np.float64)
    return table
