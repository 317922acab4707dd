"""Static landmark overlays: one fixed color per landmark index across all images."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data_io import _read_manifest


def landmark_colors(k: int):
    """Evenly spaced, fully saturated hues; index ``i`` always gets the same color."""
    return [tuple(int(255 * c) for c in colorsys.hsv_to_rgb(i / max(k, 1), 0.9, 1.0))
            for i in range(k)]


def overlay(image: Image.Image, points, min_side=256) -> Image.Image:
    image = image.convert("RGB")
    scale = max(1, int(np.ceil(min_side / min(image.size))))
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(image)
    radius = max(2, scale + 1)
    colors = landmark_colors(len(points))
    for (x, y), color in zip(np.asarray(points, dtype=np.float64), colors):
        cx, cy = (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius],
                     fill=color, outline=(0, 0, 0))
    return image


def draw_landmarks(images_dir, table: dict, out_dir, data=None, limit=0, min_side=256):
    """Write ``<out_dir>/<image stem>_landmarks.png`` for each image id in ``table``.

    Points are in the source image frame, except when ``data`` (a loaded
    Dataset) is given, in which case its resized images are drawn instead.
    """
    root = Path(images_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = list(table)
    if data is None:
        order = {rel: i for i, rel in enumerate(_read_manifest(root))}
        ids.sort(key=lambda r: order.get(r, len(order)))
    if limit:
        ids = ids[:limit]
    written = []
    for n, image_id in enumerate(ids):
        if data is not None:
            arr = np.clip(np.rint(data.image(n) * 255), 0, 255).astype(np.uint8)
            img = Image.fromarray(arr)
        else:
            img = Image.open(root / image_id)
        target = out / f"{Path(image_id).stem}_landmarks.png"
        overlay(img, table[image_id], min_side).save(target)
        written.append(target)
    return written
