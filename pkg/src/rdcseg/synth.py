"""Procedural road-like scenes: an upper band, a lower band, rectangles and discs."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .netpbm import read_netpbm, write_pgm, write_ppm

# base colors per class; classes past the table reuse it cyclically
_PALETTE = np.array([
    [90, 140, 220],   # upper band
    [110, 110, 110],  # lower band
    [200, 60, 50],
    [170, 90, 70],
    [60, 170, 70],
    [220, 200, 60],
    [140, 60, 170],
    [40, 190, 190],
], dtype=np.float64)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 128
    num_classes: int = 4
    rects: int = 3
    discs: int = 3
    noise: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError("scene extents must be at least 4x4")
        if not 2 <= self.num_classes <= 255:
            raise ValueError(f"num_classes must lie in [2, 255], got {self.num_classes}")


def object_classes(spec: SceneSpec) -> Tuple[List[int], List[int]]:
    """Classes assigned to rectangles and discs: classes 2.. alternate between shapes."""
    extra = list(range(2, spec.num_classes))
    if not extra:
        return [1], [0]
    rect = extra[0::2]
    disc = extra[1::2] or extra
    return rect, disc


def generate_scene(spec: SceneSpec, rng: np.random.Generator):
    """One ``(image uint8 (H, W, 3), labels uint8 (H, W))`` pair."""
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    horizon = int(rng.integers(h * 3 // 8, h * 5 // 8 + 1))
    labels[horizon:] = 1
    yy, xx = np.mgrid[0:h, 0:w]
    rect_cls, disc_cls = object_classes(spec)
    color = np.empty((h, w, 3))
    for c in (0, 1):
        color[labels == c] = _PALETTE[c] + rng.normal(0, 10, 3)
    for _ in range(spec.rects):
        c = int(rng.choice(rect_cls))
        rh = int(rng.integers(max(2, h // 8), max(3, h // 3)))
        rw = int(rng.integers(max(2, w // 16), max(3, w // 5)))
        top = int(rng.integers(0, h - rh))
        left = int(rng.integers(0, w - rw))
        m = (yy >= top) & (yy < top + rh) & (xx >= left) & (xx < left + rw)
        labels[m] = c
        color[m] = _PALETTE[c % len(_PALETTE)] + rng.normal(0, 15, 3)
    for _ in range(spec.discs):
        c = int(rng.choice(disc_cls))
        r = float(rng.uniform(max(1.5, h / 16), max(2.0, h / 6)))
        cy = float(rng.uniform(0, h))
        cx = float(rng.uniform(0, w))
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[m] = c
        color[m] = _PALETTE[c % len(_PALETTE)] + rng.normal(0, 15, 3)
    color += rng.normal(0, spec.noise, color.shape)
    image = np.clip(np.floor(color + 0.5), 0, 255).astype(np.uint8)
    return image, labels


def pair_paths(directory, stem):
    return (os.path.join(directory, f"{stem}_image.ppm"), os.path.join(directory, f"{stem}_label.pgm"))


def list_pairs(directory) -> List[Tuple[str, str, str]]:
    """``(stem, image_path, label_path)`` for every ``*_image.ppm`` with a matching label."""
    out = []
    for name in sorted(os.listdir(directory)):
        if name.endswith("_image.ppm"):
            stem = name[: -len("_image.ppm")]
            img, lab = pair_paths(directory, stem)
            if os.path.exists(lab):
                out.append((stem, img, lab))
    return out


def write_scenes(spec: SceneSpec, count: int, directory) -> List[str]:
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    stems = []
    for i in range(count):
        image, labels = generate_scene(spec, rng)
        stem = f"scene_{i:05d}"
        img_path, lab_path = pair_paths(directory, stem)
        write_ppm(img_path, image)
        write_pgm(lab_path, labels)
        stems.append(stem)
    return stems


def load_pairs(directory):
    """All pairs of a directory as two lists of arrays."""
    images, labels = [], []
    for _, img, lab in list_pairs(directory):
        images.append(read_netpbm(img))
        labels.append(read_netpbm(lab))
    return images, labels
