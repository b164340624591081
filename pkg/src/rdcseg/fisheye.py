"""Pinhole -> equidistance-fisheye warping (zoom augmentation).

A target (fisheye) pixel at radius ``r_f`` from its principal point looks
along the ray with incidence angle ``r_f / f``; the same ray lands in the
pinhole source image at radius ``f * tan(r_f / f)``. The direction angle
around the principal point is unchanged. Grids are built target -> source
so every output pixel is filled (or explicitly marked unmapped).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

VOID = 255
_GRID_HEADER = struct.Struct("<4I")


def radial_map(r_f, f):
    """Source radius ``f * tan(r_f / f)``; NaN where ``r_f / f >= pi / 2``."""
    if np.any(np.asarray(f) <= 0):
        raise ValueError(f"focal length must be positive, got {f}")
    r = np.asarray(r_f, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("target radius must be nonnegative")
    theta = r / f
    mapped = theta < math.pi / 2
    out = np.full(theta.shape, np.nan)
    out[mapped] = np.tan(theta[mapped]) * np.broadcast_to(f, theta.shape)[mapped]
    return float(out) if out.ndim == 0 else out


def default_base_focal(target_shape: Tuple[int, int]) -> float:
    """Focal length that puts the nearest image border at 90 degrees incidence."""
    h, w = target_shape
    if h <= 0 or w <= 0:
        raise ValueError(f"extents must be positive, got {target_shape}")
    return 2.0 * (min(h, w) / 2.0) / math.pi


def image_center(shape: Tuple[int, int]) -> Tuple[float, float]:
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0


@dataclass(frozen=True)
class ProjectionParams:
    focal: float
    fisheye_center: Tuple[float, float]       # (u_fx, u_fy) in the target image
    conventional_center: Tuple[float, float]  # (u_cx, u_cy) in the source image

    @classmethod
    def centered(cls, focal, target_shape, source_shape) -> "ProjectionParams":
        return cls(float(focal), image_center(target_shape), image_center(source_shape))


@dataclass
class RemapGrid:
    """Source coordinates ``(x_c, y_c)`` for every target pixel; NaN marks unmapped."""

    xc: np.ndarray
    yc: np.ndarray
    source_shape: Tuple[int, int]

    @property
    def target_shape(self) -> Tuple[int, int]:
        return self.xc.shape

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.xc)

    def save(self, path):
        """Header of (H_f, W_f, H_c, W_c) uint32 LE, then interleaved (x_c, y_c) float64 LE."""
        hf, wf = self.target_shape
        hc, wc = self.source_shape
        data = np.stack([self.xc, self.yc], axis=-1).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(_GRID_HEADER.pack(hf, wf, hc, wc))
            fh.write(data.tobytes())

    @classmethod
    def load(cls, path) -> "RemapGrid":
        with open(path, "rb") as fh:
            raw = fh.read()
        hf, wf, hc, wc = _GRID_HEADER.unpack_from(raw)
        data = np.frombuffer(raw[_GRID_HEADER.size:], dtype="<f8")
        if data.size != hf * wf * 2:
            raise ValueError(f"{path}: expected {hf * wf * 2} coordinates, got {data.size}")
        data = data.reshape(hf, wf, 2).astype(np.float64)
        return cls(data[..., 0].copy(), data[..., 1].copy(), (hc, wc))


def build_remap_grid(params: ProjectionParams, target_shape, source_shape) -> RemapGrid:
    hf, wf = (int(s) for s in target_shape)
    hc, wc = (int(s) for s in source_shape)
    if min(hf, wf, hc, wc) <= 0:
        raise ValueError("extents must be positive")
    ufx, ufy = params.fisheye_center
    ucx, ucy = params.conventional_center
    yf, xf = np.mgrid[0:hf, 0:wf].astype(np.float64)
    dx = xf - ufx
    dy = yf - ufy
    r_f = np.hypot(dx, dy)
    r_c = radial_map(r_f, params.focal)
    phi = np.arctan2(dy, dx)
    xc = ucx + r_c * np.cos(phi)
    yc = ucy + r_c * np.sin(phi)
    inside = np.isfinite(xc) & (xc >= 0) & (xc <= wc - 1) & (yc >= 0) & (yc <= hc - 1)
    xc = np.where(inside, xc, np.nan)
    yc = np.where(inside, yc, np.nan)
    return RemapGrid(xc, yc, (hc, wc))


def _check_source(src, grid):
    if tuple(src.shape[:2]) != tuple(grid.source_shape):
        raise ValueError(f"source extents {src.shape[:2]} != grid source extents {grid.source_shape}")


def warp_image(src: np.ndarray, grid: RemapGrid, fill=0) -> np.ndarray:
    """Bilinear warp of an (H, W) or (H, W, C) image; unmapped pixels get ``fill``.

    Integer images are rounded half-up and clipped back to their dtype range.
    """
    src = np.asarray(src)
    _check_source(src, grid)
    hc, wc = grid.source_shape
    valid = grid.valid
    x = np.where(valid, grid.xc, 0.0)
    y = np.where(valid, grid.yc, 0.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, wc - 1)
    y1 = np.minimum(y0 + 1, hc - 1)
    s = src.astype(np.float64)
    if s.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    out = ((1 - fy) * ((1 - fx) * s[y0, x0] + fx * s[y0, x1])
           + fy * ((1 - fx) * s[y1, x0] + fx * s[y1, x1]))
    if np.issubdtype(src.dtype, np.integer):
        info = np.iinfo(src.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max)
    out = out.astype(src.dtype)
    out[~valid] = fill
    return out


def warp_labels(src: np.ndarray, grid: RemapGrid, void_class: int = VOID) -> np.ndarray:
    """Nearest-neighbor warp of a label map; unmapped pixels get ``void_class``."""
    src = np.asarray(src)
    _check_source(src, grid)
    valid = grid.valid
    x = np.floor(np.where(valid, grid.xc, 0.0) + 0.5).astype(np.intp)
    y = np.floor(np.where(valid, grid.yc, 0.0) + 0.5).astype(np.intp)
    out = src[y, x].copy()
    out[~valid] = void_class
    return out


@dataclass(frozen=True)
class ZoomAugmentConfig:
    mode: str = "fixed"
    focal: float = 159.0
    focal_range: Tuple[float, float] = (200.0, 800.0)
    output_shape: Tuple[int, int] = (576, 640)
    fill: int = 0
    void_class: int = VOID

    def __post_init__(self):
        if self.mode not in ("fixed", "random"):
            raise ValueError(f"mode must be 'fixed' or 'random', got {self.mode!r}")
        lo, hi = self.focal_range
        if self.mode == "fixed" and self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.mode == "random" and not 0 < lo <= hi:
            raise ValueError(f"focal range must satisfy 0 < min <= max, got {self.focal_range}")


def sample_focal(config: ZoomAugmentConfig, rng: Optional[np.random.Generator] = None) -> float:
    if config.mode == "fixed":
        return float(config.focal)
    if rng is None:
        raise ValueError("random mode needs a generator")
    lo, hi = config.focal_range
    return float(rng.uniform(lo, hi))


def zoom_augment(image, labels, config: ZoomAugmentConfig, rng=None):
    """Warp an image/label pair with one focal draw. Returns ``(image, labels, focal)``."""
    f = sample_focal(config, rng)
    src_shape = np.shape(labels)[:2]
    grid = build_remap_grid(ProjectionParams.centered(f, config.output_shape, src_shape),
                            config.output_shape, src_shape)
    return warp_image(image, grid, config.fill), warp_labels(labels, grid, config.void_class), f
