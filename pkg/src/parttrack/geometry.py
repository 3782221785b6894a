"""Box math, part-center grids, target masks, and the parts-to-box estimator."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Frame(Enum):
    PIXELS = "pixels"          # image pixel coordinates
    NORMALIZED = "normalized"  # search-region coordinates in [0, 1]


class EstimationError(ValueError):
    """Box estimation is undefined (no target parts)."""


class DegenerateBoxWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, center + extents, in a stated coordinate frame.

    Normalized-frame boxes are only clamped to [0, 1] at final output,
    never inside loss computation.
    """

    cx: float
    cy: float
    w: float
    h: float
    frame: Frame = Frame.PIXELS

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box extents must be non-negative, got {self.w}x{self.h}")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @staticmethod
    def from_corners(x1, y1, x2, y2, frame=Frame.PIXELS) -> "BBox":
        return BBox((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, frame)

    @staticmethod
    def from_xywh(x, y, w, h, frame=Frame.PIXELS) -> "BBox":
        """Top-left convention, as used in on-disk ground-truth files."""
        return BBox(x + w / 2.0, y + h / 2.0, w, h, frame)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class PartGrid:
    """Regular grid of part centers; row-major order everywhere."""

    grid_h: int
    grid_w: int
    stride: float
    centers: np.ndarray  # (grid_h * grid_w, 2) as (x, y) pixels

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class TargetMask:
    """Binary indicator over template grid cells: 1 = target part."""

    values: np.ndarray  # (N,) of 0.0 / 1.0

    @property
    def n_target(self) -> int:
        return int(self.values.sum())

    def __len__(self):
        return len(self.values)


def part_centers(grid_h: int, grid_w: int, stride: float) -> PartGrid:
    """Centers of grid cells in pixels: ((col + .5) * stride, (row + .5) * stride)."""
    if grid_h < 1 or grid_w < 1 or stride < 1:
        raise ValueError("grid dimensions and stride must be >= 1")
    cols, rows = np.meshgrid(np.arange(grid_w), np.arange(grid_h))
    centers = np.stack(
        [(cols.ravel() + 0.5) * stride, (rows.ravel() + 0.5) * stride], axis=1
    ).astype(np.float64)
    return PartGrid(grid_h, grid_w, float(stride), centers)


def target_mask(grid: PartGrid, gt: BBox) -> TargetMask:
    """Mark parts whose centers fall inside `gt` (boundary counts as inside)."""
    if gt.frame is not Frame.PIXELS:
        raise ValueError("target_mask expects a pixel-frame box")
    if gt.area == 0:
        warnings.warn("zero-area ground-truth box yields an empty mask",
                      DegenerateBoxWarning)
        return TargetMask(np.zeros(grid.n, dtype=np.float64))
    x, y = grid.centers[:, 0], grid.centers[:, 1]
    inside = (x >= gt.x1) & (x <= gt.x2) & (y >= gt.y1) & (y <= gt.y2)
    values = inside.astype(np.float64)
    if values.sum() == 0:
        warnings.warn("ground-truth box contains no part centers",
                      DegenerateBoxWarning)
    return TargetMask(values)


def estimate_bbox(locations: Tensor, mask: TargetMask, sigma: float = 3.0,
                  formula: str = "std") -> Tensor:
    """Box (cx, cy, w, h) from the masked distribution of part locations.

    Center = masked mean per axis. Extent per axis:
      "std":     sigma * sqrt(masked mean squared deviation); with
                 sigma = sqrt(12) this recovers the width of a uniformly
                 filled box, while sigma = 3 systematically shrinks the
                 box by a factor 3/sqrt(12) ~ 0.866.
      "literal": (sigma / N_t) * sqrt(masked sum of squared deviations).

    Differentiable w.r.t. `locations` (N, 2). Raises EstimationError when
    the mask selects no parts; callers fall back to the previous box.
    """
    if formula not in ("std", "literal"):
        raise ValueError(f"unknown bbox scale formula: {formula!r}")
    n_t = mask.n_target
    if n_t == 0:
        raise EstimationError("cannot estimate a box from zero target parts")
    locations = ad.as_tensor(locations)
    m = ad.constant(mask.values.reshape(-1, 1))
    center = ad.sum_(ad.mul(locations, m), axis=0) * (1.0 / n_t)         # (2,)
    dev = ad.sub(locations, ad.reshape(center, (1, 2)))
    sq = ad.sum_(ad.mul(ad.mul(dev, dev), m), axis=0)                    # (2,)
    if formula == "std":
        extent = ad.sqrt(sq * (1.0 / n_t)) * sigma
    else:
        extent = ad.sqrt(sq) * (sigma / n_t)
    return ad.concat([center, extent], axis=0)


def tensor_to_bbox(t: Tensor, frame: Frame = Frame.NORMALIZED) -> BBox:
    cx, cy, w, h = (float(v) for v in np.asarray(t.data).reshape(4))
    return BBox(cx, cy, max(w, 0.0), max(h, 0.0), frame)


def _corner_areas(a: BBox, b: BBox):
    # all areas from corner differences so identical boxes cancel exactly
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    return area_a, area_b, inter


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0, 1]; 0 for disjoint or both-degenerate."""
    if a.frame is not b.frame:
        raise ValueError("boxes must share a coordinate frame")
    area_a, area_b, inter = _corner_areas(a, b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the enclosing-hull penalty."""
    if a.frame is not b.frame:
        raise ValueError("boxes must share a coordinate frame")
    area_a, area_b, inter = _corner_areas(a, b)
    union = area_a + area_b - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if union <= 0.0:
        return 0.0
    base = inter / union
    if hull <= 0.0:
        return base
    return base - max(hull - union, 0.0) / hull


def giou_tensor(pred: Tensor, gt: Tensor) -> Tensor:
    """Differentiable GIoU of two (cx, cy, w, h) tensors in one frame."""
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    half = ad.constant(np.array([0.5, 0.5]))
    p_lo = ad.sub(pred[0:2], ad.mul(pred[2:4], half))
    p_hi = ad.add(pred[0:2], ad.mul(pred[2:4], half))
    g_lo = ad.sub(gt[0:2], ad.mul(gt[2:4], half))
    g_hi = ad.add(gt[0:2], ad.mul(gt[2:4], half))
    zero = ad.constant(np.zeros(2))
    inter_wh = ad.maximum(ad.sub(ad.minimum(p_hi, g_hi), ad.maximum(p_lo, g_lo)), zero)
    inter = ad.mul(inter_wh[0], inter_wh[1])
    area_p = ad.mul(ad.maximum(pred[2], ad.constant(0.0)),
                    ad.maximum(pred[3], ad.constant(0.0)))
    area_g = ad.mul(gt[2], gt[3])
    union = ad.sub(ad.add(area_p, area_g), inter)
    hull_wh = ad.sub(ad.maximum(p_hi, g_hi), ad.minimum(p_lo, g_lo))
    hull = ad.mul(hull_wh[0], hull_wh[1])
    eps = 1e-12
    base = ad.div(inter, ad.add(union, eps))
    return ad.sub(base, ad.div(ad.sub(hull, union), ad.add(hull, eps)))


def crop_region(frame: np.ndarray, center: tuple[float, float],
                context_size: float, out_size: int) -> np.ndarray:
    """Square crop of side `context_size` centered at `center`, bilinearly
    resized to out_size x out_size. Out-of-frame area is padded with the
    per-channel image mean.
    """
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.size == 0:
        raise ValueError("cannot crop an empty frame")
    h, w, c = frame.shape
    mean = frame.reshape(-1, c).mean(axis=0)

    cx, cy = center
    x0 = cx - context_size / 2.0
    y0 = cy - context_size / 2.0
    scale = context_size / out_size

    # sample at output-pixel centers mapped back into the source frame
    u = x0 + (np.arange(out_size) + 0.5) * scale - 0.5
    v = y0 + (np.arange(out_size) + 0.5) * scale - 0.5
    uu, vv = np.meshgrid(u, v)

    u0 = np.floor(uu).astype(int)
    v0 = np.floor(vv).astype(int)
    du = uu - u0
    dv = vv - v0

    def sample(ui, vi):
        inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ui_c = np.clip(ui, 0, w - 1)
        vi_c = np.clip(vi, 0, h - 1)
        vals = frame[vi_c, ui_c]
        return np.where(inside[:, :, None], vals, mean)

    top = sample(u0, v0) * (1 - du)[:, :, None] + sample(u0 + 1, v0) * du[:, :, None]
    bot = (sample(u0, v0 + 1) * (1 - du)[:, :, None]
           + sample(u0 + 1, v0 + 1) * du[:, :, None])
    out = top * (1 - dv)[:, :, None] + bot * dv[:, :, None]
    return out
