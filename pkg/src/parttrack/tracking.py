"""Online tracking loop: fixed first-frame template, per-frame inference,
pseudo template refreshed from the most recent result.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import model as mdl
from .autodiff import NumericError, Tensor
from .dataio import extract_patch
from .geometry import (BBox, EstimationError, TargetMask, estimate_bbox,
                       part_centers, target_mask)
from .model import ModelConfig, PartSet


class InitError(ValueError):
    """First-frame initialization failed (degenerate ground truth)."""


class Tracker:
    """Single-target tracker; one instance owns one target's state.

    Model parameters are shared read-only, so several trackers may run
    concurrently over the same checkpoint. The template is featurized
    once at init and never changes; the pseudo template always derives
    from the immediately preceding output box.
    """

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig):
        # inference never needs gradients; detached copies keep forward
        # passes from building graphs
        self.params = {k: v.detach() for k, v in params.items()}
        self.cfg = cfg
        self.template_parts: PartSet | None = None
        self.template_mask: TargetMask | None = None
        self.pseudo_patch: np.ndarray | None = None
        self.last_box: BBox | None = None
        self.last_locations: np.ndarray | None = None  # (N_z, 2) pixels
        self.frame_idx = 0
        self.coasted = False

    def init(self, frame: np.ndarray, gt: BBox) -> None:
        """Build the fixed template state from the first frame."""
        h, w = frame.shape[:2]
        if gt.area <= 0:
            raise InitError("initial box has non-positive area")
        if gt.x2 <= 0 or gt.y2 <= 0 or gt.x1 >= w or gt.y1 >= h:
            raise InitError("initial box lies outside the frame")
        cfg = self.cfg
        ctx = cfg.template_context * math.sqrt(gt.w * gt.h)
        patch = extract_patch(frame, (gt.cx, gt.cy), ctx, cfg.template_size)
        scale = cfg.template_size / ctx
        gt_in_patch = BBox(cfg.template_size / 2.0, cfg.template_size / 2.0,
                           gt.w * scale, gt.h * scale)
        grid = part_centers(cfg.template_grid, cfg.template_grid, cfg.stride)
        mask = target_mask(grid, gt_in_patch)
        if mask.n_target == 0:
            raise InitError("initial box contains no part centers (all-zero mask)")
        self.template_parts = mdl.extract_features(patch, self.params, cfg,
                                                   "template")
        self.template_mask = mask
        self.pseudo_patch = patch
        self.last_box = gt
        self.last_locations = None
        self.frame_idx = 0
        self.coasted = False

    def track(self, frame: np.ndarray) -> BBox:
        """Locate the target in one new frame; returns a pixel-frame box.

        On a degenerate estimate the previous box is returned unchanged
        and `coasted` is flagged.
        """
        if self.last_box is None:
            raise InitError("track() called before init()")
        cfg = self.cfg
        last = self.last_box
        ctx = cfg.search_context * math.sqrt(last.w * last.h)
        x0 = last.cx - ctx / 2.0
        y0 = last.cy - ctx / 2.0
        try:
            search_patch = extract_patch(frame, (last.cx, last.cy), ctx,
                                         cfg.search_size)
            _, _, locations = mdl.forward_parts(
                self.params, cfg, self.template_parts, self.template_mask,
                self.pseudo_patch, search_patch)
            box_t = estimate_bbox(locations, self.template_mask, cfg.sigma,
                                  formula=cfg.bbox_scale_formula)
            ncx, ncy, nw, nh = (float(v) for v in box_t.data)
            if not all(map(math.isfinite, (ncx, ncy, nw, nh))):
                raise NumericError("non-finite box estimate")
        except (NumericError, EstimationError, ValueError):
            self.frame_idx += 1
            self.coasted = True
            return last

        h, w = frame.shape[:2]
        box = self._clamp_to_frame(
            BBox(x0 + ncx * ctx, y0 + ncy * ctx,
                 max(nw * ctx, 1.0), max(nh * ctx, 1.0)), w, h)
        self.last_locations = np.stack(
            [x0 + locations.data[:, 0] * ctx, y0 + locations.data[:, 1] * ctx],
            axis=1)
        p_ctx = cfg.template_context * math.sqrt(box.w * box.h)
        self.pseudo_patch = extract_patch(frame, (box.cx, box.cy), p_ctx,
                                          cfg.template_size)
        self.last_box = box
        self.frame_idx += 1
        self.coasted = False
        return box

    @staticmethod
    def _clamp_to_frame(box: BBox, w: int, h: int) -> BBox:
        """Final pixel-space clamp; never applied to intermediate boxes."""
        x1 = min(max(box.x1, 0.0), w - 1.0)
        y1 = min(max(box.y1, 0.0), h - 1.0)
        x2 = max(min(box.x2, float(w)), x1 + 1.0)
        y2 = max(min(box.y2, float(h)), y1 + 1.0)
        return BBox.from_corners(x1, y1, x2, y2)


def track_sequence(params: dict[str, Tensor], cfg: ModelConfig,
                   frames, gt_first: BBox) -> tuple[list[BBox], Tracker]:
    """Track a whole sequence from its first-frame box.

    The returned list starts with the given initial box, one entry per
    frame.
    """
    tracker = Tracker(params, cfg)
    tracker.init(frames[0], gt_first)
    boxes = [gt_first]
    for frame in frames[1:]:
        boxes.append(tracker.track(frame))
    return boxes, tracker


def write_results(boxes: list[BBox], path):
    """One 'x,y,w,h' (top-left) line per frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for b in boxes:
            x, y, w, h = b.to_xywh()
            fh.write(f"{x:.4f},{y:.4f},{w:.4f},{h:.4f}\n")


def read_results(path) -> list[BBox]:
    boxes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y, w, h = (float(v) for v in line.split(","))
            boxes.append(BBox.from_xywh(x, y, w, h))
    return boxes
