"""Pure-raster overlay drawing: box outlines and part-center dots."""

from __future__ import annotations

import numpy as np

from .geometry import BBox

BOX_COLOR = (0, 255, 0)
DOT_COLOR = (255, 0, 0)


def draw_box(img: np.ndarray, box: BBox, color=BOX_COLOR,
             thickness: int = 2) -> np.ndarray:
    h, w = img.shape[:2]
    x1 = int(np.clip(round(box.x1), 0, w - 1))
    y1 = int(np.clip(round(box.y1), 0, h - 1))
    x2 = int(np.clip(round(box.x2), 0, w - 1))
    y2 = int(np.clip(round(box.y2), 0, h - 1))
    t = thickness
    img[y1:y1 + t, x1:x2 + 1] = color
    img[max(y2 - t + 1, 0):y2 + 1, x1:x2 + 1] = color
    img[y1:y2 + 1, x1:x1 + t] = color
    img[y1:y2 + 1, max(x2 - t + 1, 0):x2 + 1] = color
    return img


def draw_points(img: np.ndarray, points, color=DOT_COLOR,
                radius: int = 3) -> np.ndarray:
    h, w = img.shape[:2]
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = (xx ** 2 + yy ** 2) <= radius ** 2
    for px, py in np.asarray(points).reshape(-1, 2):
        cx, cy = int(round(px)), int(round(py))
        if cx < -radius or cx >= w + radius or cy < -radius or cy >= h + radius:
            continue
        for dy, dx in zip(*np.nonzero(disk)):
            y, x = cy + dy - radius, cx + dx - radius
            if 0 <= y < h and 0 <= x < w:
                img[y, x] = color
    return img


def overlay_frame(frame: np.ndarray, box: BBox,
                  points=None) -> np.ndarray:
    """Copy of the frame with the predicted box and optional part centers."""
    img = np.array(frame, copy=True)
    draw_box(img, box)
    if points is not None:
        draw_points(img, points)
    return img
