"""Synthetic moving-object sequences and GOT-style on-disk sequence I/O.

On disk the ground truth is top-left "x,y,w,h" per line; in memory boxes
are center-based. The conversion lives here and nowhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .autodiff import RngState
from .geometry import BBox, crop_region

PIXEL_MEAN = 0.5  # subtracted from [0,1] patches at crop time


class FormatError(ValueError):
    """Sequence directory or ground-truth file violates the layout."""


class GenerationError(ValueError):
    """Synthetic configuration cannot keep the object visible."""


@dataclass
class Sequence:
    frames: list[np.ndarray]          # HxWx3 uint8
    gt: list[BBox]                    # pixel frame, center-based
    name: str = "sequence"
    metadata: dict = field(default_factory=dict)
    masks: list[np.ndarray] | None = None  # foreground masks, synthetic only

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise FormatError(
                f"{self.name}: {len(self.frames)} frames vs {len(self.gt)} boxes")
        for i, b in enumerate(self.gt):
            if b.area <= 0:
                raise FormatError(f"{self.name}: zero-area box at frame {i}")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SynthConfig:
    canvas: int = 160
    shapes: tuple[str, ...] = ("ellipse", "rectangle", "blob")
    velocity: tuple[float, float] = (2.0, 1.0)
    direction_change_rate: float = 0.1   # per-frame probability of a turn
    deformation: float = 0.0             # radius modulation amplitude
    occluder_prob: float = 0.0
    distractors: int = 0
    texture_noise: float = 0.03
    min_radius: int = 10
    max_radius: int = 22
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.direction_change_rate <= 1 and 0 <= self.occluder_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.deformation < 0:
            raise ValueError("deformation amplitude must be non-negative")


class _Blob:
    """One rendered object: shape, color, motion, and deformation state."""

    def __init__(self, cfg: SynthConfig, rng: RngState, margin_colors=None):
        self.shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        self.rx = float(rng.uniform(cfg.min_radius, cfg.max_radius))
        self.ry = float(rng.uniform(cfg.min_radius, cfg.max_radius))
        self.color = self._draw_color(rng)
        if margin_colors is not None:
            # keep distractor colors away from the target's
            while np.abs(self.color - margin_colors).sum() < 0.8:
                self.color = self._draw_color(rng)
        pad = self._max_extent(cfg) + 2
        if 2 * pad >= cfg.canvas:
            raise GenerationError("object too large for the canvas")
        self.pos = np.array([
            float(rng.uniform(pad, cfg.canvas - pad)),
            float(rng.uniform(pad, cfg.canvas - pad))])
        self.vel = np.array(cfg.velocity, dtype=np.float64)
        self.phase = float(rng.uniform(0, 2 * math.pi))
        if self.shape == "blob":
            k = 7
            self.angles = np.linspace(0, 2 * math.pi, k, endpoint=False) \
                + rng.uniform(-0.2, 0.2, size=k)
            self.radii = rng.uniform(0.7, 1.0, size=k)

    @staticmethod
    def _draw_color(rng) -> np.ndarray:
        # bright enough to stand off the dim background
        c = rng.uniform(0.2, 1.0, size=3)
        return c / c.max() * float(rng.uniform(0.65, 1.0))

    def _max_extent(self, cfg) -> float:
        return max(self.rx, self.ry) * (1.0 + cfg.deformation)

    def step(self, cfg: SynthConfig, rng: RngState):
        if cfg.direction_change_rate > 0 and rng.uniform() < cfg.direction_change_rate:
            ang = rng.uniform(-math.pi / 4, math.pi / 4)
            c, s = math.cos(ang), math.sin(ang)
            self.vel = np.array([c * self.vel[0] - s * self.vel[1],
                                 s * self.vel[0] + c * self.vel[1]])
        self.pos = self.pos + self.vel
        pad = self._max_extent(cfg) + 2
        for ax in (0, 1):
            if self.pos[ax] < pad:
                self.pos[ax] = 2 * pad - self.pos[ax]
                self.vel[ax] = -self.vel[ax]
            elif self.pos[ax] > cfg.canvas - pad:
                self.pos[ax] = 2 * (cfg.canvas - pad) - self.pos[ax]
                self.vel[ax] = -self.vel[ax]

    def mask(self, cfg: SynthConfig, t: int) -> np.ndarray:
        """Boolean foreground mask on the full canvas for frame t."""
        n = cfg.canvas
        wobble = cfg.deformation * math.sin(0.35 * t + self.phase)
        rx = self.rx * (1.0 + wobble)
        ry = self.ry * (1.0 - wobble)
        cx, cy = self.pos
        if self.shape == "ellipse":
            yy, xx = np.mgrid[0:n, 0:n]
            return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        if self.shape == "rectangle":
            yy, xx = np.mgrid[0:n, 0:n]
            return (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
        pts = [(cx + r * rx * math.cos(a), cy + r * ry * math.sin(a))
               for a, r in zip(self.angles, self.radii)]
        img = Image.new("L", (n, n), 0)
        ImageDraw.Draw(img).polygon(pts, fill=255)
        return np.asarray(img) > 0


def gen_synthetic(cfg: SynthConfig, length: int,
                  rng: RngState | None = None) -> Sequence:
    """Render a deterministic sequence; gt is the tight box of the object mask."""
    if length < 2:
        raise ValueError("a sequence needs at least 2 frames")
    rng = rng if rng is not None else RngState(cfg.seed)
    n = cfg.canvas

    target = _Blob(cfg, rng)
    others = [_Blob(cfg, rng, margin_colors=target.color)
              for _ in range(cfg.distractors)]

    # static smooth background, banded so it is not a constant
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    base = 0.12 + 0.08 * np.sin(xx / 23.0) + 0.08 * np.cos(yy / 31.0)
    background = np.stack([base * float(c) + 0.08
                           for c in rng.uniform(0.4, 1.0, size=3)], axis=2)

    frames, boxes, masks = [], [], []
    for t in range(length):
        canvas = background.copy()
        for blob in others:
            m = blob.mask(cfg, t)
            canvas[m] = blob.color
        target_mask = target.mask(cfg, t)
        if not target_mask.any():
            raise GenerationError(f"object left the canvas at frame {t}")
        canvas[target_mask] = target.color
        if cfg.occluder_prob > 0 and rng.uniform() < cfg.occluder_prob:
            width = int(rng.uniform(4, 10))
            x0 = int(target.pos[0] + rng.uniform(-target.rx, target.rx))
            x0 = min(max(x0, 0), n - width)
            canvas[:, x0:x0 + width] = 0.35
        if cfg.texture_noise > 0:
            canvas = canvas + rng.normal(0.0, cfg.texture_noise, size=canvas.shape)

        rows = np.flatnonzero(target_mask.any(axis=1))
        cols = np.flatnonzero(target_mask.any(axis=0))
        boxes.append(BBox.from_xywh(float(cols[0]), float(rows[0]),
                                    float(cols[-1] - cols[0] + 1),
                                    float(rows[-1] - rows[0] + 1)))
        frames.append((np.clip(canvas, 0, 1) * 255).astype(np.uint8))
        masks.append(target_mask)

        target.step(cfg, rng)
        for blob in others:
            blob.step(cfg, rng)

    meta = {"generator": "synthetic", "seed": cfg.seed, "canvas": cfg.canvas}
    return Sequence(frames, boxes, name=f"synth-{cfg.seed}",
                    metadata=meta, masks=masks)


def save_sequence(seq: Sequence, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        Image.fromarray(frame).save(out / f"{i:08d}.png")
    with open(out / "groundtruth.txt", "w") as fh:
        for b in seq.gt:
            x, y, w, h = b.to_xywh()
            fh.write(f"{x:.4f},{y:.4f},{w:.4f},{h:.4f}\n")
    return out


def load_sequence(seq_dir) -> Sequence:
    """Read numbered image files + groundtruth.txt; counts must match."""
    seq_dir = Path(seq_dir)
    gt_file = seq_dir / "groundtruth.txt"
    if not gt_file.exists():
        raise FormatError(f"{seq_dir}: missing groundtruth.txt")
    images = sorted(
        (p for p in seq_dir.iterdir()
         if p.suffix.lower() in (".png", ".jpg", ".jpeg") and p.stem.isdigit()),
        key=lambda p: int(p.stem))
    boxes = []
    with open(gt_file) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                x, y, w, h = (float(v) for v in line.replace("\t", ",").split(","))
            except ValueError as exc:
                raise FormatError(f"{gt_file}:{ln}: unparseable line {line!r}") from exc
            boxes.append(BBox.from_xywh(x, y, w, h))
    if len(images) != len(boxes):
        raise FormatError(
            f"{seq_dir}: {len(images)} frames but {len(boxes)} ground-truth lines")
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in images]
    return Sequence(frames, boxes, name=seq_dir.name,
                    metadata={"source": str(seq_dir)})


def write_manifest(seq_dirs, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for d in seq_dirs:
            fh.write(f"{d}\n")


def read_manifest(path) -> list[Path]:
    path = Path(path)
    dirs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            dirs.append(p if p.is_absolute() else path.parent / p)
    if not dirs:
        raise FormatError(f"{path}: empty manifest")
    return dirs


def extract_patch(frame: np.ndarray, center, context_size: float,
                  out_size: int) -> np.ndarray:
    """Crop + resize a frame into a mean-centered float patch."""
    img = np.asarray(frame, dtype=np.float64)
    if img.max() > 1.5:  # uint8-range input
        img = img / 255.0
    return crop_region(img, center, context_size, out_size) - PIXEL_MEAN
