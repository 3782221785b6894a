"""Triplet sampling, jitter, LR schedule, SGD training loop, checkpoints.

Determinism contract: with a single worker, a fixed seed reproduces the
metrics log byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import NumericError, RngState, Tensor
from .dataio import Sequence, extract_patch
from .geometry import BBox, TargetMask, estimate_bbox, part_centers, target_mask
from .losses import LossReport, attention_loss, bbox_loss, total_loss
from .model import ModelConfig, PartSet


class ConfigError(ValueError):
    """Bad key or value in a configuration file or override."""


class SamplingError(ValueError):
    """Dataset cannot supply a triplet."""


class DivergenceError(ArithmeticError):
    """Too many consecutive non-finite training steps."""


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; field names double as config-file keys."""

    # architecture (see ModelConfig)
    channels: int = 64
    heads: int = 8
    encoder_layers: int = 4
    ff_mult: int = 2
    template_size: int = 128
    search_size: int = 256
    stride: int = 16
    exclude_masked_keys: bool = False
    template_context: float = 2.0
    search_context: float = 4.0
    sigma: float = 3.0
    tau: float = 1.0
    bbox_scale_formula: str = "std"
    # losses
    atten_lambda: float = 0.1
    w_l1: float = 1.0
    w_giou: float = 1.0
    atten_loss_unmasked: bool = False
    # optimizer schedule
    epochs: int = 40
    warmup_epochs: int = 5
    lr_start: float = 0.001
    lr_peak: float = 0.005
    lr_end: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 8
    steps_per_epoch: int = 50
    freeze_frac: float = 0.25
    # data sampling
    frame_range: int = 100
    jitter_shift: float = 0.08
    jitter_scale_min: float = 0.8
    jitter_scale_max: float = 1.25
    search_jitter_shift: float = 0.12
    search_jitter_scale_min: float = 0.85
    search_jitter_scale_max: float = 1.18
    # ablations + misc
    no_attention_loss: bool = False
    no_updater: bool = False
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs")
        for name in ("lr_start", "lr_peak", "lr_end"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.jitter_scale_min <= 0 or self.jitter_scale_min > self.jitter_scale_max:
            raise ConfigError("jitter scale bounds are inverted or non-positive")
        if self.frame_range < 1:
            raise ConfigError("frame_range must be >= 1")

    def model(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    updates = {}
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        updates[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    try:
        return replace(cfg, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Flat key=value file; '#' starts a comment; unknown keys rejected."""
    overrides: dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            overrides[key] = raw
    return apply_overrides(base or TrainConfig(), overrides)


def save_config(cfg: TrainConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key}={value}\n")


@dataclass
class Triplet:
    template_frame: np.ndarray
    template_box: BBox
    pseudo_frame: np.ndarray
    pseudo_box: BBox
    search_frame: np.ndarray
    search_box: BBox
    indices: tuple[int, int, int]  # (template, pseudo, search)


def sample_triplet(dataset: list[Sequence], rng: RngState,
                   frame_range: int = 100) -> Triplet:
    """Pick (template, pseudo, search) frames from one random sequence.

    Template and search lie within `frame_range` frames of one another;
    the pseudo frame is always the frame preceding the search frame.
    """
    if not dataset:
        raise SamplingError("empty dataset")
    seq = dataset[int(rng.integers(len(dataset)))]
    n = len(seq)
    if n < 2:
        raise SamplingError(f"{seq.name}: need at least 2 frames, have {n}")
    search = int(rng.integers(1, n))
    lo = max(0, search - frame_range)
    hi = min(n - 1, search + frame_range)
    draw = int(rng.integers(lo, hi))  # hi-lo choices, skipping `search`
    template = draw if draw < search else draw + 1
    pseudo = search - 1
    return Triplet(seq.frames[template], seq.gt[template],
                   seq.frames[pseudo], seq.gt[pseudo],
                   seq.frames[search], seq.gt[search],
                   (template, pseudo, search))


def jitter(gt: BBox, rng: RngState, shift_frac: float,
           scale_range: tuple[float, float], context_factor: float,
           frame_shape: tuple[int, int]) -> BBox:
    """Randomly shift and scale a box, clamped inside the frame.

    Shift is uniform in +-(shift_frac * context side) per axis; width and
    height scale independently by a uniform factor.
    """
    h, w = frame_shape[:2]
    u = rng.uniform(size=4)
    delta = shift_frac * context_factor * math.sqrt(gt.w * gt.h)
    cx = gt.cx + (2 * u[0] - 1) * delta
    cy = gt.cy + (2 * u[1] - 1) * delta
    lo, hi = scale_range
    bw = min(gt.w * (lo + (hi - lo) * u[2]), float(w))
    bh = min(gt.h * (lo + (hi - lo) * u[3]), float(h))
    cx = min(max(cx, bw / 2.0), w - bw / 2.0)
    cy = min(max(cy, bh / 2.0), h - bh / 2.0)
    return BBox(cx, cy, bw, bh)


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup then exponential decay; continuous at the joint."""
    if epoch < 0 or epoch > cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if cfg.warmup_epochs > 0 and epoch <= cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
    frac = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_peak * (cfg.lr_end / cfg.lr_peak) ** frac


@dataclass
class TrainingExample:
    template_patch: np.ndarray
    mask: TargetMask
    pseudo_patch: np.ndarray
    search_patch: np.ndarray
    gt_norm: np.ndarray  # (4,) cx, cy, w, h in search-patch coordinates


def make_example(triplet: Triplet, cfg: TrainConfig, rng: RngState) -> TrainingExample:
    """Crop the triplet into patches and normalized regression targets.

    The pseudo box is jittered to imitate an unreliable previous-frame
    result; the search crop is jittered around its ground truth so the
    regression target is not a constant.
    """
    mc = cfg.model()
    tb = triplet.template_box
    t_ctx = cfg.template_context * math.sqrt(tb.w * tb.h)
    template_patch = extract_patch(triplet.template_frame, (tb.cx, tb.cy),
                                   t_ctx, cfg.template_size)
    scale = cfg.template_size / t_ctx
    gt_in_patch = BBox(cfg.template_size / 2.0, cfg.template_size / 2.0,
                       tb.w * scale, tb.h * scale)
    grid = part_centers(mc.template_grid, mc.template_grid, cfg.stride)
    mask = target_mask(grid, gt_in_patch)

    pb = jitter(triplet.pseudo_box, rng, cfg.jitter_shift,
                (cfg.jitter_scale_min, cfg.jitter_scale_max),
                cfg.template_context, triplet.pseudo_frame.shape[:2])
    p_ctx = cfg.template_context * math.sqrt(pb.w * pb.h)
    pseudo_patch = extract_patch(triplet.pseudo_frame, (pb.cx, pb.cy),
                                 p_ctx, cfg.template_size)

    sb = jitter(triplet.search_box, rng, cfg.search_jitter_shift,
                (cfg.search_jitter_scale_min, cfg.search_jitter_scale_max),
                cfg.search_context, triplet.search_frame.shape[:2])
    s_ctx = cfg.search_context * math.sqrt(sb.w * sb.h)
    search_patch = extract_patch(triplet.search_frame, (sb.cx, sb.cy),
                                 s_ctx, cfg.search_size)
    true = triplet.search_box
    gt_norm = np.array([
        (true.cx - (sb.cx - s_ctx / 2.0)) / s_ctx,
        (true.cy - (sb.cy - s_ctx / 2.0)) / s_ctx,
        true.w / s_ctx,
        true.h / s_ctx])
    return TrainingExample(template_patch, mask, pseudo_patch, search_patch, gt_norm)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    velocity: dict[str, np.ndarray]
    step: int
    rng: RngState
    best_metric: float | None = None
    aborted_streak: int = 0

    def epoch(self, cfg: TrainConfig) -> float:
        return self.step / cfg.steps_per_epoch


def init_train_state(cfg: TrainConfig) -> TrainState:
    params = mdl.init_params(cfg.model(), RngState(cfg.seed))
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    return TrainState(params, velocity, step=0, rng=RngState(cfg.seed + 1))


def _trainable(name: str, epoch: float, cfg: TrainConfig) -> bool:
    """Staged unfreezing: backbone fixed early, first block fixed always."""
    if not name.startswith("backbone."):
        return True
    if epoch < cfg.freeze_frac * cfg.epochs:
        return False
    return not name.startswith("backbone.0.")


def example_loss(example: TrainingExample, params: dict[str, Tensor],
                 cfg: TrainConfig, rng: RngState):
    """Forward one training example to its total-loss components."""
    mc = cfg.model()
    f_z = mdl.extract_features(example.template_patch, params, mc, "template")
    h_x, h_z, locations = mdl.forward_parts(
        params, mc, f_z, example.mask, example.pseudo_patch,
        example.search_patch, no_updater=cfg.no_updater)
    pred = estimate_bbox(locations, example.mask, cfg.sigma,
                         formula=cfg.bbox_scale_formula)
    l1, g_loss = bbox_loss(pred, Tensor(example.gt_norm))
    if cfg.no_attention_loss:
        atten = ad.constant(0.0)
    else:
        a = mdl.hard_attention(h_z, h_x, cfg.tau, rng)
        atten = attention_loss(a, mdl.search_part_coords(mc), locations,
                               example.mask, unmasked=cfg.atten_loss_unmasked)
    return l1, g_loss, atten


def train_step(batch: list[TrainingExample], state: TrainState,
               cfg: TrainConfig) -> LossReport | None:
    """One SGD-with-momentum update on the batch-mean total loss.

    A non-finite forward/backward aborts the step: parameters stay
    untouched and None is returned.
    """
    epoch = state.epoch(cfg)
    lr = lr_schedule(min(epoch, float(cfg.epochs)), cfg)
    lam = 0.0 if cfg.no_attention_loss else cfg.atten_lambda
    try:
        l1s, gls, ats = [], [], []
        for example in batch:
            l1, gl, at = example_loss(example, state.params, cfg, state.rng)
            l1s.append(l1)
            gls.append(gl)
            ats.append(at)
        k = 1.0 / len(batch)
        l1 = ad.mul(ad.concat([ad.reshape(t, (1,)) for t in l1s]).sum(), k)
        gl = ad.mul(ad.concat([ad.reshape(t, (1,)) for t in gls]).sum(), k)
        at = ad.mul(ad.concat([ad.reshape(t, (1,)) for t in ats]).sum(), k)
        total, report = total_loss(l1, gl, at, atten_lambda=lam,
                                   w_l1=cfg.w_l1, w_giou=cfg.w_giou)
        if not math.isfinite(report.total):
            raise NumericError("non-finite total loss")
        total.backward()
    except NumericError:
        for p in state.params.values():
            p.zero_grad()
        state.aborted_streak += 1
        state.step += 1
        return None

    state.aborted_streak = 0
    apply_sgd(state, cfg, epoch, lr)
    for p in state.params.values():
        p.zero_grad()
    state.step += 1
    return report


def apply_sgd(state: TrainState, cfg: TrainConfig, epoch: float, lr: float):
    """Momentum-SGD update over accumulated gradients; lr=0 is a no-op."""
    if lr == 0:
        return
    for name, p in state.params.items():
        if p.grad is None or not _trainable(name, epoch, cfg):
            continue
        v = state.velocity[name]
        v *= cfg.momentum
        v += p.grad
        p.data = p.data - lr * v


def sample_batch(dataset: list[Sequence], state: TrainState,
                 cfg: TrainConfig) -> list[TrainingExample]:
    batch = []
    for _ in range(cfg.batch_size):
        triplet = sample_triplet(dataset, state.rng, cfg.frame_range)
        batch.append(make_example(triplet, cfg, state.rng))
    return batch


def run_training(dataset: list[Sequence], cfg: TrainConfig, out_dir,
                 log=None, max_abort_streak: int = 10) -> TrainState:
    """Full training loop: metrics log, periodic + final checkpoints.

    Raises DivergenceError after more than `max_abort_streak` consecutive
    aborted (non-finite) steps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    state = init_train_state(cfg)
    total_steps = cfg.epochs * cfg.steps_per_epoch
    with open(out / "metrics.log", "w") as metrics:
        for step in range(total_steps):
            batch = sample_batch(dataset, state, cfg)
            lr = lr_schedule(min(state.epoch(cfg), float(cfg.epochs)), cfg)
            report = train_step(batch, state, cfg)
            if report is None:
                line = f"step={step} epoch={state.epoch(cfg)!r} lr={lr!r} aborted=1"
                if state.aborted_streak > max_abort_streak:
                    raise DivergenceError(
                        f"{state.aborted_streak} consecutive non-finite steps")
            else:
                line = report.line(step, (step) / cfg.steps_per_epoch, lr)
            metrics.write(line + "\n")
            if log is not None:
                log(line)
            epoch_done = (step + 1) % cfg.steps_per_epoch == 0
            epoch_idx = (step + 1) // cfg.steps_per_epoch
            if epoch_done and cfg.checkpoint_every > 0 \
                    and epoch_idx % cfg.checkpoint_every == 0 \
                    and epoch_idx < cfg.epochs:
                _save_train_checkpoint(out / f"checkpoint_{epoch_idx:04d}.npz",
                                       cfg, state)
    _save_train_checkpoint(out / "final.npz", cfg, state)
    return state


def _save_train_checkpoint(path, cfg: TrainConfig, state: TrainState):
    extras = {f"velocity/{k}": v for k, v in state.velocity.items()}
    extras["step"] = np.array([state.step], dtype=np.int64)
    extras["rng"] = np.array([state.rng.seed, state.rng.counter], dtype=np.int64)
    mdl.save_checkpoint(path, cfg.model(), state.params, extras)


def load_train_checkpoint(path, cfg: TrainConfig | None = None):
    """Restore (model_cfg, TrainState); forward passes resume bit-identically."""
    expect = cfg.model() if cfg is not None else None
    model_cfg, params, extras = mdl.load_checkpoint(path, expect)
    velocity = {k[9:]: v for k, v in extras.items() if k.startswith("velocity/")}
    if not velocity:
        velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    step = int(extras["step"][0]) if "step" in extras else 0
    if "rng" in extras:
        rng = RngState(int(extras["rng"][0]), int(extras["rng"][1]))
    else:
        rng = RngState(0)
    return model_cfg, TrainState(params, velocity, step, rng)
