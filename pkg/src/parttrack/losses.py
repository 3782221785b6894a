"""Box regression loss, attention-guided localization loss, total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import TargetMask, giou_tensor


@dataclass(frozen=True)
class LossReport:
    """Per-step loss components; total = w_l1*l1 + w_giou*giou_loss + lambda*atten."""

    l1: float
    giou_loss: float
    attention: float
    total: float
    atten_lambda: float
    w_l1: float = 1.0
    w_giou: float = 1.0

    def line(self, step: int, epoch: float, lr: float) -> str:
        return (f"step={step} epoch={epoch!r} lr={lr!r} l1={self.l1!r} "
                f"giou={self.giou_loss!r} atten={self.attention!r} "
                f"total={self.total!r}")


def bbox_loss(pred: Tensor, gt: Tensor,
              w_l1: float = 1.0, w_giou: float = 1.0) -> tuple[Tensor, Tensor]:
    """L1 distance over (cx, cy, w, h) and 1 - GIoU, both in one frame.

    Returns the two unweighted components as scalar tensors.
    """
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    l1 = ad.l1_distance(pred, gt)
    g_loss = ad.sub(1.0, giou_tensor(pred, gt))
    return l1, g_loss


def attention_loss(a: Tensor, part_coords: np.ndarray, locations: Tensor,
                   mask: TargetMask, unmasked: bool = False) -> Tensor:
    """Sum of L1 distances between attended and predicted part locations.

    `a` holds one-hot rows over the search parts, `part_coords` is the
    (2, N_x) table of normalized search-part coordinates. Background
    parts are excluded unless `unmasked`; their zeroed features would
    only contribute supervision noise.
    """
    attended = ad.matmul(a, ad.constant(np.asarray(part_coords).T))  # (N_z, 2)
    per_part = ad.sum_(ad.abs_(ad.sub(attended, ad.as_tensor(locations))), axis=1)
    if unmasked:
        return ad.sum_(per_part)
    return ad.sum_(ad.mul(per_part, ad.constant(mask.values)))


def total_loss(l1: Tensor, giou_loss: Tensor, attention: Tensor,
               atten_lambda: float = 0.1, w_l1: float = 1.0,
               w_giou: float = 1.0) -> tuple[Tensor, LossReport]:
    """Combine the components: w_l1*l1 + w_giou*(1-GIoU) + lambda*attention."""
    if atten_lambda < 0:
        raise ValueError("attention loss weight must be non-negative")
    total = ad.add(ad.add(ad.mul(l1, w_l1), ad.mul(giou_loss, w_giou)),
                   ad.mul(attention, atten_lambda))
    report = LossReport(l1=float(l1.data), giou_loss=float(giou_loss.data),
                        attention=float(attention.data), total=float(total.data),
                        atten_lambda=atten_lambda, w_l1=w_l1, w_giou=w_giou)
    return total, report
