"""Isolate the train->rollout gap: one-step accuracy vs drifted rollout."""
import math
import time

import numpy as np

from parttrack import dataio, model as mdl, tracking as trk, training as tr
from parttrack.dataio import extract_patch
from parttrack.geometry import (BBox, Frame, estimate_bbox, iou, part_centers,
                                target_mask, tensor_to_bbox)


def make_dataset(n, seed0, length=30):
    seqs = []
    for i in range(n):
        cfg = dataio.SynthConfig(
            canvas=128, deformation=0.10 + 0.08 * ((seed0 + i) % 3),
            distractors=1 + (i % 2), occluder_prob=0.05,
            velocity=(1.5 + (i % 3) * 0.7, 1.0 + (i % 2) * 0.8),
            direction_change_rate=0.12, texture_noise=0.03, seed=seed0 + i)
        seqs.append(dataio.gen_synthetic(cfg, length))
    return seqs


def one_step_iou(state, cfg, seq):
    """Crop every frame at the TRUE box (no drift), pseudo from previous gt."""
    mc = cfg.model()
    tb = seq.gt[0]
    ctx = cfg.template_context * math.sqrt(tb.w * tb.h)
    tpatch = extract_patch(seq.frames[0], (tb.cx, tb.cy), ctx, cfg.template_size)
    scale = cfg.template_size / ctx
    gt_in = BBox(cfg.template_size / 2, cfg.template_size / 2,
                 tb.w * scale, tb.h * scale)
    grid = part_centers(mc.template_grid, mc.template_grid, cfg.stride)
    mask = target_mask(grid, gt_in)
    f_z = mdl.extract_features(tpatch, state.params, mc, "template")
    vals = []
    for t in range(1, len(seq)):
        prev = seq.gt[t - 1]
        p_ctx = cfg.template_context * math.sqrt(prev.w * prev.h)
        ppatch = extract_patch(seq.frames[t - 1], (prev.cx, prev.cy), p_ctx,
                               cfg.template_size)
        cur = seq.gt[t]
        anchor = seq.gt[t - 1]  # where a perfect tracker would crop
        s_ctx = cfg.search_context * math.sqrt(anchor.w * anchor.h)
        spatch = extract_patch(seq.frames[t], (anchor.cx, anchor.cy), s_ctx,
                               cfg.search_size)
        _, _, locs = mdl.forward_parts(state.params, mc, f_z, mask, ppatch,
                                       spatch)
        pred_n = tensor_to_bbox(estimate_bbox(locs, mask, cfg.sigma))
        pred = BBox(anchor.cx - s_ctx / 2 + pred_n.cx * s_ctx,
                    anchor.cy - s_ctx / 2 + pred_n.cy * s_ctx,
                    pred_n.w * s_ctx, pred_n.h * s_ctx)
        vals.append(iou(pred, cur))
    return np.mean(vals)


if __name__ == "__main__":
    cfg = tr.TrainConfig(
        channels=32, heads=4, encoder_layers=2, ff_mult=2,
        template_size=64, search_size=128, stride=16,
        epochs=10, warmup_epochs=1, steps_per_epoch=100, batch_size=4,
        lr_start=0.005, lr_peak=0.03, lr_end=0.004,
        freeze_frac=0.0, checkpoint_every=0, seed=0)
    train_seqs = make_dataset(50, seed0=100)
    test_seqs = make_dataset(4, seed0=900)
    state = tr.init_train_state(cfg)
    t0 = time.time()
    for step in range(cfg.epochs * cfg.steps_per_epoch):
        tr.train_step(tr.sample_batch(train_seqs, state, cfg), state, cfg)
    print(f"trained {time.time()-t0:.0f}s")

    mc = cfg.model()
    for seq in test_seqs:
        os_iou = one_step_iou(state, cfg, seq)
        boxes, _ = trk.track_sequence(state.params, mc, seq.frames, seq.gt[0])
        roll = [iou(p, g) for p, g in zip(boxes[1:], seq.gt[1:])]
        print(f"{seq.name}: one-step IoU {os_iou:.3f}  rollout AO {np.mean(roll):.3f}")
        print("  frame IoU:", " ".join(f"{v:.2f}" for v in roll[:15]))
        print("  pred w/h:", " ".join(f"{b.w:.0f}/{b.h:.0f}" for b in boxes[1:15:2]),
              " gt w/h:", " ".join(f"{g.w:.0f}/{g.h:.0f}" for g in seq.gt[1:15:2]))
