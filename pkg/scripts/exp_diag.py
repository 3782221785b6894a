"""Diagnose what the trained model predicts: loss components, box vs gt."""
import sys
import time

import numpy as np

from parttrack import dataio, model as mdl, training as tr
from parttrack.geometry import estimate_bbox, iou, tensor_to_bbox, BBox, Frame


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


def diagnose(state, cfg, seqs, tag, n=16):
    mc = cfg.model()
    rng = state.rng.copy()
    ious, l1s, spreads, cerr = [], [], [], []
    for _ in range(n):
        trip = tr.sample_triplet(seqs, rng, cfg.frame_range)
        ex = tr.make_example(trip, cfg, rng)
        f_z = mdl.extract_features(ex.template_patch, state.params, mc, "template")
        h_x, h_z, locs = mdl.forward_parts(state.params, mc, f_z, ex.mask,
                                           ex.pseudo_patch, ex.search_patch)
        pred_t = estimate_bbox(locs, ex.mask, cfg.sigma)
        pred = tensor_to_bbox(pred_t)
        gt = BBox(*ex.gt_norm, frame=Frame.NORMALIZED)
        ious.append(iou(pred, gt))
        l1s.append(np.abs(pred_t.data - ex.gt_norm).sum())
        m = ex.mask.values.astype(bool)
        spreads.append(locs.data[m].std(axis=0).mean())
        cerr.append(np.hypot(pred.cx - gt.cx, pred.cy - gt.cy))
    print(f"[{tag}] train-dist IoU {np.mean(ious):.3f}  L1 {np.mean(l1s):.3f}  "
          f"loc-spread {np.mean(spreads):.3f}  center-err {np.mean(cerr):.3f}",
          flush=True)
    print(f"[{tag}] sample pred {pred_t.data.round(3)} gt {ex.gt_norm.round(3)} "
          f"n_target {ex.mask.n_target}", flush=True)


if __name__ == "__main__":
    overrides = dict(arg.split("=", 1) for arg in sys.argv[1:])
    cfg = tr.TrainConfig(
        channels=32, heads=4, encoder_layers=2, ff_mult=2,
        template_size=64, search_size=128, stride=16,
        epochs=10, warmup_epochs=2, steps_per_epoch=40, batch_size=4,
        checkpoint_every=0, seed=0)
    cfg = tr.apply_overrides(cfg, overrides)
    train_seqs = make_dataset(50, seed0=100)
    state = tr.init_train_state(cfg)
    t0 = time.time()
    comps = []
    for step in range(cfg.epochs * cfg.steps_per_epoch):
        batch = tr.sample_batch(train_seqs, state, cfg)
        rep = tr.train_step(batch, state, cfg)
        if rep:
            comps.append((rep.l1, rep.giou_loss, rep.attention))
        if (step + 1) % (2 * cfg.steps_per_epoch) == 0:
            arr = np.array(comps[-cfg.steps_per_epoch:])
            print(f"ep {(step+1)/cfg.steps_per_epoch:.0f}: "
                  f"l1 {arr[:,0].mean():.3f} giou {arr[:,1].mean():.3f} "
                  f"atten {arr[:,2].mean():.3f} ({time.time()-t0:.0f}s)",
                  flush=True)
            diagnose(state, cfg, train_seqs, f"ep{(step+1)//cfg.steps_per_epoch}")
