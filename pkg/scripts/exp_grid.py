"""Compare training-config variants on slope of train-dist IoU and held-out AO."""
import sys
import time

import numpy as np

from parttrack import dataio, evaluation as ev, model as mdl, tracking as trk
from parttrack import training as tr
from parttrack.geometry import BBox, Frame, estimate_bbox, iou, tensor_to_bbox


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


def train_iou(state, cfg, seqs, n=24):
    mc = cfg.model()
    rng = state.rng.copy()
    vals = []
    for _ in range(n):
        trip = tr.sample_triplet(seqs, rng, cfg.frame_range)
        ex = tr.make_example(trip, cfg, rng)
        f_z = mdl.extract_features(ex.template_patch, state.params, mc, "template")
        _, _, locs = mdl.forward_parts(state.params, mc, f_z, ex.mask,
                                       ex.pseudo_patch, ex.search_patch)
        pred = tensor_to_bbox(estimate_bbox(locs, ex.mask, cfg.sigma))
        vals.append(iou(pred, BBox(*ex.gt_norm, frame=Frame.NORMALIZED)))
    return float(np.mean(vals))


def run(tag, cfg, train_seqs, test_seqs):
    state = tr.init_train_state(cfg)
    t0 = time.time()
    for step in range(cfg.epochs * cfg.steps_per_epoch):
        batch = tr.sample_batch(train_seqs, state, cfg)
        tr.train_step(batch, state, cfg)
        if (step + 1) % (2 * cfg.steps_per_epoch) == 0:
            ep = (step + 1) // cfg.steps_per_epoch
            print(f"[{tag}] ep{ep} train-IoU {train_iou(state, cfg, train_seqs):.3f}"
                  f" ({time.time()-t0:.0f}s)", flush=True)
    mc = cfg.model()
    aos = []
    for seq in test_seqs:
        boxes, _ = trk.track_sequence(state.params, mc, seq.frames, seq.gt[0])
        aos.append(ev.evaluate_sequence(seq.name, boxes, seq.gt).ao)
    print(f"[{tag}] held-out AO {np.mean(aos):.3f} :: "
          + " ".join(f"{a:.2f}" for a in aos), flush=True)


BASE = dict(channels=32, heads=4, encoder_layers=2, ff_mult=2,
            template_size=64, search_size=128, stride=16,
            epochs=10, warmup_epochs=1, steps_per_epoch=100, batch_size=4,
            freeze_frac=0.0, checkpoint_every=0, seed=0)

VARIANTS = {
    "A_base": {},
    "B_lr3x": dict(lr_start=0.003, lr_peak=0.015, lr_end=0.002),
    "C_lr3x_enc3": dict(lr_start=0.003, lr_peak=0.015, lr_end=0.002,
                        encoder_layers=3),
    "D_lr6x": dict(lr_start=0.005, lr_peak=0.03, lr_end=0.004),
}

if __name__ == "__main__":
    train_seqs = make_dataset(50, seed0=100)
    test_seqs = make_dataset(10, seed0=900)
    for tag in sys.argv[1:]:
        cfg = tr.TrainConfig(**{**BASE, **VARIANTS[tag]})
        run(tag, cfg, train_seqs, test_seqs)
