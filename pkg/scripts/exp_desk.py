"""Desk-scale feasibility run: train on synthetic sequences, track held-out."""
import sys
import time
from dataclasses import replace

import numpy as np

from parttrack import dataio, evaluation as ev, model as mdl, tracking as trk
from parttrack import training as tr


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


def run(tag, cfg, train_seqs, test_seqs):
    t0 = time.time()
    state = tr.init_train_state(cfg)
    totals = []
    for step in range(cfg.epochs * cfg.steps_per_epoch):
        batch = tr.sample_batch(train_seqs, state, cfg)
        rep = tr.train_step(batch, state, cfg)
        if rep:
            totals.append(rep.total)
        if (step + 1) % cfg.steps_per_epoch == 0:
            print(f"[{tag}] epoch {(step+1)//cfg.steps_per_epoch} "
                  f"mean total {np.mean(totals[-cfg.steps_per_epoch:]):.4f}",
                  flush=True)
    t_train = time.time() - t0
    mc = cfg.model()
    aos = []
    for seq in test_seqs:
        boxes, _ = trk.track_sequence(state.params, mc, seq.frames, seq.gt[0])
        aos.append(ev.evaluate_sequence(seq.name, boxes, seq.gt).ao)
    print(f"[{tag}] train {t_train:.0f}s  per-seq AO: "
          + " ".join(f"{a:.2f}" for a in aos), flush=True)
    print(f"[{tag}] mean AO = {np.mean(aos):.4f}", flush=True)
    return np.mean(aos)


if __name__ == "__main__":
    base = tr.TrainConfig(
        channels=32, heads=4, encoder_layers=2, ff_mult=2,
        template_size=64, search_size=128, stride=16,
        epochs=10, warmup_epochs=2, steps_per_epoch=40, batch_size=4,
        checkpoint_every=0, seed=0)
    train_seqs = make_dataset(50, seed0=100)
    test_seqs = make_dataset(10, seed0=900)
    which = sys.argv[1] if len(sys.argv) > 1 else "full"
    if which == "full":
        run("full", base, train_seqs, test_seqs)
    elif which == "noatt":
        run("noatt", replace(base, no_attention_loss=True), train_seqs, test_seqs)
    elif which == "noupd":
        run("noupd", replace(base, no_updater=True), train_seqs, test_seqs)
