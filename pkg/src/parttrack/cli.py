"""Command-line entry point: train, track, eval, gradcheck, synth, overlay, serve.

Config precedence is defaults < config file < CLI flags; the effective
merged config is echoed into the output directory. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from PIL import Image

from . import evaluation as ev
from . import model as mdl
from . import tracking as trk
from . import training as tr
from . import verify, viz
from .autodiff import NumericError
from .dataio import (FormatError, GenerationError, SynthConfig, gen_synthetic,
                     load_sequence, read_manifest, save_sequence, write_manifest)
from .tracking import InitError, Tracker, write_results
from .training import ConfigError, DivergenceError, SamplingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_SYNTH_FIELDS = {f.name: f.type for f in fields(SynthConfig)}
_SYNTH_JOB_KEYS = {"sequences": int, "length": int, "prefix": str}


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("PARTTRACK_OUT", ".")
    return Path(root) / default_name


def _parse_kv_file(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = (p.strip() for p in line.split("=", 1))
            pairs[key] = raw
    return pairs


def _merged_train_config(args) -> tr.TrainConfig:
    cfg = tr.TrainConfig()
    if args.config:
        cfg = tr.load_config(args.config, base=cfg)
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = raw.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for flag in args.ablation or []:
        overrides[flag] = "true"
    return tr.apply_overrides(cfg, overrides)


def cmd_train(args) -> int:
    cfg = _merged_train_config(args)
    dataset = [load_sequence(d) for d in read_manifest(args.data)]
    out = _out_dir(args, "train_run")
    tr.run_training(dataset, cfg, out, log=print)
    print(f"final checkpoint: {out / 'final.npz'}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg, params, _ = mdl.load_checkpoint(args.ckpt)
    seq = load_sequence(args.seq)
    out = _out_dir(args, "track_run")
    out.mkdir(parents=True, exist_ok=True)

    tracker = Tracker(params, cfg)
    tracker.init(seq.frames[0], seq.gt[0])
    boxes = [seq.gt[0]]
    overlay_dir = out / f"{seq.name}_overlay"
    if args.overlay:
        overlay_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(viz.overlay_frame(seq.frames[0], seq.gt[0])).save(
            overlay_dir / "00000001.png")
    for i, frame in enumerate(seq.frames[1:], start=2):
        box = tracker.track(frame)
        boxes.append(box)
        if args.overlay:
            img = viz.overlay_frame(frame, box, tracker.last_locations)
            Image.fromarray(img).save(overlay_dir / f"{i:08d}.png")
    result_file = out / f"{seq.name}.txt"
    write_results(boxes, result_file)
    with open(out / "config.txt", "w") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key}={value}\n")
    print(f"results: {result_file} ({len(boxes)} frames)")
    return EXIT_OK


def cmd_eval(args) -> int:
    seq_dirs = read_manifest(args.manifest)
    results_dir = Path(args.results)
    missing = [d.name for d in seq_dirs
               if not (results_dir / f"{d.name}.txt").exists()]
    if missing:
        print(f"missing result files for: {', '.join(sorted(missing))}",
              file=sys.stderr)
        return EXIT_DATA
    out = _out_dir(args, "eval_run")
    reports = []
    for d in seq_dirs:
        seq = load_sequence(d)
        pred = trk.read_results(results_dir / f"{d.name}.txt")
        if len(pred) != len(seq):
            raise FormatError(
                f"{d.name}: {len(pred)} result lines vs {len(seq)} frames")
        reports.append(ev.evaluate_sequence(d.name, pred, seq.gt))
    agg = ev.aggregate(reports)
    for rep in reports + [agg]:
        ev.write_report(rep, out)
    for line in agg.lines():
        print(line)
    with open(out / "eval_inputs.txt", "w") as fh:
        fh.write(f"results={results_dir}\nmanifest={args.manifest}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    lines, ok = verify.run_gradcheck(trials=args.trials, toy=args.toy,
                                     seed=args.seed or 0)
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_NUMERIC


def _synth_job(args) -> tuple[SynthConfig, int, int, str]:
    pairs = _parse_kv_file(args.config) if args.config else {}
    job = {"sequences": 10, "length": 40, "prefix": "seq"}
    synth_kwargs = {}
    for key, raw in pairs.items():
        if key in _SYNTH_JOB_KEYS:
            job[key] = _SYNTH_JOB_KEYS[key](raw)
        elif key in _SYNTH_FIELDS:
            kind = _SYNTH_FIELDS[key]
            if kind == "int":
                synth_kwargs[key] = int(raw)
            elif kind == "float":
                synth_kwargs[key] = float(raw)
            elif key == "shapes":
                synth_kwargs[key] = tuple(s.strip() for s in raw.split(","))
            elif key == "velocity":
                vx, vy = (float(v) for v in raw.split(","))
                synth_kwargs[key] = (vx, vy)
            else:
                synth_kwargs[key] = raw
        else:
            raise ConfigError(f"unknown configuration key: {key!r}")
    if args.seed is not None:
        synth_kwargs["seed"] = args.seed
    return (SynthConfig(**synth_kwargs), job["sequences"], job["length"],
            job["prefix"])


def cmd_synth(args) -> int:
    cfg, n_seq, length, prefix = _synth_job(args)
    out = _out_dir(args, "synth_data")
    out.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(n_seq):
        seq_cfg = replace(cfg, seed=cfg.seed + i)
        seq = gen_synthetic(seq_cfg, length)
        name = f"{prefix}-{i:03d}"
        save_sequence(seq, out / name)
        dirs.append(name)
    write_manifest(dirs, out / "manifest.txt")
    with open(out / "config.txt", "w") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key}={value}\n")
        fh.write(f"sequences={n_seq}\nlength={length}\nprefix={prefix}\n")
    print(f"wrote {n_seq} sequences under {out}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    seq = load_sequence(args.seq)
    boxes = trk.read_results(args.results)
    if len(boxes) != len(seq):
        raise FormatError(f"{len(boxes)} result lines vs {len(seq)} frames")
    out = _out_dir(args, "overlay_run")
    out.mkdir(parents=True, exist_ok=True)
    for i, (frame, box) in enumerate(zip(seq.frames, boxes), start=1):
        Image.fromarray(viz.overlay_frame(frame, box)).save(out / f"{i:08d}.png")
    print(f"wrote {len(boxes)} overlay frames under {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.ckpt), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parttrack",
        description="Dynamic part-based visual tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a sequence manifest")
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--data", required=True, help="manifest of sequence dirs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ablation", action="append",
                   choices=["no_attention_loss", "no_updater"])
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over one sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--out")
    p.add_argument("--overlay", action="store_true",
                   help="write per-frame overlays with box and part centers")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score result files against ground truth")
    p.add_argument("--results", required=True, help="directory of result files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--toy", action="store_true",
                   help="also check the full loss on the toy model")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="flat key=value synthetic config file")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("overlay", help="draw result boxes over a sequence")
    p.add_argument("--results", required=True, help="result file")
    p.add_argument("--seq", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--ckpt", help="checkpoint to serve")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, GenerationError, SamplingError, InitError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
